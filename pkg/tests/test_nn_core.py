"""Tests for the dense network: forward, reverse and forward mode, SGD."""

import numpy as np
import pytest

from spankey.deny import cross_entropy
from spankey.errors import ConfigError, NonFiniteError, ShapeMismatchError, SiteIndexError
from spankey.injection import InjectionPlan
from spankey.keyspace import alpha_gradient, make_basis
from spankey.nn_core import (
    Gradients,
    Network,
    OptimState,
    backward,
    build_layer_dims,
    effective_jacobian,
    forward,
    init_network,
    jacobian_vector_product,
    logit_jvp,
    lr_at,
    replay_trace,
    sgd_step,
    vector_jacobian_product,
)


def identity_net(dims, seed=0):
    return init_network(dims, "identity", "plain_C", seed=seed)


def scalar_forward(net, x):
    """Loop-by-loop reference forward pass."""
    a = list(x)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = []
        for r in range(w.shape[0]):
            total = b[r]
            for c in range(w.shape[1]):
                total += w[r, c] * a[c]
            z.append(total)
        if i < net.depth - 1:
            z = [max(v, 0.0) for v in z]
        a = z
    return np.array(a)


#####################################
# Network construction
#####################################


def test_init_is_seeded(relu_net):
    again = init_network([5, 7, 6, 3], "relu", "plain_C", seed=42)
    for name, value in relu_net.parameters().items():
        np.testing.assert_array_equal(value, again.parameters()[name])


def test_layer_dims_for_reject_head():
    assert build_layer_dims(784, [256, 128], 10, "reject_C_plus_1") == [784, 256, 128, 11]
    net = init_network([4, 6, 4], "relu", "reject_C_plus_1", seed=0)
    assert net.num_classes == 3
    assert net.reject_index == 3


def test_aux_head_has_scalar_readout():
    net = init_network([4, 6, 3], "relu", "aux_reject", seed=0)
    _, trace = forward(net, np.ones((2, 4)))
    assert trace.aux_logit.shape == (2,)
    assert set(net.parameters()) >= {"aux_w", "aux_b"}


def test_bad_shapes_are_rejected():
    with pytest.raises(ShapeMismatchError):
        Network([2, 3], [np.zeros((2, 3))], [np.zeros(3)], [])
    with pytest.raises(ConfigError):
        Network([2, 3, 2], [np.zeros((3, 2)), np.zeros((2, 3))], [np.zeros(3), np.zeros(2)], ["gelu"])


def test_record_round_trip_is_exact(relu_net):
    restored = Network.from_record(relu_net.to_record())
    for name, value in relu_net.parameters().items():
        np.testing.assert_array_equal(value, restored.parameters()[name])


#####################################
# Forward pass
#####################################


def test_forward_matches_scalar_loops(relu_net):
    x = np.random.default_rng(1).normal(size=5)
    logits, _ = forward(relu_net, x)
    np.testing.assert_allclose(logits, scalar_forward(relu_net, x), rtol=1e-12, atol=1e-12)


def test_single_vector_gives_single_logits(relu_net):
    logits, trace = forward(relu_net, np.ones(5))
    assert logits.shape == (3,)
    assert trace.logits.shape == (1, 3)


@pytest.mark.parametrize("kind", ["add", "mul"])
def test_zero_gamma_matches_plain_forward(relu_net, kind):
    x = np.random.default_rng(2).normal(size=(6, 5))
    plan = InjectionPlan(sites=(0, 1), kind=kind, gamma=0.0)
    keys = {0: np.full(7, 3.0), 1: np.full(6, -2.0)}
    injected, _ = forward(relu_net, x, plan, keys)
    plain, _ = forward(relu_net, x)
    np.testing.assert_array_equal(injected, plain)


def test_additive_key_shifts_linear_logits_exactly():
    net = identity_net([4, 5, 3], seed=4)
    x = np.random.default_rng(3).normal(size=4)
    k = np.random.default_rng(4).normal(size=5)
    plan = InjectionPlan(sites=(0,), kind="add", gamma=0.7)
    shifted, _ = forward(net, x, plan, {0: k})
    plain, _ = forward(net, x)
    np.testing.assert_allclose(shifted - plain, 0.7 * net.weights[1] @ k, rtol=1e-12, atol=1e-12)


def test_missing_key_means_no_injection(relu_net):
    x = np.ones((2, 5))
    plan = InjectionPlan(sites=(0, 1))
    none_keys, _ = forward(relu_net, x, plan, {0: None})
    plain, _ = forward(relu_net, x)
    np.testing.assert_array_equal(none_keys, plain)


def test_key_errors(relu_net):
    plan = InjectionPlan(sites=(0,))
    with pytest.raises(ShapeMismatchError):
        forward(relu_net, np.ones(5), plan, {0: np.ones(6)})
    with pytest.raises(SiteIndexError):
        forward(relu_net, np.ones(5), plan, {1: np.ones(6)})
    with pytest.raises(SiteIndexError):
        forward(relu_net, np.ones(5), InjectionPlan(sites=(2,)), {2: np.ones(3)})


def test_replay_is_bit_exact(relu_net):
    x = np.random.default_rng(5).normal(size=(4, 5))
    plan = InjectionPlan(sites=(1,), kind="mul", gamma=0.5)
    logits, trace = forward(relu_net, x, plan, {1: np.linspace(-1, 1, 6)})
    assert np.array_equal(replay_trace(relu_net, trace), logits)


#####################################
# Reverse mode
#####################################


def test_zero_upstream_gives_zero_gradients(relu_net):
    _, trace = forward(relu_net, np.ones((3, 5)))
    grads = backward(relu_net, trace, np.zeros((3, 3)))
    for g in grads.params.values():
        assert not np.any(g)


def test_stale_trace_is_rejected(relu_net):
    other = init_network([5, 8, 6, 3], "relu", "plain_C", seed=0)
    _, trace = forward(other, np.ones((1, 5)))
    with pytest.raises(ShapeMismatchError):
        backward(relu_net, trace, np.zeros((1, 3)))


@pytest.mark.parametrize("kind,point", [("add", "post"), ("mul", "post"), ("add", "pre"), ("mul", "pre")])
def test_backward_matches_finite_differences(tanh_net, kind, point):
    rng = np.random.default_rng(6)
    x = rng.normal(size=(4, 5))
    y = np.array([0, 1, 2, 1])
    plan = InjectionPlan(sites=(0, 1), kind=kind, gamma=0.6, point=point)
    keys = {0: rng.normal(size=7), 1: rng.normal(size=6)}

    def loss(net, ks):
        logits, _ = forward(net, x, plan, ks)
        return cross_entropy(logits, y).value

    logits, trace = forward(tanh_net, x, plan, keys)
    grads = backward(tanh_net, trace, cross_entropy(logits, y).grad)
    eps = 1e-6
    for name, value in tanh_net.parameters().items():
        idx = (0,) * value.ndim
        old = value[idx]
        value[idx] = old + eps
        up = loss(tanh_net, keys)
        value[idx] = old - eps
        down = loss(tanh_net, keys)
        value[idx] = old
        assert grads.params[name][idx] == pytest.approx((up - down) / (2 * eps), rel=1e-5, abs=1e-9)
    for site, k in keys.items():
        step = np.zeros_like(k)
        step[2] = eps
        up = loss(tanh_net, {**keys, site: k + step})
        down = loss(tanh_net, {**keys, site: k - step})
        assert grads.keys[site][2] == pytest.approx((up - down) / (2 * eps), rel=1e-5, abs=1e-9)


def test_input_gradient_matches_finite_differences(tanh_net):
    x = np.random.default_rng(7).normal(size=(1, 5))
    c = np.array([[1.0, -2.0, 0.5]])
    _, trace = forward(tanh_net, x)
    grads = backward(tanh_net, trace, c)
    eps = 1e-6
    step = np.zeros_like(x)
    step[0, 3] = eps
    up = float(np.sum(c * forward(tanh_net, x + step)[0]))
    down = float(np.sum(c * forward(tanh_net, x - step)[0]))
    assert grads.inputs[0, 3] == pytest.approx((up - down) / (2 * eps), rel=1e-6, abs=1e-9)


def test_alpha_gradient_matches_finite_differences():
    net = identity_net([4, 6, 3], seed=8)
    basis = make_basis(6, 2, seed=9)
    x = np.random.default_rng(10).normal(size=(3, 4))
    c = np.random.default_rng(11).normal(size=(3, 3))
    plan = InjectionPlan(sites=(0,), gamma=1.3)
    alpha = np.array([0.4, -1.1])

    def loss(a):
        return float(np.sum(c * forward(net, x, plan, {0: a @ basis.rows})[0]))

    _, trace = forward(net, x, plan, {0: alpha @ basis.rows})
    grad = alpha_gradient(basis, backward(net, trace, c).keys[0])
    eps = 1e-6
    for j in range(2):
        step = np.zeros(2)
        step[j] = eps
        assert grad[j] == pytest.approx((loss(alpha + step) - loss(alpha - step)) / (2 * eps), rel=1e-7, abs=1e-9)


#####################################
# Forward mode
#####################################


def test_jvp_through_identity_layers_returns_direction():
    dims = [3, 3, 3, 3]
    net = Network(dims, [np.eye(3)] * 3, [np.zeros(3)] * 3, ["identity", "identity"])
    _, trace = forward(net, np.ones((1, 3)))
    v = np.array([0.5, -1.0, 2.0])
    np.testing.assert_array_equal(jacobian_vector_product(net, trace, 0, v)[0], v)


def test_jvp_of_zero_direction_is_zero(relu_net):
    _, trace = forward(relu_net, np.ones((2, 5)))
    assert not np.any(jacobian_vector_product(relu_net, trace, 0, np.zeros(7)))


def test_jvp_matches_finite_differences_away_from_kinks(relu_net):
    rng = np.random.default_rng(12)
    plan = InjectionPlan(sites=(0,), gamma=1.0)
    eps = 1e-6
    for _ in range(5):
        x = rng.normal(size=(1, 5))
        v = rng.normal(size=7)
        _, trace = forward(relu_net, x)
        pre = trace.act_inputs[1]
        if np.min(np.abs(pre)) < 1e-3:
            continue
        base = trace.penultimate
        _, moved = forward(relu_net, x, plan, {0: eps * v})
        numeric = (moved.penultimate - base) / eps
        np.testing.assert_allclose(jacobian_vector_product(relu_net, trace, 0, v), numeric, rtol=1e-5, atol=1e-8)


def test_vjp_is_adjoint_of_logit_jvp(tanh_net):
    rng = np.random.default_rng(13)
    plan = InjectionPlan(sites=(0, 1), kind="mul", gamma=0.4)
    _, trace = forward(tanh_net, rng.normal(size=(1, 5)), plan, {0: rng.normal(size=7), 1: rng.normal(size=6)})
    v = rng.normal(size=7)
    e = rng.normal(size=3)
    lhs = e @ logit_jvp(tanh_net, trace, 0, v)[0]
    rhs = vector_jacobian_product(tanh_net, trace, 0, e)[0] @ v
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_effective_jacobian_of_linear_net():
    net = identity_net([4, 5, 6, 3], seed=14)
    _, trace = forward(net, np.ones((1, 4)))
    np.testing.assert_allclose(effective_jacobian(net, trace, 0), net.weights[2] @ net.weights[1], rtol=1e-12, atol=1e-12)


#####################################
# Optimizer
#####################################


def scalar_net(w=1.0):
    return Network([1, 1], [np.array([[w]])], [np.zeros(1)], [])


def test_lr_schedule_milestones():
    opt = OptimState(base_lr=0.1, milestones=(50, 75), lr_decay=0.1)
    assert lr_at(opt, 0) == pytest.approx(0.1)
    assert lr_at(opt, 49) == pytest.approx(0.1)
    assert lr_at(opt, 60) == pytest.approx(0.01)
    assert lr_at(opt, 80) == pytest.approx(0.001)


def test_plain_sgd_step():
    net = scalar_net(1.0)
    opt = OptimState.for_network(net, base_lr=0.1, momentum=0.0, weight_decay=0.0)
    grads = Gradients({"W0": np.array([[2.0]]), "b0": np.array([-1.0])})
    sgd_step(net, grads, opt)
    assert net.weights[0][0, 0] == pytest.approx(0.8)
    assert net.biases[0][0] == pytest.approx(0.1)
    assert opt.step == 1


def test_momentum_accumulates():
    net = scalar_net(1.0)
    opt = OptimState.for_network(net, base_lr=0.1, momentum=0.9, weight_decay=0.0)
    grads = Gradients({"W0": np.array([[1.0]]), "b0": np.zeros(1)})
    sgd_step(net, grads, opt)
    sgd_step(net, grads, opt)
    assert net.weights[0][0, 0] == pytest.approx(1.0 - 0.1 - 0.19)


def test_weight_decay_shrinks_without_gradient():
    net = scalar_net(2.0)
    opt = OptimState.for_network(net, base_lr=0.1, momentum=0.0, weight_decay=5e-4)
    sgd_step(net, Gradients.zeros_like(net), opt)
    assert net.weights[0][0, 0] == pytest.approx(2.0 * (1 - 0.1 * 5e-4))


def test_non_finite_gradient_is_reported():
    net = scalar_net()
    opt = OptimState.for_network(net)
    grads = Gradients({"W0": np.array([[np.nan]]), "b0": np.zeros(1)})
    with pytest.raises(NonFiniteError, match="W0"):
        sgd_step(net, grads, opt)
    assert net.weights[0][0, 0] == 1.0


def test_optimizer_record_round_trip():
    net = scalar_net()
    opt = OptimState.for_network(net, base_lr=0.05, milestones=(3, 7))
    sgd_step(net, Gradients({"W0": np.array([[1.0]]), "b0": np.ones(1)}), opt)
    restored = OptimState.from_record(opt.to_record())
    assert restored.milestones == (3, 7)
    assert restored.step == opt.step
    np.testing.assert_array_equal(restored.buffers["W0"], opt.buffers["W0"])


@pytest.mark.parametrize("hyper", [{"base_lr": 0.0}, {"momentum": 1.0}, {"weight_decay": -1.0}])
def test_optimizer_rejects_bad_hyperparameters(hyper):
    with pytest.raises(ConfigError):
        OptimState(**hyper)
