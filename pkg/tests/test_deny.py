"""Tests for deny losses, the total objective and protocol evaluation."""

import numpy as np
import pytest

from spankey.data import Dataset
from spankey.deny import (
    DenyConfig,
    EvalReport,
    KeyDraw,
    cross_entropy,
    entropy,
    evaluate,
    loss_A,
    loss_A_soft,
    loss_AC,
    loss_B,
    loss_B_aux,
    loss_C,
    loss_cplus,
    three_protocol_table,
    total_loss,
)
from spankey.errors import ConfigError, HeadKindError, InvalidDistributionError
from spankey.injection import InjectionPlan
from spankey.keyspace import build_keyspace
from spankey.nn_core import forward, init_network


def numeric_grad(fn, z, eps=1e-6):
    grad = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        old = z[idx]
        z[idx] = old + eps
        up = fn(z)
        z[idx] = old - eps
        down = fn(z)
        z[idx] = old
        grad[idx] = (up - down) / (2 * eps)
    return grad


@pytest.fixture
def logits():
    return np.random.default_rng(21).normal(size=(4, 5))


@pytest.fixture
def paired():
    rng = np.random.default_rng(22)
    return rng.normal(size=(4, 5)), rng.normal(size=(4, 5)), np.array([0, 3, 1, 4])


#####################################
# Entropy and softmax losses
#####################################


def test_entropy_examples():
    assert entropy(np.array([0.5, 0.5])) == pytest.approx(np.log(2))
    assert entropy(np.array([1.0, 0.0])) == 0.0
    assert entropy(np.full(10, 0.1)) == pytest.approx(np.log(10))


def test_entropy_rejects_non_distributions():
    with pytest.raises(InvalidDistributionError):
        entropy(np.array([0.7, 0.7]))
    with pytest.raises(InvalidDistributionError):
        entropy(np.array([1.2, -0.2]))


def test_cross_entropy_gradient(logits):
    y = np.array([0, 1, 2, 4])
    grad = cross_entropy(logits, y).grad
    np.testing.assert_allclose(grad, numeric_grad(lambda z: cross_entropy(z, y).value, logits), atol=1e-8)


def test_loss_A_gradient(logits):
    np.testing.assert_allclose(loss_A(logits).grad, numeric_grad(lambda z: loss_A(z).value, logits), atol=1e-8)


def test_loss_A_is_minimal_at_uniform():
    assert loss_A(np.zeros((3, 4))).value == pytest.approx(-np.log(4))


def test_loss_A_is_stationary_at_uniform():
    np.testing.assert_allclose(loss_A(np.zeros((3, 4))).grad, 0.0, atol=1e-15)
    np.testing.assert_allclose(loss_A(np.full((2, 5), 3.7)).grad, 0.0, atol=1e-15)


def test_loss_A_soft_gradient_and_dead_zone(logits):
    gap = 0.05
    np.testing.assert_allclose(
        loss_A_soft(logits, gap).grad, numeric_grad(lambda z: loss_A_soft(z, gap).value, logits), atol=1e-8
    )
    flat = loss_A_soft(np.zeros((2, 5)), gap)
    assert flat.value == 0.0
    assert not np.any(flat.grad)


def test_loss_B_targets_last_logit(logits):
    lv = loss_B(logits)
    assert lv.value == pytest.approx(cross_entropy(logits, np.full(4, 4)).value)
    np.testing.assert_allclose(lv.grad, numeric_grad(lambda z: loss_B(z).value, logits), atol=1e-8)


def test_loss_B_aux_gradients():
    r_inv = np.array([0.3, -1.0, 2.0])
    r_ok = np.array([-0.5, 1.5])
    _, g_inv, g_ok = loss_B_aux(r_inv, r_ok)
    np.testing.assert_allclose(g_inv, numeric_grad(lambda r: loss_B_aux(r, r_ok)[0], r_inv.copy()), atol=1e-8)
    np.testing.assert_allclose(g_ok, numeric_grad(lambda r: loss_B_aux(r_inv, r)[0], r_ok.copy()), atol=1e-8)


@pytest.mark.parametrize("fn", [loss_C, loss_cplus])
def test_pair_loss_gradients(paired, fn):
    z_ok, z_w, y = paired
    pv = fn(z_ok, z_w, y, 2.0)
    np.testing.assert_allclose(pv.grad_ok, numeric_grad(lambda z: fn(z, z_w, y, 2.0).value, z_ok), atol=1e-8)
    np.testing.assert_allclose(pv.grad_wrong, numeric_grad(lambda z: fn(z_ok, z, y, 2.0).value, z_w), atol=1e-8)


def test_loss_C_is_zero_beyond_margin():
    z_ok = np.array([[5.0, 0.0]])
    z_w = np.array([[0.0, 0.0]])
    pv = loss_C(z_ok, z_w, np.array([0]), 1.0)
    assert pv.value == 0.0
    assert not np.any(pv.grad_ok)


def test_loss_cplus_penalizes_true_class_winning_under_wrong_key():
    z_ok = np.array([[5.0, 0.0, 0.0]])
    z_w = np.array([[3.0, 0.0, 1.0]])
    pv = loss_cplus(z_ok, z_w, np.array([0]), 1.0)
    # C part is inactive; rival is class 2 and trails the true class by 2
    assert pv.value == pytest.approx(3.0)
    assert pv.grad_wrong[0, 0] == pytest.approx(1.0)
    assert pv.grad_wrong[0, 2] == pytest.approx(-1.0)


def test_loss_AC_halves_each_part(paired):
    z_ok, z_w, y = paired
    value, g_inv, g_ok, g_w = loss_AC(z_w, z_ok, z_w, y, 1.5, 0.1)
    expected = 0.5 * loss_A_soft(z_w, 0.1).value + 0.5 * loss_C(z_ok, z_w, y, 1.5).value
    assert value == pytest.approx(expected)
    np.testing.assert_allclose(g_ok, 0.5 * loss_C(z_ok, z_w, y, 1.5).grad_ok)


#####################################
# DenyConfig
#####################################


def test_deny_config_validation():
    with pytest.raises(ConfigError):
        DenyConfig(mode="D")
    with pytest.raises(ConfigError):
        DenyConfig(deny_on=("random",))
    with pytest.raises(ConfigError):
        DenyConfig(mode="A", lam=0.0).validate()
    with pytest.raises(ConfigError):
        DenyConfig(mode="C", margin=0.0).validate()
    DenyConfig(mode="none", lam=0.0).validate()


def test_warmup_ramp():
    cfg = DenyConfig(mode="A", lam=0.4, warmup_epochs=4)
    assert cfg.weight_at(0) == 0.0
    assert cfg.weight_at(2) == pytest.approx(0.2)
    assert cfg.weight_at(10) == pytest.approx(0.4)
    assert DenyConfig(mode="none", lam=1.0).weight_at(5) == 0.0


#####################################
# Total objective
#####################################


@pytest.fixture
def batch(rng):
    return rng.normal(size=(6, 5)), np.array([0, 1, 2, 0, 1, 2])


@pytest.fixture
def two_site_plan():
    return InjectionPlan(sites=(0, 1), kind="add", gamma=1.0)


def test_zero_lambda_equals_cross_entropy(relu_net, site_keyspace, batch, two_site_plan):
    draw = KeyDraw(site_keyspace.sample_correct_keys(np.random.default_rng(0)), site_keyspace.sample_wrong_keys(np.random.default_rng(1)))
    breakdown, _ = total_loss(batch, relu_net, two_site_plan, site_keyspace, DenyConfig(mode="A", lam=0.0), 0, draw=draw)
    baseline, _ = total_loss(batch, relu_net, two_site_plan, site_keyspace, DenyConfig(), 0, draw=draw)
    assert breakdown.total == baseline.total
    assert breakdown.total == breakdown.ce


def test_draw_does_not_depend_on_lambda(relu_net, site_keyspace, batch, two_site_plan):
    rng_a, rng_b = np.random.default_rng(5), np.random.default_rng(5)
    total_loss(batch, relu_net, two_site_plan, site_keyspace, DenyConfig(), 0, rng=rng_a)
    total_loss(batch, relu_net, two_site_plan, site_keyspace, DenyConfig(mode="A", lam=0.3), 0, rng=rng_b)
    assert rng_a.integers(1 << 30) == rng_b.integers(1 << 30)


def test_deny_term_is_linear_in_lambda(relu_net, site_keyspace, batch, two_site_plan):
    rng = np.random.default_rng(12)
    draw = KeyDraw(site_keyspace.sample_correct_keys(rng), site_keyspace.sample_wrong_keys(rng))
    base, _ = total_loss(batch, relu_net, two_site_plan, site_keyspace, DenyConfig(mode="A", lam=0.0), 0, draw=draw)
    slopes = []
    for lam in (0.1, 0.4, 2.5):
        breakdown, _ = total_loss(batch, relu_net, two_site_plan, site_keyspace, DenyConfig(mode="A", lam=lam), 0, draw=draw)
        slopes.append((breakdown.total - base.total) / lam)
    assert slopes[0] != 0.0
    assert slopes[1] == pytest.approx(slopes[0], rel=1e-10)
    assert slopes[2] == pytest.approx(slopes[0], rel=1e-10)


def test_head_requirements(relu_net, site_keyspace, batch, two_site_plan):
    with pytest.raises(HeadKindError):
        total_loss(batch, relu_net, two_site_plan, site_keyspace, DenyConfig(mode="B", lam=0.1), 0, rng=np.random.default_rng(0))
    with pytest.raises(HeadKindError):
        total_loss(batch, relu_net, two_site_plan, site_keyspace, DenyConfig(mode="B_aux", lam=0.1), 0, rng=np.random.default_rng(0))


@pytest.mark.parametrize("mode,head", [("B", "reject_C_plus_1"), ("B_aux", "aux_reject"), ("AC", "plain_C")])
def test_total_loss_gradient(mode, head):
    net = init_network([5, 7, 6, 4 if head == "reject_C_plus_1" else 3], "tanh", head, seed=31)
    keyspace = build_keyspace({0: 7, 1: 6}, 2, seed=32)
    plan = InjectionPlan(sites=(0, 1), kind="mul", gamma=0.5)
    cfg = DenyConfig(mode=mode, lam=0.7, deny_on=("wrong_key", "no_key"), margin=2.0, entropy_gap=0.05)
    rng = np.random.default_rng(33)
    batch = (rng.normal(size=(5, 5)), np.array([0, 1, 2, 1, 0]))
    draw = KeyDraw(keyspace.sample_correct_keys(rng), keyspace.sample_wrong_keys(rng))
    _, grads = total_loss(batch, net, plan, keyspace, cfg, 3, draw=draw)
    eps = 1e-6
    for name, value in net.parameters().items():
        idx = (0,) * value.ndim
        old = value[idx]
        value[idx] = old + eps
        up = total_loss(batch, net, plan, keyspace, cfg, 3, draw=draw)[0].total
        value[idx] = old - eps
        down = total_loss(batch, net, plan, keyspace, cfg, 3, draw=draw)[0].total
        value[idx] = old
        assert grads.params[name][idx] == pytest.approx((up - down) / (2 * eps), rel=1e-5, abs=1e-8)


#####################################
# Evaluation
#####################################


@pytest.fixture
def eval_data(rng):
    x = rng.normal(size=(70, 5))
    return Dataset(x, np.arange(70) % 3, 3, "test")


def test_plain_head_semantic_equals_top1(relu_net, site_keyspace, eval_data, two_site_plan):
    report = evaluate(relu_net, two_site_plan, site_keyspace, eval_data, "wrong", seed=4, batch_size=16)
    assert report.semantic_acc == report.top1
    assert report.reject_mass == 0.0
    assert report.n == 70
    assert 0.0 <= report.mean_entropy <= np.log(3) + 1e-12


def test_evaluation_is_worker_independent(relu_net, site_keyspace, eval_data, two_site_plan):
    one = evaluate(relu_net, two_site_plan, site_keyspace, eval_data, "correct", seed=9, batch_size=16, workers=1)
    many = evaluate(relu_net, two_site_plan, site_keyspace, eval_data, "correct", seed=9, batch_size=16, workers=4)
    assert one == many


def test_dominant_reject_logit_rejects_everything(site_keyspace, eval_data, two_site_plan):
    net = init_network([5, 7, 6, 4], "relu", "reject_C_plus_1", seed=0)
    net.weights[-1][3] = 0.0
    net.biases[-1][3] = 1e6
    report = evaluate(net, two_site_plan, site_keyspace, eval_data, "no_key", seed=0, batch_size=32)
    assert report.reject_mass == 1.0
    assert report.semantic_acc == 0.0


def test_evaluation_ignores_keys_for_sites_outside_the_plan(relu_net, site_keyspace, eval_data):
    plan = InjectionPlan(sites=(0,), kind="add", gamma=1.0)
    for protocol in ("correct", "wrong", "no_key"):
        report = evaluate(relu_net, plan, site_keyspace, eval_data, protocol, seed=3, batch_size=16)
        assert report.n == 70


def test_plan_subset_draws_same_keys_as_full_keyspace(site_keyspace):
    full = site_keyspace.sample("correct", np.random.default_rng(8))
    subset = site_keyspace.sample("correct", np.random.default_rng(8), sites=(0,))
    assert list(subset) == [0]
    np.testing.assert_array_equal(subset[0].values, full[0].values)


def test_wrong_key_margin_drift_has_zero_mean():
    net = init_network([5, 7, 6, 3], "identity", "plain_C", seed=40)
    keyspace = build_keyspace({0: 7}, 2, seed=41)
    plan = InjectionPlan(sites=(0,), kind="add", gamma=0.8)
    x = np.random.default_rng(42).normal(size=5)
    y, c = 0, 1
    base, _ = forward(net, x, plan, None)
    rng = np.random.default_rng(43)
    n = 10_000
    keys = np.stack([keyspace.sample_wrong_keys(rng)[0].values for _ in range(n)])
    shifted, _ = forward(net, np.tile(x, (n, 1)), plan, {0: keys})
    drift = (shifted[:, y] - shifted[:, c]) - (base[y] - base[c])
    se = drift.std(ddof=1) / np.sqrt(n)
    assert se > 0
    assert abs(drift.mean()) < 3 * se


def test_max_batches_limits_rows(relu_net, site_keyspace, eval_data, two_site_plan):
    report = evaluate(relu_net, two_site_plan, site_keyspace, eval_data, "no_key", seed=0, batch_size=16, max_batches=2)
    assert report.n == 32


def test_unknown_protocol(relu_net, site_keyspace, eval_data, two_site_plan):
    with pytest.raises(ConfigError):
        evaluate(relu_net, two_site_plan, site_keyspace, eval_data, "random", seed=0)


def test_three_protocol_table():
    reports = [
        EvalReport(p, acc, acc, 0.0, 0.1, 0.0, 10, split=split)
        for split in ("train", "test")
        for p, acc in (("no_key", 0.3), ("correct", 0.9), ("wrong", 0.1))
    ]
    table = three_protocol_table(reports, 5)
    assert list(table.columns) == ["split", "no_key", "correct", "wrong", "random"]
    assert len(table) == 2
    assert table["correct"].tolist() == [0.9, 0.9]
    assert table["random"].tolist() == [0.2, 0.2]
