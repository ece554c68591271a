"""
nn_core.py - a dense feed-forward network with exact gradients.

The network is an MLP in float64. Hidden layers may receive a key through
an injector (see spankey.injection); the forward pass records everything
needed to run reverse mode (backward, vector-Jacobian products) and
forward mode (Jacobian-vector products) at the same linearization point.

Conventions:
- Batches are row-major: inputs have shape (n, d), logits (n, out).
- Weights have shape (out, in); a layer computes a @ W.T + b.
- Injection sites are hidden-layer indices 0..depth-2.
- ReLU's derivative at exactly 0 is 0.
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

# Import external packages
import numpy as np

# Import functions from local modules
from spankey.errors import (
    ConfigError,
    NonFiniteError,
    ShapeMismatchError,
    SiteIndexError,
)
from spankey.injection import InjectionPlan, inject, inject_backward, inject_local_gain
from utils.utils_logger import logger

#####################################
# Default Configurations
#####################################

ACTIVATIONS = ("relu", "tanh", "identity")
HEAD_KINDS = ("plain_C", "reject_C_plus_1", "aux_reject")

DEFAULT_LR = 0.1
DEFAULT_MOMENTUM = 0.9
DEFAULT_WEIGHT_DECAY = 5e-4
DEFAULT_MILESTONES = (50, 75)
DEFAULT_LR_DECAY = 0.1

CHECKPOINT_NETWORK_VERSION = 1


#####################################
# Activations
#####################################


def activate(kind: str, z: np.ndarray) -> np.ndarray:
    """Apply the named nonlinearity."""
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "identity":
        return z
    raise ConfigError(f"unknown activation {kind!r}")


def activation_grad(kind: str, z: np.ndarray) -> np.ndarray:
    """Elementwise derivative of the nonlinearity at z (ReLU'(0) = 0)."""
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    if kind == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if kind == "identity":
        return np.ones_like(z)
    raise ConfigError(f"unknown activation {kind!r}")


#####################################
# Network
#####################################


@dataclass
class Network:
    """
    Dense network with an optional reject logit or auxiliary reject head.

    head_kind:
        plain_C           - C semantic logits.
        reject_C_plus_1   - C semantic logits followed by one reject logit.
        aux_reject        - C semantic logits plus a scalar reject logit
                            r = aux_weight . h_L + aux_bias.
    """

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]
    head_kind: str = "plain_C"
    aux_weight: Optional[np.ndarray] = None
    aux_bias: Optional[np.ndarray] = None

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        self.validate()

    def validate(self) -> None:
        """Check shapes, head constraints and finiteness."""
        dims = self.layer_dims
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise ConfigError(f"layer_dims must hold >= 2 positive sizes, got {dims}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ShapeMismatchError("one weight matrix and one bias vector per layer are required")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i + 1], dims[i]):
                raise ShapeMismatchError(f"W{i} has shape {w.shape}, expected {(dims[i + 1], dims[i])}")
            if b.shape != (dims[i + 1],):
                raise ShapeMismatchError(f"b{i} has shape {b.shape}, expected {(dims[i + 1],)}")
        if len(self.activations) != len(dims) - 2:
            raise ConfigError(f"need one activation per hidden layer ({len(dims) - 2}), got {len(self.activations)}")
        for kind in self.activations:
            if kind not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {kind!r}")
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")
        if self.head_kind == "reject_C_plus_1" and dims[-1] < 3:
            raise ConfigError("a reject head needs at least two semantic classes plus the reject logit")
        if self.head_kind == "aux_reject":
            if self.aux_weight is None or self.aux_bias is None:
                raise ConfigError("aux_reject head requires aux_weight and aux_bias")
            if self.aux_weight.shape != (dims[-2],) or self.aux_bias.shape != (1,):
                raise ShapeMismatchError("aux head must map the penultimate width to one logit")
        elif self.aux_weight is not None or self.aux_bias is not None:
            raise ConfigError(f"aux head parameters given for head_kind {self.head_kind!r}")
        for name, value in self.parameters().items():
            if not np.all(np.isfinite(value)):
                raise NonFiniteError(f"parameter {name} holds non-finite values")

    @property
    def depth(self) -> int:
        """Number of weight layers."""
        return len(self.weights)

    @property
    def num_hidden(self) -> int:
        return self.depth - 1

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def num_classes(self) -> int:
        """Semantic class count C."""
        if self.head_kind == "reject_C_plus_1":
            return self.output_dim - 1
        return self.output_dim

    @property
    def reject_index(self) -> Optional[int]:
        return self.num_classes if self.head_kind == "reject_C_plus_1" else None

    def site_width(self, site: int) -> int:
        """Width of hidden layer `site`."""
        if not 0 <= site < self.num_hidden:
            raise SiteIndexError(f"site {site} outside hidden layers 0..{self.num_hidden - 1}")
        return self.layer_dims[site + 1]

    def parameters(self) -> dict[str, np.ndarray]:
        """Parameters by name (views, not copies)."""
        params: dict[str, np.ndarray] = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"W{i}"] = w
            params[f"b{i}"] = b
        if self.aux_weight is not None:
            params["aux_w"] = self.aux_weight
            params["aux_b"] = self.aux_bias
        return params

    def copy(self) -> "Network":
        return Network(
            layer_dims=list(self.layer_dims),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activations=list(self.activations),
            head_kind=self.head_kind,
            aux_weight=None if self.aux_weight is None else self.aux_weight.copy(),
            aux_bias=None if self.aux_bias is None else self.aux_bias.copy(),
        )

    def to_record(self) -> dict[str, Any]:
        """JSON-ready record with row-major flattened parameters."""
        return {
            "version": CHECKPOINT_NETWORK_VERSION,
            "layer_dims": list(self.layer_dims),
            "activations": list(self.activations),
            "head_kind": self.head_kind,
            "params": {name: value.ravel().tolist() for name, value in self.parameters().items()},
        }

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> "Network":
        if record.get("version") != CHECKPOINT_NETWORK_VERSION:
            raise ConfigError(f"unsupported network record version {record.get('version')}")
        dims = [int(d) for d in record["layer_dims"]]
        params = record["params"]
        weights = [
            np.asarray(params[f"W{i}"], dtype=np.float64).reshape(dims[i + 1], dims[i])
            for i in range(len(dims) - 1)
        ]
        biases = [np.asarray(params[f"b{i}"], dtype=np.float64) for i in range(len(dims) - 1)]
        aux_w = aux_b = None
        if "aux_w" in params:
            aux_w = np.asarray(params["aux_w"], dtype=np.float64)
            aux_b = np.asarray(params["aux_b"], dtype=np.float64)
        return cls(dims, weights, biases, list(record["activations"]), record["head_kind"], aux_w, aux_b)


def build_layer_dims(input_dim: int, hidden: list[int], num_classes: int, head_kind: str) -> list[int]:
    """Layer sizes for a classifier over `num_classes` semantic classes."""
    out = num_classes + 1 if head_kind == "reject_C_plus_1" else num_classes
    return [int(input_dim), *[int(h) for h in hidden], out]


def init_network(
    layer_dims: list[int],
    activation: str | list[str] = "relu",
    head_kind: str = "plain_C",
    seed: int = 0,
) -> Network:
    """
    Seeded Kaiming-uniform initialization (fan-in scaling).

    Weights are drawn from U(-bound, bound) with bound = gain * sqrt(3 / fan_in),
    gain sqrt(2) for ReLU layers and 1 otherwise. Biases are drawn from
    U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    """
    rng = np.random.default_rng(seed)
    n_hidden = len(layer_dims) - 2
    # One activation name per hidden layer
    activations = [activation] * n_hidden if isinstance(activation, str) else list(activation)
    weights, biases = [], []
    for i in range(len(layer_dims) - 1):
        fan_in, fan_out = layer_dims[i], layer_dims[i + 1]
        gain = np.sqrt(2.0) if i < n_hidden and activations[i] == "relu" else 1.0
        bound = gain * np.sqrt(3.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        b_bound = 1.0 / np.sqrt(fan_in)
        biases.append(rng.uniform(-b_bound, b_bound, size=fan_out))
    # The aux head is one extra logit read from the last hidden layer
    aux_w = aux_b = None
    if head_kind == "aux_reject":
        fan_in = layer_dims[-2]
        bound = np.sqrt(3.0 / fan_in)
        aux_w = rng.uniform(-bound, bound, size=fan_in)
        aux_b = np.zeros(1)
    net = Network(list(layer_dims), weights, biases, activations, head_kind, aux_w, aux_b)
    logger.debug(f"Initialized network {layer_dims} head={head_kind} seed={seed}")
    return net


#####################################
# Forward Pass
#####################################


@dataclass
class ForwardTrace:
    """
    Everything the forward pass computed.

    pre[i] is the affine output of layer i (pre[-1] are the logits);
    act_inputs[i] is what entered hidden layer i's nonlinearity;
    post[i] is hidden layer i's final output (after any injection);
    injector_inputs[s] is the tensor the key at site s was applied to.
    """

    inputs: np.ndarray
    pre: list[np.ndarray]
    act_inputs: list[np.ndarray]
    post: list[np.ndarray]
    injector_inputs: dict[int, np.ndarray]
    keys: dict[int, np.ndarray]
    plan: Optional[InjectionPlan]
    logits: np.ndarray
    aux_logit: Optional[np.ndarray] = None

    @property
    def penultimate(self) -> np.ndarray:
        """h_L, the input to the readout layer."""
        return self.post[-1] if self.post else self.inputs

    @property
    def injected_sites(self) -> list[int]:
        return sorted(self.keys)

    def __len__(self) -> int:
        return len(self.pre)


def _key_values(key: Any) -> Optional[np.ndarray]:
    """Accept a DynamicKey, a raw array or None."""
    if key is None:
        return None
    values = getattr(key, "values", key)
    if values is None:
        return None
    return np.asarray(values, dtype=np.float64)


def _resolve_keys(
    net: Network,
    plan: Optional[InjectionPlan],
    keys: Optional[Mapping[int, Any]],
) -> dict[int, np.ndarray]:
    if plan is None or not keys:
        return {}
    for site in plan.sites:
        net.site_width(site)
    resolved = {}
    for site, key in keys.items():
        if site not in plan.sites:
            msg = f"key supplied for site {site} but the plan injects at {plan.sites}"
            logger.error(msg)
            raise SiteIndexError(msg)
        values = _key_values(key)
        if values is None:
            continue
        width = net.site_width(site)
        if values.shape[-1] != width:
            msg = f"key width {values.shape[-1]} does not match site {site} width {width}"
            logger.error(msg)
            raise ShapeMismatchError(msg)
        resolved[site] = values
    return resolved


def forward(
    net: Network,
    x: np.ndarray,
    plan: Optional[InjectionPlan] = None,
    keys: Optional[Mapping[int, Any]] = None,
) -> tuple[np.ndarray, ForwardTrace]:
    """
    Run the network, injecting keys at the planned sites.

    Args:
        net: the network.
        x: one input vector (d,) or a batch (n, d).
        plan: where and how to inject; None for a plain forward.
        keys: site -> key (DynamicKey, array of width d_site, or None).
            Missing or None keys skip injection at that site, so an empty
            mapping is the no-key protocol.

    Returns:
        (logits, trace). Logits are (out,) for a single vector input.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    inputs = x[None, :] if single else x
    if inputs.shape[1] != net.input_dim:
        msg = f"input width {inputs.shape[1]} does not match network input {net.input_dim}"
        logger.error(msg)
        raise ShapeMismatchError(msg)
    # Only sites in the plan may carry keys
    active = _resolve_keys(net, plan, keys)

    pre, act_inputs, post = [], [], []
    injector_inputs: dict[int, np.ndarray] = {}
    a = inputs
    for i in range(net.depth):
        z = a @ net.weights[i].T + net.biases[i]
        pre.append(z)
        if i == net.depth - 1:
            break
        u = z
        # Inject before or after the activation, per plan.point
        if i in active and plan.point == "pre":
            injector_inputs[i] = z
            u = inject(plan.kind, z, active[i], plan.gamma)
        act_inputs.append(u)
        h = activate(net.activations[i], u)
        if i in active and plan.point == "post":
            injector_inputs[i] = h
            h = inject(plan.kind, h, active[i], plan.gamma)
        post.append(h)
        a = h

    # Linear head; the aux reject logit reads the last hidden layer
    logits = pre[-1]
    aux = None
    if net.head_kind == "aux_reject":
        aux = a @ net.aux_weight + net.aux_bias[0]
    trace = ForwardTrace(inputs, pre, act_inputs, post, injector_inputs, active, plan, logits, aux)
    return (logits[0] if single else logits), trace


def replay_trace(net: Network, trace: ForwardTrace) -> np.ndarray:
    """Recompute logits from a trace's stored inputs and keys."""
    logits, _ = forward(net, trace.inputs, trace.plan, trace.keys)
    return logits


#####################################
# Reverse Mode
#####################################


@dataclass
class Gradients:
    """Parameter gradients plus gradients at injected keys and inputs."""

    params: dict[str, np.ndarray]
    keys: dict[int, np.ndarray] = field(default_factory=dict)
    inputs: Optional[np.ndarray] = None

    def add_(self, other: "Gradients", weight: float = 1.0) -> "Gradients":
        """Accumulate `weight * other` into self (parameters only)."""
        for name, g in other.params.items():
            if name in self.params:
                self.params[name] = self.params[name] + weight * g
            else:
                self.params[name] = weight * g
        return self

    @classmethod
    def zeros_like(cls, net: Network) -> "Gradients":
        return cls({name: np.zeros_like(p) for name, p in net.parameters().items()})


def _check_trace(net: Network, trace: ForwardTrace) -> None:
    widths_ok = len(trace.pre) == net.depth and all(
        z.shape[1] == net.layer_dims[i + 1] for i, z in enumerate(trace.pre)
    )
    if not widths_ok or trace.inputs.shape[1] != net.input_dim:
        msg = "trace does not match this network (stale trace)"
        logger.error(msg)
        raise ShapeMismatchError(msg)


def backward(
    net: Network,
    trace: ForwardTrace,
    upstream_logit_grad: np.ndarray,
    upstream_aux_grad: Optional[np.ndarray] = None,
) -> Gradients:
    """
    Exact reverse mode through the traced forward pass.

    Args:
        net: the network that produced the trace.
        trace: output of forward().
        upstream_logit_grad: dLoss/dlogits, shape of the traced logits.
        upstream_aux_grad: dLoss/dr for the aux reject logit, shape (n,).

    Returns:
        Gradients for every parameter, every injected key and the inputs.
    """
    # Refuse a trace from another network or an edited one
    _check_trace(net, trace)
    g = np.asarray(upstream_logit_grad, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != trace.logits.shape:
        msg = f"upstream gradient shape {g.shape} does not match logits {trace.logits.shape}"
        logger.error(msg)
        raise ShapeMismatchError(msg)

    params: dict[str, np.ndarray] = {}
    key_grads: dict[int, np.ndarray] = {}
    plan = trace.plan
    last = net.depth - 1
    a_prev = trace.post[last - 1] if last > 0 else trace.inputs

    # --- Output layer (and the aux reject logit, if any) ---
    params[f"W{last}"] = g.T @ a_prev
    params[f"b{last}"] = g.sum(axis=0)
    da = g @ net.weights[last]
    if net.head_kind == "aux_reject":
        gr = np.zeros(g.shape[0]) if upstream_aux_grad is None else np.asarray(upstream_aux_grad, dtype=np.float64)
        params["aux_w"] = a_prev.T @ gr
        params["aux_b"] = np.array([gr.sum()])
        da = da + np.outer(gr, net.aux_weight)

    # --- Hidden layers, last to first ---
    # A post-activation key is undone before the activation, a pre-activation key after it
    for i in reversed(range(last)):
        key = trace.keys.get(i)
        if key is not None and plan.point == "post":
            da, key_grads[i] = inject_backward(plan.kind, trace.injector_inputs[i], key, plan.gamma, da)
        gz = da * activation_grad(net.activations[i], trace.act_inputs[i])
        if key is not None and plan.point == "pre":
            gz, key_grads[i] = inject_backward(plan.kind, trace.injector_inputs[i], key, plan.gamma, gz)
        a_prev = trace.post[i - 1] if i > 0 else trace.inputs
        params[f"W{i}"] = gz.T @ a_prev
        params[f"b{i}"] = gz.sum(axis=0)
        da = gz @ net.weights[i]

    return Gradients(params, key_grads, da)


def vector_jacobian_product(
    net: Network,
    trace: ForwardTrace,
    site: int,
    logit_cotangent: np.ndarray,
) -> np.ndarray:
    """
    Pull a logit cotangent back to the injected tensor at `site`.

    Gates are frozen at the traced activation pattern. With cotangent
    e_y - e_c this returns u_{y,c} = J_site^T (w_y - w_c) per input row.
    """
    _check_trace(net, trace)
    net.site_width(site)
    point = trace.plan.point if trace.plan is not None else "post"
    cot = np.asarray(logit_cotangent, dtype=np.float64)
    cot = np.broadcast_to(cot, trace.logits.shape)
    da = cot @ net.weights[-1]
    for i in reversed(range(site, net.depth - 1)):
        # Post injection: the site tensor is this layer's output
        if i == site and point == "post":
            return da
        key = trace.keys.get(i)
        if key is not None and trace.plan.point == "post":
            da = da * inject_local_gain(trace.plan.kind, key, trace.plan.gamma)
        gz = da * activation_grad(net.activations[i], trace.act_inputs[i])
        if i == site:
            return gz
        if key is not None and trace.plan.point == "pre":
            gz = gz * inject_local_gain(trace.plan.kind, key, trace.plan.gamma)
        da = gz @ net.weights[i]
    return da


#####################################
# Forward Mode
#####################################


def jacobian_vector_product(
    net: Network,
    trace: ForwardTrace,
    site: int,
    direction: np.ndarray,
) -> np.ndarray:
    """
    Exact directional derivative of h_L along `direction` at `site`.

    The direction perturbs the injected tensor at the site (h' for post
    injection, the pre-activation for pre injection). ReLU gates and
    downstream key gains are frozen from the trace.

    Returns:
        Delta h_L with one row per traced input.
    """
    _check_trace(net, trace)
    net.site_width(site)
    plan = trace.plan
    point = plan.point if plan is not None else "post"
    n = trace.inputs.shape[0]
    dv = np.broadcast_to(np.asarray(direction, dtype=np.float64), (n, net.site_width(site))).copy()
    if point == "pre":
        dv = dv * activation_grad(net.activations[site], trace.act_inputs[site])
    # Push the direction forward through the downstream layers
    for i in range(site + 1, net.depth - 1):
        dz = dv @ net.weights[i].T
        key = trace.keys.get(i)
        if key is not None and plan.point == "pre":
            dz = dz * inject_local_gain(plan.kind, key, plan.gamma)
        dh = dz * activation_grad(net.activations[i], trace.act_inputs[i])
        if key is not None and plan.point == "post":
            dh = dh * inject_local_gain(plan.kind, key, plan.gamma)
        dv = dh
    return dv


def logit_jvp(net: Network, trace: ForwardTrace, site: int, direction: np.ndarray) -> np.ndarray:
    """W_eff applied to `direction`: W . J_site . v."""
    return jacobian_vector_product(net, trace, site, direction) @ net.weights[-1].T


def effective_jacobian(net: Network, trace: ForwardTrace, site: int) -> np.ndarray:
    """
    W_eff = dz / dh'_site for the first traced input, shape (out, d_site).
    """
    # Trace restricted to the first input row
    rows = []
    single = ForwardTrace(
        trace.inputs[:1],
        [z[:1] for z in trace.pre],
        [u[:1] for u in trace.act_inputs],
        [h[:1] for h in trace.post],
        {s: v[:1] for s, v in trace.injector_inputs.items()},
        {s: (k if k.ndim == 1 else k[:1]) for s, k in trace.keys.items()},
        trace.plan,
        trace.logits[:1],
        None if trace.aux_logit is None else trace.aux_logit[:1],
    )
    # One VJP per logit gives one row of W_eff
    for c in range(net.output_dim):
        e = np.zeros(net.output_dim)
        e[c] = 1.0
        rows.append(vector_jacobian_product(net, single, site, e)[0])
    return np.vstack(rows)


#####################################
# Optimizer
#####################################


@dataclass
class OptimState:
    """
    SGD with momentum, weight decay folded into the gradient, and a
    multi-step learning-rate schedule.
    """

    base_lr: float = DEFAULT_LR
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    milestones: tuple[int, ...] = DEFAULT_MILESTONES
    lr_decay: float = DEFAULT_LR_DECAY
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if not self.base_lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.base_lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be >= 0, got {self.weight_decay}")
        if not self.lr_decay > 0:
            raise ConfigError(f"lr decay must be > 0, got {self.lr_decay}")

    @classmethod
    def for_network(cls, net: Network, **hyper) -> "OptimState":
        state = cls(**hyper)
        state.buffers = {name: np.zeros_like(p) for name, p in net.parameters().items()}
        return state

    def to_record(self) -> dict[str, Any]:
        return {
            "base_lr": self.base_lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "milestones": list(self.milestones),
            "lr_decay": self.lr_decay,
            "step": self.step,
            "epoch": self.epoch,
            "buffers": {name: {"shape": list(b.shape), "data": b.ravel().tolist()} for name, b in self.buffers.items()},
        }

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> "OptimState":
        buffers = {
            name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in record["buffers"].items()
        }
        return cls(
            base_lr=record["base_lr"],
            momentum=record["momentum"],
            weight_decay=record["weight_decay"],
            milestones=tuple(record["milestones"]),
            lr_decay=record["lr_decay"],
            buffers=buffers,
            step=record["step"],
            epoch=record["epoch"],
        )


def lr_at(opt: OptimState, epoch: int) -> float:
    """base_lr * decay ** (number of milestones <= epoch)."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    passed = sum(1 for m in opt.milestones if m <= epoch)
    return opt.base_lr * opt.lr_decay**passed


def sgd_step(net: Network, grads: Gradients, opt: OptimState) -> tuple[Network, OptimState]:
    """
    One momentum step, in place:

        v <- mu * v + g + wd * theta
        theta <- theta - lr * v
    """
    params = net.parameters()
    for name, g in grads.params.items():
        # Stop before any parameter is touched
        if not np.all(np.isfinite(g)):
            msg = f"non-finite gradient for parameter {name} at step {opt.step}"
            logger.error(msg)
            raise NonFiniteError(msg)
        if g.shape != params[name].shape:
            raise ShapeMismatchError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
    lr = lr_at(opt, opt.epoch)
    for name, theta in params.items():
        # Parameters without a gradient still decay
        g = grads.params.get(name)
        if g is None:
            g = np.zeros_like(theta)
        buf = opt.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(theta)
        buf = opt.momentum * buf + g + opt.weight_decay * theta
        opt.buffers[name] = buf
        theta -= lr * buf
    opt.step += 1
    return net, opt
