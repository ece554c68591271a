"""
deny.py - training objectives and the three-protocol evaluation.

Every loss returns its value together with the gradient of that value
with respect to the logits it consumed, so total_loss can hand exact
upstream gradients to nn_core.backward.

Objective:
    L = CE(authorized) + lambda * L_deny(invalid paths)

Deny modes:
    A       -E[H(softmax z)]                      (entropy up)
    A_soft  E[(max(0, log C - H - gap))^2]        (entropy gap)
    B       CE toward the reject index C          ((C+1)-way head)
    B_aux   BCE on a scalar reject logit          (aux head)
    C       E[max(0, m - (z_ok_y - z_w_y))]       (true-class hinge)
    cplus   C plus E[max(0, m - (max_{c!=y} z_w_c - z_w_y))]
    AC      1/2 A_soft + 1/2 C

cplus note: the second hinge pushes the best non-true wrong-key logit at
least m above the true one, driving the wrong-key argmax off the true
class. See DESIGN.md for why this sign was chosen.
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, NamedTuple, Optional

# Import external packages
import numpy as np
import pandas as pd
from scipy.special import expit, log_softmax as _log_softmax, softmax as _softmax

# Import functions from local modules
from spankey.errors import ConfigError, HeadKindError, InvalidDistributionError
from spankey.injection import InjectionPlan
from spankey.keyspace import KeySpace, restrict_keys
from spankey.nn_core import Gradients, Network, backward, forward
from utils.utils_logger import logger

#####################################
# Default Configurations
#####################################

DENY_MODES = ("none", "A", "A_soft", "B", "B_aux", "C", "cplus", "AC")
DENY_PATHS = ("wrong_key", "no_key")
PROTOCOLS = ("no_key", "correct", "wrong")

DEFAULT_LAMBDA = 0.1
DEFAULT_MARGIN = 1.0
DEFAULT_ENTROPY_GAP = 0.5


#####################################
# Softmax Helpers
#####################################


class LossValue(NamedTuple):
    """A scalar loss and its gradient with respect to one logit array."""

    value: float
    grad: np.ndarray


class PairLossValue(NamedTuple):
    """A scalar loss over paired forwards and both logit gradients."""

    value: float
    grad_ok: np.ndarray
    grad_wrong: np.ndarray


def softmax(z: np.ndarray) -> np.ndarray:
    return _softmax(np.asarray(z, dtype=np.float64), axis=-1)


def log_softmax(z: np.ndarray) -> np.ndarray:
    return _log_softmax(np.asarray(z, dtype=np.float64), axis=-1)


def entropy(p: np.ndarray) -> float | np.ndarray:
    """
    H(p) = -sum p log p with 0 log 0 = 0.

    Accepts one distribution (C,) or rows (n, C); rows must be on the
    simplex to 1e-9.
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
        raise InvalidDistributionError("entropy needs non-negative entries summing to 1")
    logs = np.log(np.where(p > 0, p, 1.0))
    h = -(p * logs).sum(axis=-1)
    return float(h) if h.ndim == 0 else h


def _entropy_from_logits(z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    logp = log_softmax(z)
    p = np.exp(logp)
    h = -(p * logp).sum(axis=-1)
    return p, logp, h


def cross_entropy(z: np.ndarray, targets: np.ndarray) -> LossValue:
    """Mean softmax cross-entropy of logits (n, K) against integer targets."""
    z = np.asarray(z, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    n = z.shape[0]
    logp = log_softmax(z)
    value = -logp[np.arange(n), targets].mean()
    grad = np.exp(logp)
    grad[np.arange(n), targets] -= 1.0
    return LossValue(float(value), grad / n)


#####################################
# Deny Losses
#####################################


def loss_A(z_invalid: np.ndarray) -> LossValue:
    """Mode A: minus the mean entropy of the invalid softmax."""
    z = np.asarray(z_invalid, dtype=np.float64)
    n = z.shape[0]
    p, logp, h = _entropy_from_logits(z)
    # dH/dz = -p (log p + H)
    grad = p * (logp + h[:, None]) / n
    return LossValue(float(-h.mean()), grad)


def loss_A_soft(z_invalid: np.ndarray, gap: float) -> LossValue:
    """A_soft: squared hinge on entropy falling below log C - gap."""
    z = np.asarray(z_invalid, dtype=np.float64)
    n, c = z.shape
    p, logp, h = _entropy_from_logits(z)
    slack = np.maximum(0.0, np.log(c) - h - gap)
    grad = (2.0 * slack)[:, None] * p * (logp + h[:, None]) / n
    return LossValue(float((slack**2).mean()), grad)


def loss_B(z_invalid: np.ndarray) -> LossValue:
    """Mode B: cross-entropy of the (C+1)-way softmax against the reject index."""
    z = np.asarray(z_invalid, dtype=np.float64)
    reject = np.full(z.shape[0], z.shape[1] - 1)
    return cross_entropy(z, reject)


def loss_B_aux(r_invalid: np.ndarray, r_authorized: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """
    B_aux: binary cross-entropy pushing sigmoid(r) to 1 on invalid forwards
    and to 0 on authorized ones; each side is a mean over its rows.

    Returns:
        (value, grad wrt r_invalid, grad wrt r_authorized)
    """
    r_inv = np.asarray(r_invalid, dtype=np.float64)
    r_ok = np.asarray(r_authorized, dtype=np.float64)
    # softplus(-r) for target 1, softplus(r) for target 0
    value = np.logaddexp(0.0, -r_inv).mean() + np.logaddexp(0.0, r_ok).mean()
    grad_inv = (expit(r_inv) - 1.0) / r_inv.size
    grad_ok = expit(r_ok) / r_ok.size
    return float(value), grad_inv, grad_ok


def loss_C(z_ok: np.ndarray, z_wrong: np.ndarray, y: np.ndarray, margin: float) -> PairLossValue:
    """Mode C: hinge on the true-class logit gap between correct and wrong keys."""
    z_ok = np.asarray(z_ok, dtype=np.float64)
    z_wrong = np.asarray(z_wrong, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = z_ok.shape[0]
    rows = np.arange(n)
    slack = margin - (z_ok[rows, y] - z_wrong[rows, y])
    active = (slack > 0).astype(np.float64)
    grad_ok = np.zeros_like(z_ok)
    grad_wrong = np.zeros_like(z_wrong)
    grad_ok[rows, y] = -active / n
    grad_wrong[rows, y] = active / n
    return PairLossValue(float(np.maximum(0.0, slack).mean()), grad_ok, grad_wrong)


def loss_cplus(z_ok: np.ndarray, z_wrong: np.ndarray, y: np.ndarray, margin: float) -> PairLossValue:
    """cplus: Mode C plus a hinge moving the wrong-key argmax off the true class."""
    base = loss_C(z_ok, z_wrong, y, margin)
    z_wrong = np.asarray(z_wrong, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = z_wrong.shape[0]
    rows = np.arange(n)
    others = z_wrong.copy()
    others[rows, y] = -np.inf
    rival = others.argmax(axis=1)
    slack = margin - (z_wrong[rows, rival] - z_wrong[rows, y])
    active = (slack > 0).astype(np.float64)
    grad_wrong = base.grad_wrong.copy()
    grad_wrong[rows, rival] -= active / n
    grad_wrong[rows, y] += active / n
    value = base.value + float(np.maximum(0.0, slack).mean())
    return PairLossValue(value, base.grad_ok, grad_wrong)


def loss_AC(
    z_invalid: np.ndarray,
    z_ok: np.ndarray,
    z_wrong: np.ndarray,
    y: np.ndarray,
    margin: float,
    gap: float,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """
    AC: 1/2 A_soft(z_invalid) + 1/2 C(z_ok, z_wrong).

    Returns:
        (value, grad wrt z_invalid, grad wrt z_ok, grad wrt z_wrong)
    """
    soft = loss_A_soft(z_invalid, gap)
    hinge = loss_C(z_ok, z_wrong, y, margin)
    value = 0.5 * soft.value + 0.5 * hinge.value
    return value, 0.5 * soft.grad, 0.5 * hinge.grad_ok, 0.5 * hinge.grad_wrong


#####################################
# Deny Configuration
#####################################


@dataclass(frozen=True)
class DenyConfig:
    """Deny objective settings; mode "none" is correct-key-only training."""

    mode: str = "none"
    lam: float = DEFAULT_LAMBDA
    deny_on: tuple[str, ...] = ("wrong_key",)
    margin: float = DEFAULT_MARGIN
    entropy_gap: float = DEFAULT_ENTROPY_GAP
    warmup_epochs: int = 0

    def __post_init__(self):
        object.__setattr__(self, "deny_on", tuple(self.deny_on))
        if self.mode not in DENY_MODES:
            raise ConfigError(f"deny mode must be one of {DENY_MODES}, got {self.mode!r}")
        if not self.deny_on or any(p not in DENY_PATHS for p in self.deny_on):
            raise ConfigError(f"deny_on must be a non-empty subset of {DENY_PATHS}, got {self.deny_on}")
        if self.lam < 0 or not np.isfinite(self.lam):
            raise ConfigError(f"lambda must be finite and >= 0, got {self.lam}")
        if self.warmup_epochs < 0:
            raise ConfigError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")

    def validate(self) -> None:
        """Stricter checks applied to experiment configs."""
        if self.mode != "none" and not self.lam > 0:
            raise ConfigError(f"deny mode {self.mode} needs lambda > 0")
        if self.mode in ("C", "cplus", "AC") and not self.margin > 0:
            raise ConfigError(f"deny mode {self.mode} needs a positive margin")
        if self.mode in ("A_soft", "AC") and not self.entropy_gap > 0:
            raise ConfigError(f"deny mode {self.mode} needs a positive entropy gap")

    def weight_at(self, epoch: int) -> float:
        """lambda scaled by the linear warmup ramp."""
        if self.mode == "none":
            return 0.0
        if self.warmup_epochs > 0:
            return self.lam * min(1.0, epoch / self.warmup_epochs)
        return self.lam


def required_head(mode: str) -> Optional[str]:
    """The head kind a deny mode needs, if any."""
    return {"B": "reject_C_plus_1", "B_aux": "aux_reject"}.get(mode)


def check_head(net: Network, cfg: DenyConfig) -> None:
    needed = required_head(cfg.mode)
    if needed is not None and net.head_kind != needed:
        msg = f"deny mode {cfg.mode} needs head {needed}, network has {net.head_kind}"
        logger.error(msg)
        raise HeadKindError(msg)


#####################################
# Total Objective
#####################################


@dataclass
class KeyDraw:
    """Keys for one training batch: authorized and wrong, per site."""

    correct: dict
    wrong: dict


@dataclass
class LossBreakdown:
    total: float
    ce: float
    deny: float
    deny_weight: float
    parts: dict = field(default_factory=dict)


def _deny_value(
    net: Network,
    cfg: DenyConfig,
    y: np.ndarray,
    z_ok: np.ndarray,
    r_ok: Optional[np.ndarray],
    invalid: dict[str, tuple[np.ndarray, Optional[np.ndarray]]],
) -> tuple[float, np.ndarray, Optional[np.ndarray], dict[str, tuple[np.ndarray, Optional[np.ndarray]]]]:
    """
    Unweighted deny loss averaged over invalid paths.

    Returns:
        (value, grad z_ok, grad r_ok, {path: (grad z_path, grad r_path)})
    """
    n_paths = len(invalid)
    c = net.num_classes
    grad_ok = np.zeros_like(z_ok)
    grad_r_ok = None if r_ok is None else np.zeros_like(r_ok)
    path_grads: dict[str, tuple[np.ndarray, Optional[np.ndarray]]] = {}
    total = 0.0

    if cfg.mode == "B_aux":
        r_inv = np.concatenate([invalid[p][1] for p in invalid])
        value, g_inv, g_ok = loss_B_aux(r_inv, r_ok)
        offset = 0
        for path, (z_p, r_p) in invalid.items():
            path_grads[path] = (np.zeros_like(z_p), g_inv[offset : offset + r_p.size])
            offset += r_p.size
        return value, grad_ok, g_ok, path_grads

    for path, (z_p, r_p) in invalid.items():
        g_path = np.zeros_like(z_p)
        if cfg.mode == "A":
            lv = loss_A(z_p[:, :c])
            g_path[:, :c] = lv.grad
            value = lv.value
        elif cfg.mode == "A_soft":
            lv = loss_A_soft(z_p[:, :c], cfg.entropy_gap)
            g_path[:, :c] = lv.grad
            value = lv.value
        elif cfg.mode == "B":
            lv = loss_B(z_p)
            g_path = lv.grad
            value = lv.value
        elif cfg.mode in ("C", "cplus"):
            fn = loss_C if cfg.mode == "C" else loss_cplus
            pv = fn(z_ok[:, :c], z_p[:, :c], y, cfg.margin)
            grad_ok[:, :c] += pv.grad_ok / n_paths
            g_path[:, :c] = pv.grad_wrong
            value = pv.value
        elif cfg.mode == "AC":
            value, g_inv, g_ok, g_w = loss_AC(z_p[:, :c], z_ok[:, :c], z_p[:, :c], y, cfg.margin, cfg.entropy_gap)
            grad_ok[:, :c] += g_ok / n_paths
            g_path[:, :c] = g_inv + g_w
        else:
            raise ConfigError(f"no deny loss for mode {cfg.mode!r}")
        total += value / n_paths
        path_grads[path] = (g_path / n_paths, None if r_p is None else np.zeros_like(r_p))
    return total, grad_ok, grad_r_ok, path_grads


def total_loss(
    batch: tuple[np.ndarray, np.ndarray],
    net: Network,
    plan: InjectionPlan,
    keyspace: KeySpace,
    cfg: DenyConfig,
    epoch: int,
    rng: Optional[np.random.Generator] = None,
    draw: Optional[KeyDraw] = None,
) -> tuple[LossBreakdown, Gradients]:
    """
    L = CE on the authorized forward + lambda_eff * deny loss.

    A fresh correct key and a fresh wrong key are drawn for the batch
    (both are always drawn so the random stream does not depend on lambda)
    unless `draw` fixes them. lambda_eff follows the warmup ramp.
    Mode "none" is the correct-key-only baseline.

    Returns:
        (loss breakdown, gradients summed over every forward)
    """
    check_head(net, cfg)
    x, y = batch
    if draw is None:
        if rng is None:
            raise ConfigError("total_loss needs an rng or a fixed key draw")
        draw = KeyDraw(
            restrict_keys(keyspace.sample_correct_keys(rng), plan.sites),
            restrict_keys(keyspace.sample_wrong_keys(rng), plan.sites),
        )

    # Authorized forward under the correct key
    z_ok, trace_ok = forward(net, x, plan, draw.correct)
    ce = cross_entropy(z_ok, y)
    weight = cfg.weight_at(epoch)
    grad_z_ok = ce.grad.copy()
    grad_r_ok = np.zeros(x.shape[0]) if net.head_kind == "aux_reject" else None

    deny_value = 0.0
    invalid_traces = {}
    path_grads = {}
    if weight > 0:
        invalid = {}
        for path in cfg.deny_on:
            # wrong_key injects the wrong key, no_key injects nothing
            keys = draw.wrong if path == "wrong_key" else None
            z_p, trace_p = forward(net, x, plan, keys)
            invalid[path] = (z_p, trace_p.aux_logit)
            invalid_traces[path] = trace_p
        deny_value, g_ok, g_r_ok, path_grads = _deny_value(net, cfg, y, z_ok, trace_ok.aux_logit, invalid)
        grad_z_ok += weight * g_ok
        if g_r_ok is not None:
            grad_r_ok = grad_r_ok + weight * g_r_ok

    # Sum the gradients of every forward that fed the loss
    grads = backward(net, trace_ok, grad_z_ok, grad_r_ok)
    for path, trace_p in invalid_traces.items():
        g_z, g_r = path_grads[path]
        g_r_scaled = None if g_r is None else weight * g_r
        grads.add_(backward(net, trace_p, weight * g_z, g_r_scaled))

    breakdown = LossBreakdown(
        total=ce.value + weight * deny_value,
        ce=ce.value,
        deny=deny_value,
        deny_weight=weight,
        parts={"mode": cfg.mode, "paths": list(invalid_traces)},
    )
    return breakdown, grads


#####################################
# Evaluation
#####################################


@dataclass
class EvalReport:
    """Metrics of one protocol over one dataset split."""

    protocol: str
    top1: float
    semantic_acc: float
    reject_mass: float
    mean_entropy: float
    aux_reject_mean: float
    n: int
    run_id: str = ""
    seed: int = 0
    split: str = "test"

    def to_row(self) -> dict:
        return asdict(self)


@dataclass
class _Counts:
    top1: int = 0
    semantic: int = 0
    reject: int = 0
    entropy_sum: float = 0.0
    aux_sum: float = 0.0
    n: int = 0

    def __add__(self, other: "_Counts") -> "_Counts":
        return _Counts(
            self.top1 + other.top1,
            self.semantic + other.semantic,
            self.reject + other.reject,
            self.entropy_sum + other.entropy_sum,
            self.aux_sum + other.aux_sum,
            self.n + other.n,
        )


def score_logits(net: Network, logits: np.ndarray, aux: Optional[np.ndarray], y: np.ndarray) -> _Counts:
    """Count correct and rejected predictions for one batch of logits."""
    c = net.num_classes
    semantic_logits = logits[:, :c]
    # np.argmax returns the lowest index among ties
    top1_pred = semantic_logits.argmax(axis=1)
    full_pred = logits.argmax(axis=1)
    counts = _Counts(n=len(y))
    counts.top1 = int((top1_pred == y).sum())
    counts.semantic = int((full_pred == y).sum())
    # Reject: argmax on the extra class, or sigmoid(r) > 0.5 for the aux head
    if net.head_kind == "reject_C_plus_1":
        counts.reject = int((full_pred == net.reject_index).sum())
    elif net.head_kind == "aux_reject":
        s = expit(aux)
        counts.reject = int((s > 0.5).sum())
        counts.aux_sum = float(s.sum())
    _, _, h = _entropy_from_logits(semantic_logits)
    counts.entropy_sum = float(h.sum())
    return counts


def iter_batches(n: int, batch_size: int, limit: Optional[int] = None) -> Iterable[slice]:
    """Canonical-order batch slices, optionally only the first `limit`."""
    starts = range(0, n, batch_size)
    for i, start in enumerate(starts):
        if limit is not None and i >= limit:
            return
        yield slice(start, min(start + batch_size, n))


def evaluate(
    net: Network,
    plan: InjectionPlan,
    keyspace: KeySpace,
    dataset,
    protocol: str,
    seed: int,
    batch_size: int = 128,
    max_batches: Optional[int] = None,
    workers: int = 1,
    fixed_keys: Optional[dict] = None,
) -> EvalReport:
    """
    Evaluate one key protocol on a dataset in canonical order.

    Keys are resampled per batch from a per-batch seed spawned from
    `seed`, so results do not depend on `workers`. `fixed_keys` evaluates
    one key set on every batch instead (attacks and single-key probes).
    """
    if protocol not in PROTOCOLS:
        raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    slices = list(iter_batches(len(dataset.labels), batch_size, max_batches))
    batch_seeds = np.random.SeedSequence(seed).spawn(len(slices))

    def run(item: tuple[slice, np.random.SeedSequence]) -> _Counts:
        sl, ss = item
        # Fresh keys per batch unless one key set is fixed
        if fixed_keys is not None:
            keys = fixed_keys
        else:
            keys = keyspace.sample(protocol, np.random.default_rng(ss), plan.sites)
        logits, trace = forward(net, dataset.inputs[sl], plan, keys)
        return score_logits(net, logits, trace.aux_logit, dataset.labels[sl])

    # Batches are independent; summing counts makes the order irrelevant
    items = list(zip(slices, batch_seeds))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, items))
    else:
        parts = [run(item) for item in items]
    counts = sum(parts, _Counts())
    n = max(counts.n, 1)
    return EvalReport(
        protocol=protocol,
        top1=counts.top1 / n,
        semantic_acc=counts.semantic / n,
        reject_mass=counts.reject / n,
        mean_entropy=counts.entropy_sum / n,
        aux_reject_mean=counts.aux_sum / n,
        n=counts.n,
        seed=seed,
        split=getattr(dataset, "split_tag", "test"),
    )


def three_protocol_table(reports: Iterable[EvalReport], num_classes: int) -> pd.DataFrame:
    """
    One row per split: no-key / correct / wrong semantic accuracy and the
    chance rate 1/C.
    """
    frame = pd.DataFrame([r.to_row() for r in reports])
    if frame.empty:
        return pd.DataFrame(columns=["split", "no_key", "correct", "wrong", "random"])
    table = frame.pivot_table(index="split", columns="protocol", values="semantic_acc", aggfunc="first")
    table = table.reindex(columns=list(PROTOCOLS)).reset_index()
    table["random"] = 1.0 / num_classes
    table.columns.name = None
    return table
