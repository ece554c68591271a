"""
verify_theory.py - numerical checks of the key-space mathematics.

Each check writes <out>/verify_<check>.csv with columns
(check, params, theoretical, empirical, tolerance, pass).
Monte Carlo rows pass within 3 standard errors; exact rows within a
fixed relative tolerance.

Run with:
    python -m harness verify-theory --out runs/theory
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
import pathlib
from typing import Callable, Optional

# Import external packages
import numpy as np
import pandas as pd

# Import functions from local modules
from harness.report import write_table
from spankey.deny import DenyConfig, KeyDraw, total_loss
from spankey.injection import InjectionPlan, effective_increment_mul, inject_mul
from spankey.keyspace import build_keyspace
from spankey.nn_core import Network, build_layer_dims, forward, init_network, jacobian_vector_product, logit_jvp
from spankey.theory_lab import (
    MarginInstance,
    binomial_se,
    flip_probability,
    flip_tail_bound,
    mc_beta_energy,
    mc_chi2_split,
    mc_flip_rate,
    mc_multiclass_error,
    sandwich_bounds,
)
from utils.utils_logger import logger

#####################################
# Default Configurations
#####################################

CHECK_COLUMNS = ["check", "params", "theoretical", "empirical", "tolerance", "pass"]

BETA_D, BETA_M, BETA_N = 64, 8, 100_000
FLIP_RATIOS = (0.5, 1.0, 2.0, 3.0)
FLIP_N = 1_000_000
SANDWICH_INSTANCES = 100
SANDWICH_CLASSES = (3, 5, 10)
SANDWICH_N = 20_000
DOMINANCE_INSTANCES = 10_000
CHI2_N = 100_000

GRADIENT_TOLERANCE = 1e-4
FD_STEP = 1e-5
GRADIENT_MODES = ("none", "A", "A_soft", "B", "B_aux", "C", "cplus", "AC")

#####################################
# Helpers
#####################################


def _row(check: str, params: str, theoretical: float, empirical: float, tolerance: float, passed: bool) -> dict:
    return {
        "check": check,
        "params": params,
        "theoretical": float(theoretical),
        "empirical": float(empirical),
        "tolerance": float(tolerance),
        "pass": bool(passed),
    }


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


#####################################
# Energy Checks
#####################################


def check_beta_energy(rng: np.random.Generator, scale: float = 1.0, workers: int = 1) -> pd.DataFrame:
    n = max(1000, int(BETA_N * scale))
    res = mc_beta_energy(BETA_D, BETA_M, n, rng, workers=workers)
    params = f"d={BETA_D},m={BETA_M},n={n}"
    rows = [
        _row("beta_mean", params, res.expected_mean, res.mean, 3 * res.mean_se, abs(res.mean - res.expected_mean) <= 3 * res.mean_se),
        _row("beta_var", params, res.expected_var, res.var, 0.05 * res.expected_var, res.var_rel_error <= 0.05),
    ]
    for tail in res.tails.to_dict("records"):
        rows.append(
            _row("chebyshev_tail", f"{params},t={tail['t']}", tail["bound"], tail["empirical"], 3 * tail["se"], tail["pass"])
        )
    return pd.DataFrame(rows, columns=CHECK_COLUMNS)


def check_chi2_split(rng: np.random.Generator, scale: float = 1.0, workers: int = 1) -> pd.DataFrame:
    n = max(1000, int(CHI2_N * scale))
    res = mc_chi2_split(BETA_D, BETA_M, n, rng, workers=workers)
    params = f"d={BETA_D},m={BETA_M},n={n}"
    rows = [
        _row("chi2_in_mean", params, BETA_M, res.mean_in, 3 * res.se_in, abs(res.mean_in - BETA_M) <= 3 * res.se_in),
        _row(
            "chi2_out_mean",
            params,
            BETA_D - BETA_M,
            res.mean_out,
            3 * res.se_out,
            abs(res.mean_out - (BETA_D - BETA_M)) <= 3 * res.se_out,
        ),
        _row("chi2_correlation", params, 0.0, res.corr, 3 * res.corr_se, abs(res.corr) <= 3 * res.corr_se),
    ]
    return pd.DataFrame(rows, columns=CHECK_COLUMNS)


#####################################
# Margin Checks
#####################################


def check_margin_flip(rng: np.random.Generator, scale: float = 1.0, workers: int = 1) -> pd.DataFrame:
    n = max(10_000, int(FLIP_N * scale))
    rows = []
    for ratio in FLIP_RATIOS:
        u = rng.standard_normal(16)
        gamma = 0.5
        M = ratio * gamma * np.linalg.norm(u)
        inst = MarginInstance(M, gamma, u)
        p = flip_probability(inst)
        rate = mc_flip_rate(inst, n, rng, workers)
        se = binomial_se(p, n)
        params = f"ratio={ratio},n={n}"
        rows.append(_row("flip_rate", params, p, rate, 3 * se, abs(rate - p) <= 3 * se))
        bound = flip_tail_bound(inst)
        rows.append(_row("tail_bound_dominates", params, p, bound, 0.0, bound >= p))

    # dominance on random instances
    count = max(100, int(DOMINANCE_INSTANCES * scale))
    violations = 0
    for _ in range(count):
        inst = MarginInstance(rng.exponential(1.0), rng.uniform(0.05, 2.0), rng.standard_normal(8))
        violations += flip_tail_bound(inst) < flip_probability(inst)
    rows.append(_row("tail_bound_random", f"instances={count}", 0, violations, 0, violations == 0))
    return pd.DataFrame(rows, columns=CHECK_COLUMNS)


def check_sandwich(rng: np.random.Generator, scale: float = 1.0, workers: int = 1) -> pd.DataFrame:
    n = max(2000, int(SANDWICH_N * scale))
    count = max(10, int(SANDWICH_INSTANCES * scale))
    rows = []
    for i in range(count):
        C = SANDWICH_CLASSES[i % len(SANDWICH_CLASSES)]
        d = 12
        gamma = rng.uniform(0.2, 1.0)
        us = [rng.standard_normal(d) for _ in range(C - 1)]
        margins = [rng.uniform(0.2, 2.5) * gamma * np.linalg.norm(u) for u in us]
        lower, upper = sandwich_bounds(margins, us, gamma)
        rate = mc_multiclass_error(margins, us, gamma, n, rng, workers)
        se = max(binomial_se(rate, n), binomial_se(upper if upper < 1 else lower, n))
        passed = lower - 3 * se <= rate <= upper + 3 * se
        rows.append(_row("sandwich", f"instance={i},C={C},n={n}", 0.5 * (lower + upper), rate, 0.5 * (upper - lower) + 3 * se, passed))
    return pd.DataFrame(rows, columns=CHECK_COLUMNS)


#####################################
# Linearization Checks
#####################################


def check_linearization(rng: np.random.Generator) -> pd.DataFrame:
    rows = []

    # linear network: the first-order shift is exact
    dims = [6, 10, 8, 4]
    net = init_network(dims, "identity", "plain_C", int(rng.integers(0, 2**31 - 1)))
    plan = InjectionPlan((0,), "add", 0.7)
    x = rng.standard_normal((5, 6))
    k = rng.standard_normal(10)
    base, trace = forward(net, x, plan, None)
    shifted, _ = forward(net, x, plan, {0: k})
    approx = logit_jvp(net, trace, 0, plan.gamma * k)
    err = relative_error(shifted - base, approx)
    rows.append(_row("linear_exact", "dims=6-10-8-4,gamma=0.7", 0.0, err, 1e-9, err <= 1e-9))

    # ReLU network: JVP against a central difference of h_L away from kinks
    relu = init_network(dims, "relu", "plain_C", int(rng.integers(0, 2**31 - 1)))
    for _ in range(100):
        x1 = rng.standard_normal((1, 6))
        _, tr = forward(relu, x1, plan, None)
        if all(np.min(np.abs(z)) > 1e-4 for z in tr.pre[:-1]):
            break
    v = rng.standard_normal(10)
    jvp = jacobian_vector_product(relu, tr, 0, v)
    h = 1e-6
    _, tp = forward(relu, x1, plan, {0: v * h / plan.gamma})
    _, tm = forward(relu, x1, plan, {0: -v * h / plan.gamma})
    fd = (tp.penultimate - tm.penultimate) / (2 * h)
    err = relative_error(jvp, fd)
    rows.append(_row("relu_jvp_fd", "dims=6-10-8-4,step=1e-6", 0.0, err, 1e-5, err < 1e-5))

    # multiplicative injector: first-order increment at small keys
    hv = np.array([1.0, 2.0])
    kv = np.array([1e-4, -1e-4])
    delta = effective_increment_mul(hv, kv, 1.0)
    err = relative_error(inject_mul(hv, kv, 1.0) - hv, delta)
    rows.append(_row("mul_increment", "h=(1,2),|k|=1e-4", 0.0, err, 1e-7, err < 1e-7))
    return pd.DataFrame(rows, columns=CHECK_COLUMNS)


#####################################
# Gradient Checks
#####################################


def gradient_test_net(head_kind: str, seed: int, readout_gain: float = 4.0) -> Network:
    """A small tanh network with a sharpened readout."""
    dims = build_layer_dims(6, [8, 8], 4, head_kind)
    net = init_network(dims, "tanh", head_kind, seed)
    net.weights[-1] *= readout_gain
    if head_kind == "aux_reject":
        net.aux_weight[:] = np.random.default_rng(seed).standard_normal(net.aux_weight.shape)
    return net


def finite_difference_errors(
    net: Network,
    loss: Callable[[], tuple[float, dict]],
    rng: np.random.Generator,
    entries_per_param: int = 4,
    step: float = FD_STEP,
) -> list[tuple[str, float, float]]:
    """
    Compare analytic gradients with central differences on sampled
    entries of every parameter. loss() returns (value, analytic grads).

    Returns:
        (parameter[index], analytic, numeric) per sampled entry.
    """
    _, analytic = loss()
    out = []
    for name, theta in net.parameters().items():
        flat = theta.reshape(-1)
        picks = rng.choice(flat.size, size=min(entries_per_param, flat.size), replace=False)
        for j in picks:
            old = flat[j]
            flat[j] = old + step
            up, _ = loss()
            flat[j] = old - step
            down, _ = loss()
            flat[j] = old
            numeric = (up - down) / (2 * step)
            out.append((f"{name}[{j}]", float(analytic[name].reshape(-1)[j]), float(numeric)))
    return out


def entry_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(floor, abs(analytic) + abs(numeric))


def check_gradients(rng: np.random.Generator, modes: tuple[str, ...] = GRADIENT_MODES) -> pd.DataFrame:
    rows = []
    for mode in modes:
        head = {"B": "reject_C_plus_1", "B_aux": "aux_reject"}.get(mode, "plain_C")
        net = gradient_test_net(head, int(rng.integers(0, 2**31 - 1)))
        plan = InjectionPlan((0, 1), "mul" if mode in ("A", "C") else "add", 0.7)
        keyspace = build_keyspace({0: 8, 1: 8}, 2, int(rng.integers(0, 2**31 - 1)))
        draw = KeyDraw(keyspace.sample_correct_keys(rng), keyspace.sample_wrong_keys(rng))
        cfg = DenyConfig(mode, 0.5 if mode != "none" else 0.1, ("wrong_key", "no_key"), margin=2.0, entropy_gap=0.05)
        x = rng.standard_normal((7, 6))
        y = rng.integers(0, 4, size=7)

        def loss():
            breakdown, grads = total_loss((x, y), net, plan, keyspace, cfg, 10, draw=draw)
            return breakdown.total, grads.params

        worst = 0.0
        for _, a, n in finite_difference_errors(net, loss, rng):
            worst = max(worst, entry_error(a, n))
        rows.append(_row("gradient", f"mode={mode},head={head}", 0.0, worst, GRADIENT_TOLERANCE, worst < GRADIENT_TOLERANCE))
    return pd.DataFrame(rows, columns=CHECK_COLUMNS)


#####################################
# Runner
#####################################

CHECKS = {
    "beta_energy": lambda rng, scale, workers: check_beta_energy(rng, scale, workers),
    "chi2_split": lambda rng, scale, workers: check_chi2_split(rng, scale, workers),
    "margin_flip": lambda rng, scale, workers: check_margin_flip(rng, scale, workers),
    "sandwich": lambda rng, scale, workers: check_sandwich(rng, scale, workers),
    "linearization": lambda rng, scale, workers: check_linearization(rng),
    "gradients": lambda rng, scale, workers: check_gradients(rng),
}


def run_verification(
    out_dir: pathlib.Path,
    seed: int = 0,
    scale: float = 1.0,
    workers: int = 1,
    only: Optional[tuple[str, ...]] = None,
) -> dict[str, pd.DataFrame]:
    """
    Run every check (or those named in `only`) and write one CSV each.
    `scale` shrinks Monte Carlo sample counts for quick runs.
    """
    out_dir = pathlib.Path(out_dir)
    results = {}
    for i, (name, check) in enumerate(CHECKS.items()):
        if only and name not in only:
            continue
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        frame = check(rng, scale, workers)
        write_table(frame, out_dir.joinpath(f"verify_{name}.csv"), CHECK_COLUMNS)
        failed = int((~frame["pass"].astype(bool)).sum())
        log = logger.warning if failed else logger.info
        log(f"verify {name}: {len(frame) - failed}/{len(frame)} rows pass")
        results[name] = frame
    return results


def all_passed(results: dict[str, pd.DataFrame]) -> bool:
    return all(frame["pass"].astype(bool).all() for frame in results.values())
