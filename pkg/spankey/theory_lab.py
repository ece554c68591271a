"""
theory_lab.py - Monte Carlo and linearization checks of the key-space math.

Covers:
- energy laws of isotropic keys against a fixed subspace (Beta fraction,
  chi-square split, Chebyshev tail);
- the Gaussian margin-flip probability of a linearized margin, its
  exponential tail bound and the multiclass max/union sandwich;
- effective sensitivity u_{y,c} = J^T (w_y - w_c) and the absorption
  report built from it;
- first-order quality of the logit shift as gamma shrinks.

Monte Carlo work is split into fixed-size shards with seeds spawned from
the caller's generator, so totals do not depend on the worker count.
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

# Import external packages
import numpy as np
import pandas as pd
from scipy.special import ndtr

# Import functions from local modules
from spankey.errors import ConfigError, ShapeMismatchError
from spankey.injection import InjectionPlan, effective_increment_mul, inject_mul
from spankey.keyspace import KeySpace, energy_split_batch, make_basis
from spankey.nn_core import Network, forward, logit_jvp, vector_jacobian_product
from utils.utils_logger import logger

#####################################
# Default Configurations
#####################################

SHARD_SIZE = 65_536
CHEBYSHEV_T_GRID = (0.01, 0.02, 0.05)
SIGMA_QUANTILES = (0.1, 0.25, 0.75, 0.9)

# ndtr is accurate to about 1e-16 absolute over the real line
PHI_MAX_ABS_ERROR = 1e-15


#####################################
# Sharded Monte Carlo
#####################################


def _shards(n: int, shard_size: int) -> list[int]:
    if n <= 0:
        raise ConfigError(f"Monte Carlo sample count must be positive, got {n}")
    full, rest = divmod(n, shard_size)
    return [shard_size] * full + ([rest] if rest else [])


def run_sharded(
    n: int,
    rng: np.random.Generator,
    work: Callable[[int, np.random.Generator], np.ndarray],
    workers: int = 1,
    shard_size: int = SHARD_SIZE,
) -> np.ndarray:
    """
    Sum `work(size, shard_rng)` over shards covering n draws.

    Shard seeds are spawned from one integer drawn from `rng`; the sum is
    taken in shard order, so any worker count gives the same total.
    """
    sizes = _shards(n, shard_size)
    root = np.random.SeedSequence(int(rng.integers(0, 2**63 - 1)))
    seeds = root.spawn(len(sizes))

    def one(item):
        size, ss = item
        return np.asarray(work(size, np.random.default_rng(ss)), dtype=np.float64)

    items = list(zip(sizes, seeds))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one, items))
    else:
        parts = [one(item) for item in items]
    return np.sum(parts, axis=0)


#####################################
# Margin Flips
#####################################


@dataclass
class MarginInstance:
    """A linearized margin M + gamma * u^T k against one competitor."""

    M: float
    gamma: float
    u: np.ndarray
    sigma: float = field(init=False)

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64).ravel()
        if not np.isfinite(self.M) or self.M < 0:
            raise ConfigError(f"margin must be finite and >= 0, got {self.M}")
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ConfigError(f"gamma must be finite and >= 0, got {self.gamma}")
        self.sigma = float(np.linalg.norm(self.u))

    @property
    def scale(self) -> float:
        """gamma * sigma, the std of the margin increment."""
        return self.gamma * self.sigma


def flip_probability(inst: MarginInstance) -> float:
    """
    P[M + gamma u^T k < 0] for k ~ N(0, I) = Phi(-M / (gamma sigma)).

    A degenerate instance (gamma sigma = 0) never flips a positive margin;
    at M = 0 it sits on the boundary and returns 0.5.
    """
    if inst.scale == 0.0:
        if inst.M > 0:
            logger.debug("flip_probability: zero sensitivity, probability 0")
            return 0.0
        return 0.5
    return float(ndtr(-inst.M / inst.scale))


def flip_tail_bound(inst: MarginInstance) -> float:
    """exp(-M^2 / (2 gamma^2 sigma^2)), an upper bound on flip_probability."""
    if inst.scale == 0.0:
        return 0.0 if inst.M > 0 else 1.0
    return float(np.exp(-(inst.M**2) / (2.0 * inst.scale**2)))


def mc_flip_rate(
    inst: MarginInstance,
    n: int,
    rng: np.random.Generator,
    workers: int = 1,
) -> float:
    """Fraction of n isotropic keys with M + gamma u^T k < 0."""
    if inst.sigma == 0.0:
        raise ConfigError("mc_flip_rate needs a nonzero sensitivity vector")
    d = inst.u.size

    def work(size, shard_rng):
        k = shard_rng.standard_normal((size, d))
        return np.count_nonzero(inst.M + inst.gamma * (k @ inst.u) < 0)

    return float(run_sharded(n, rng, work, workers)) / n


def binomial_se(p: float, n: int) -> float:
    return float(np.sqrt(max(p * (1.0 - p), 0.0) / n))


def _stack_us(margins: Sequence[float], us: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    margins = np.asarray(margins, dtype=np.float64)
    U = np.vstack([np.asarray(u, dtype=np.float64).ravel() for u in us])
    if U.shape[0] != margins.size:
        raise ShapeMismatchError(f"{margins.size} margins but {U.shape[0]} sensitivity vectors")
    return margins, U


def sandwich_bounds(margins: Sequence[float], us: Sequence[np.ndarray], gamma: float) -> tuple[float, float]:
    """
    Bounds on P[exists c: M_c + gamma u_c^T k < 0]:
    lower = max_c p_c, upper = min(1, sum_c p_c).
    """
    margins, U = _stack_us(margins, us)
    probs = [flip_probability(MarginInstance(M, gamma, u)) for M, u in zip(margins, U)]
    return float(max(probs)), float(min(1.0, sum(probs)))


def mc_multiclass_error(
    margins: Sequence[float],
    us: Sequence[np.ndarray],
    gamma: float,
    n: int,
    rng: np.random.Generator,
    workers: int = 1,
) -> float:
    """Fraction of n shared isotropic keys flipping at least one competitor."""
    margins, U = _stack_us(margins, us)

    def work(size, shard_rng):
        k = shard_rng.standard_normal((size, U.shape[1]))
        flipped = (margins[None, :] + gamma * (k @ U.T)) < 0
        return np.count_nonzero(flipped.any(axis=1))

    return float(run_sharded(n, rng, work, workers)) / n


#####################################
# Energy Laws
#####################################


@dataclass
class BetaEnergyResult:
    """Moments of the out-of-span fraction and its Chebyshev tail check."""

    d: int
    m: int
    n: int
    mean: float
    var: float
    expected_mean: float
    expected_var: float
    tails: pd.DataFrame

    @property
    def mean_se(self) -> float:
        return float(np.sqrt(self.expected_var / self.n))

    @property
    def var_rel_error(self) -> float:
        return abs(self.var - self.expected_var) / self.expected_var


def beta_moments(d: int, m: int) -> tuple[float, float]:
    """Mean and variance of Beta((d-m)/2, m/2)."""
    return (d - m) / d, 2.0 * m * (d - m) / (d**2 * (d + 2))


def mc_beta_energy(
    d: int,
    m: int,
    n: int,
    rng: np.random.Generator,
    t_grid: Sequence[float] = CHEBYSHEV_T_GRID,
    workers: int = 1,
) -> BetaEnergyResult:
    """
    Draw n isotropic keys in R^d, split their energy against a random
    m-dimensional subspace, and compare the out-of-span fraction with
    Beta((d-m)/2, m/2).

    The tails frame has one row per t with the empirical mass of
    |eta - (d-m)/d| >= t, the Chebyshev bound Var/t^2 and the MC se.
    """
    if not 1 <= m < d:
        raise ConfigError(f"need 1 <= m < d, got d={d}, m={m}")
    basis = make_basis(d, m, int(rng.integers(0, 2**31 - 1)))
    expected_mean, expected_var = beta_moments(d, m)
    t_grid = np.asarray(t_grid, dtype=np.float64)

    # sums of eta, eta^2 and tail counts per t
    def work(size, shard_rng):
        _, _, eta = energy_split_batch(basis, shard_rng.standard_normal((size, d)))
        tail = (np.abs(eta - expected_mean)[:, None] >= t_grid[None, :]).sum(axis=0)
        return np.concatenate([[eta.sum(), (eta**2).sum()], tail])

    totals = run_sharded(n, rng, work, workers)
    mean = totals[0] / n
    var = (totals[1] - n * mean**2) / (n - 1) if n > 1 else 0.0
    tail_mass = totals[2:] / n
    tails = pd.DataFrame(
        {
            "t": t_grid,
            "empirical": tail_mass,
            "bound": np.minimum(1.0, expected_var / t_grid**2),
            "se": [binomial_se(p, n) for p in tail_mass],
        }
    )
    tails["pass"] = tails["empirical"] <= tails["bound"] + 3.0 * tails["se"]
    return BetaEnergyResult(d, m, n, float(mean), float(var), expected_mean, expected_var, tails)


@dataclass
class Chi2SplitResult:
    """Moments of ||Pk||^2 and ||(I-P)k||^2 for isotropic k."""

    d: int
    m: int
    n: int
    mean_in: float
    mean_out: float
    cov: float
    corr: float

    @property
    def se_in(self) -> float:
        return float(np.sqrt(2.0 * self.m / self.n))

    @property
    def se_out(self) -> float:
        return float(np.sqrt(2.0 * (self.d - self.m) / self.n))

    @property
    def corr_se(self) -> float:
        return float(1.0 / np.sqrt(self.n))


def mc_chi2_split(d: int, m: int, n: int, rng: np.random.Generator, workers: int = 1) -> Chi2SplitResult:
    """In/out energies should be chi^2_m and chi^2_{d-m} and uncorrelated."""
    if not 1 <= m < d:
        raise ConfigError(f"need 1 <= m < d, got d={d}, m={m}")
    basis = make_basis(d, m, int(rng.integers(0, 2**31 - 1)))

    def work(size, shard_rng):
        a, b, _ = energy_split_batch(basis, shard_rng.standard_normal((size, d)))
        return np.array([a.sum(), b.sum(), (a * a).sum(), (b * b).sum(), (a * b).sum()])

    s_a, s_b, s_aa, s_bb, s_ab = run_sharded(n, rng, work, workers)
    mean_a, mean_b = s_a / n, s_b / n
    var_a = s_aa / n - mean_a**2
    var_b = s_bb / n - mean_b**2
    cov = s_ab / n - mean_a * mean_b
    corr = cov / np.sqrt(var_a * var_b)
    return Chi2SplitResult(d, m, n, float(mean_a), float(mean_b), float(cov), float(corr))


#####################################
# Effective Sensitivity
#####################################


def effective_sensitivity(net: Network, trace, y: int, c: int, site: int, row: int = 0) -> tuple[np.ndarray, float]:
    """
    u_{y,c} = J_site^T (w_y - w_c) at the traced linearization point.

    Returns:
        (u for the chosen trace row, its Euclidean norm sigma)
    """
    cot = np.zeros(net.output_dim)
    cot[y] += 1.0
    cot[c] -= 1.0
    u = vector_jacobian_product(net, trace, site, cot)[row]
    return u, float(np.linalg.norm(u))


def margin_instances(
    net: Network,
    x: np.ndarray,
    y: int,
    plan: InjectionPlan,
    site: int,
    keys: Optional[dict] = None,
) -> list[MarginInstance]:
    """
    One MarginInstance per competitor c != y for a single input, using the
    margins z_y - z_c of the forward under `keys` (no keys by default).
    Returns an empty list when the input is misclassified.
    """
    logits, trace = forward(net, np.asarray(x)[None, :], plan, keys)
    z = logits[0, : net.num_classes]
    instances = []
    for c in range(net.num_classes):
        if c == y:
            continue
        M = float(z[y] - z[c])
        if M <= 0:
            return []
        u, _ = effective_sensitivity(net, trace, y, c, site)
        instances.append(MarginInstance(M, plan.gamma, u))
    return instances


#####################################
# Absorption
#####################################


def _sigma_rows(net: Network, trace, site: int, labels: np.ndarray) -> dict[int, np.ndarray]:
    """sigma per input for every competitor class, keyed by competitor."""
    n = labels.size
    out = {}
    for c in range(net.num_classes):
        mask = labels != c
        if not mask.any():
            continue
        cot = np.zeros((n, net.output_dim))
        cot[np.arange(n), labels] += 1.0
        cot[:, c] -= 1.0
        u = vector_jacobian_product(net, trace, site, cot)
        out[c] = np.linalg.norm(u, axis=1)[mask]
    return out


def _summarize(values: np.ndarray) -> dict:
    row = {"count": int(values.size), "mean": float(values.mean()), "median": float(np.median(values))}
    for q in SIGMA_QUANTILES:
        row[f"q{int(round(q * 100)):02d}"] = float(np.quantile(values, q))
    return row


def absorption_report(
    net: Network,
    plan: InjectionPlan,
    keyspace: KeySpace,
    dataset,
    n_inputs: int,
    seed: int = 0,
    protocol: str = "correct",
) -> pd.DataFrame:
    """
    Distribution of sigma = ||u_{y,c}|| at each injection site over the
    first `n_inputs` inputs, per competitor class plus an "all" row.

    The linearization point is the forward under one key draw of
    `protocol` (seeded by `seed`). Descriptive only; no pass/fail.
    """
    n = min(n_inputs, len(dataset.labels))
    if n <= 0:
        raise ConfigError("absorption_report needs at least one input")
    x = dataset.inputs[:n]
    labels = np.asarray(dataset.labels[:n], dtype=np.int64)
    keys = keyspace.sample(protocol, np.random.default_rng(seed), plan.sites)
    _, trace = forward(net, x, plan, keys)

    rows = []
    for site in plan.sites:
        per_class = _sigma_rows(net, trace, site, labels)
        for c, values in per_class.items():
            rows.append({"site": site, "competitor": str(c), **_summarize(values)})
        rows.append({"site": site, "competitor": "all", **_summarize(np.concatenate(list(per_class.values())))})
    report = pd.DataFrame(rows)
    logger.info(f"Absorption report over {n} inputs at sites {list(plan.sites)}")
    return report


def absorption_shift(before: pd.DataFrame, after: pd.DataFrame) -> pd.DataFrame:
    """Per-site change of the pooled median sigma between two reports."""
    cols = ["site", "median", "mean"]
    b = before[before["competitor"] == "all"][cols]
    a = after[after["competitor"] == "all"][cols]
    joined = b.merge(a, on="site", suffixes=("_before", "_after"))
    joined["median_ratio"] = joined["median_after"] / joined["median_before"]
    joined["shrunk"] = joined["median_after"] < joined["median_before"]
    return joined


#####################################
# Linearization Quality
#####################################


def first_order_shift(
    net: Network,
    x: np.ndarray,
    plan: InjectionPlan,
    keys: dict,
    increment: str = "exact",
) -> np.ndarray:
    """
    Sum over sites of the first-order logit shift at the uninjected
    forward: W_eff (gamma k) for add, W_eff applied to a mul increment.

    increment="exact" uses the injector's own increment h * gamma * tanh(k);
    increment="effective" uses effective_increment_mul, gamma * (h * k),
    which agrees with it for small keys.
    """
    if increment not in ("exact", "effective"):
        raise ConfigError(f"increment must be 'exact' or 'effective', got {increment!r}")
    _, trace = forward(net, x, plan, None)
    total = np.zeros_like(trace.logits)
    for site in plan.sites:
        key = keys.get(site)
        values = getattr(key, "values", key)
        if values is None:
            continue
        if plan.kind == "add":
            direction = plan.gamma * np.asarray(values, dtype=np.float64)
        else:
            h = trace.post[site] if plan.point == "post" else trace.act_inputs[site]
            if increment == "effective":
                direction = effective_increment_mul(h, values, plan.gamma)
            else:
                direction = inject_mul(h, values, plan.gamma) - h
        total += logit_jvp(net, trace, site, direction)
    return total


def linearization_error(
    net: Network,
    x: np.ndarray,
    plan: InjectionPlan,
    keyspace: KeySpace,
    gammas: Sequence[float],
    seed: int = 0,
    protocol: str = "correct",
) -> pd.DataFrame:
    """
    Relative error of the first-order logit shift against the true shift
    for one key draw, at each gamma. Shrinks like O(gamma).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    keys = keyspace.sample(protocol, np.random.default_rng(seed), plan.sites)
    base, _ = forward(net, x, plan, None)
    rows = []
    for gamma in gammas:
        p = plan.with_changes(gamma=float(gamma))
        shifted, _ = forward(net, x, p, keys)
        true_shift = shifted - base
        approx = first_order_shift(net, x, p, keys)
        denom = np.linalg.norm(approx)
        rel = np.linalg.norm(true_shift - approx) / denom if denom > 0 else 0.0
        rows.append({"gamma": float(gamma), "rel_error": float(rel), "shift_norm": float(np.linalg.norm(true_shift))})
    return pd.DataFrame(rows)
