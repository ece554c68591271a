"""
keyspace.py - secret key subspaces and dynamic key sampling.

A BasisMatrix holds m orthonormal rows in R^d; its row span is the key
subspace. Correct keys are k = alpha^T B with fresh alpha per draw,
rescaled so the empirical std of k's entries equals target_key_std.
Wrong keys are isotropic Gaussian draws with most of their energy
outside the span.

KeySpace bundles one basis per injection site and samples a key for
every site at once.
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
import json
import pathlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Optional, Sequence

# Import external packages
import numpy as np

# Import functions from local modules
from spankey.errors import ConfigError, RankDeficiencyError, ShapeMismatchError, ZeroKeyError
from utils.utils_logger import logger

#####################################
# Default Configurations
#####################################

KEY_KINDS = ("correct", "wrong", "none")

BASIS_FORMAT = "spankey-basis"
BASIS_VERSION = 1

# Row is resampled when re-orthogonalization leaves less than this
# fraction of its original norm.
RANK_TOLERANCE = 1e-8
MAX_ROW_RETRIES = 16

# Wrong keys must carry more than this fraction of squared norm
# outside the span.
WRONG_KEY_MIN_ETA = 0.5
MAX_WRONG_KEY_DRAWS = 10_000


#####################################
# Basis Matrix
#####################################


@dataclass(frozen=True)
class BasisMatrix:
    """m orthonormal rows in R^d; immutable once built."""

    rows: np.ndarray
    seed: int

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64)
        if rows.ndim != 2 or not 1 <= rows.shape[0] < rows.shape[1]:
            raise ConfigError(f"basis must be m x d with 1 <= m < d, got shape {rows.shape}")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def m(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    @cached_property
    def projector(self) -> np.ndarray:
        """P = B^T B, the orthogonal projector onto the span."""
        p = self.rows.T @ self.rows
        p.setflags(write=False)
        return p

    def project(self, k: np.ndarray) -> np.ndarray:
        """Pk, computed as B^T (B k) without forming P."""
        return (np.asarray(k) @ self.rows.T) @ self.rows

    def to_record(self) -> dict:
        return {
            "format": BASIS_FORMAT,
            "version": BASIS_VERSION,
            "d": self.d,
            "m": self.m,
            "seed": int(self.seed),
            "rows": self.rows.ravel().tolist(),
        }

    @classmethod
    def from_record(cls, record: Mapping) -> "BasisMatrix":
        if record.get("format") != BASIS_FORMAT or record.get("version") != BASIS_VERSION:
            raise ConfigError(f"not a version-{BASIS_VERSION} basis record")
        rows = np.asarray(record["rows"], dtype=np.float64).reshape(record["m"], record["d"])
        return cls(rows, int(record["seed"]))


def make_basis(d: int, m: int, seed: int) -> BasisMatrix:
    """
    Orthonormalize m i.i.d. Gaussian vectors in R^d.

    Classical Gram-Schmidt with a second re-orthogonalization pass per row.
    A row that collapses numerically is redrawn, at most MAX_ROW_RETRIES times.
    """
    if not 1 <= m < d:
        msg = f"basis needs 1 <= m < d, got m={m}, d={d}"
        logger.error(msg)
        raise ConfigError(msg)
    rng = np.random.default_rng(seed)
    rows = np.zeros((m, d))
    for i in range(m):
        for _attempt in range(MAX_ROW_RETRIES):
            v = rng.standard_normal(d)
            original = np.linalg.norm(v)
            # Project out the accepted rows twice
            for _pass in range(2):
                v = v - rows[:i].T @ (rows[:i] @ v)
            norm = np.linalg.norm(v)
            # Keep the row only if enough of it survived the projection
            if norm > RANK_TOLERANCE * original:
                rows[i] = v / norm
                break
            logger.warning(f"basis row {i} lost rank (seed={seed}); resampling")
        else:
            raise RankDeficiencyError(f"could not draw an independent row {i} for d={d}, m={m}")
    return BasisMatrix(rows, seed)


def save_basis(basis: BasisMatrix, path: pathlib.Path) -> None:
    """Write a versioned JSON record; floats round-trip bit-exactly."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(basis.to_record()))
    logger.info(f"Saved basis d={basis.d} m={basis.m} to {path}")


def load_basis(path: pathlib.Path) -> BasisMatrix:
    return BasisMatrix.from_record(json.loads(pathlib.Path(path).read_text()))


#####################################
# Dynamic Keys
#####################################


@dataclass
class DynamicKey:
    """
    A key for one injection site.

    values is None for the no-key protocol; alpha is set only for
    correct keys (values == alpha @ B). attempts counts wrong-key draws
    including rejected ones.
    """

    values: Optional[np.ndarray]
    kind: str
    site: int = 0
    alpha: Optional[np.ndarray] = None
    attempts: int = 1

    def __post_init__(self):
        if self.kind not in KEY_KINDS:
            raise ConfigError(f"key kind must be one of {KEY_KINDS}, got {self.kind!r}")
        if (self.alpha is not None) != (self.kind == "correct"):
            raise ConfigError("alpha must be present exactly for correct keys")


@dataclass(frozen=True)
class KeySamplerConfig:
    """How keys are drawn (see DESIGN.md for the defaults)."""

    alpha_std: float = 1.0
    target_key_std: float = 1.0
    per_layer_alpha: bool = True
    per_layer_basis: bool = False

    def __post_init__(self):
        if not self.alpha_std > 0:
            raise ConfigError(f"alpha_std must be > 0, got {self.alpha_std}")
        if not self.target_key_std > 0:
            raise ConfigError(f"target_key_std must be > 0, got {self.target_key_std}")


def _rescale_alpha(basis: BasisMatrix, alpha: np.ndarray, target_std: float) -> np.ndarray:
    k = alpha @ basis.rows
    std = k.std()
    return alpha * (target_std / std)


def sample_correct_key(
    basis: BasisMatrix,
    cfg: KeySamplerConfig,
    rng: np.random.Generator,
    site: int = 0,
    alpha: Optional[np.ndarray] = None,
) -> DynamicKey:
    """
    Draw alpha ~ N(0, alpha_std^2 I_m) and return k = alpha^T B, rescaled
    (alpha included) so that k's entries have empirical std target_key_std.

    Passing `alpha` skips the draw but still applies scale matching, so
    alpha = e_1 gives a positive multiple of the first row of B, not the
    row itself. KeySpace.keys_from_alpha builds unscaled keys.
    """
    if alpha is None:
        alpha = rng.normal(0.0, cfg.alpha_std, size=basis.m)
        while not np.any(alpha):
            alpha = rng.normal(0.0, cfg.alpha_std, size=basis.m)
    else:
        alpha = np.asarray(alpha, dtype=np.float64)
        if alpha.shape != (basis.m,):
            raise ShapeMismatchError(f"alpha must have shape ({basis.m},), got {alpha.shape}")
    alpha = _rescale_alpha(basis, alpha, cfg.target_key_std)
    return DynamicKey(alpha @ basis.rows, "correct", site, alpha)


def energy_split(basis: BasisMatrix, k: np.ndarray) -> tuple[float, float, float]:
    """
    Orthogonal decomposition k = Pk + (I - P)k.

    Returns:
        (||Pk||^2, ||(I-P)k||^2, eta) with eta the out-of-span fraction.
    """
    k = np.asarray(k, dtype=np.float64)
    if k.shape != (basis.d,):
        raise ShapeMismatchError(f"key must have shape ({basis.d},), got {k.shape}")
    total = float(k @ k)
    if total == 0.0:
        raise ZeroKeyError("energy split of the zero key is undefined")
    coeffs = basis.rows @ k
    in_energy = float(coeffs @ coeffs)
    residual = k - coeffs @ basis.rows
    out_energy = float(residual @ residual)
    return in_energy, out_energy, out_energy / total


def energy_split_batch(basis: BasisMatrix, keys: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise energy_split for an (n, d) array of keys."""
    keys = np.asarray(keys, dtype=np.float64)
    coeffs = keys @ basis.rows.T
    in_energy = np.einsum("ij,ij->i", coeffs, coeffs)
    residual = keys - coeffs @ basis.rows
    out_energy = np.einsum("ij,ij->i", residual, residual)
    total = in_energy + out_energy
    return in_energy, out_energy, out_energy / total


def sample_wrong_key(
    basis: BasisMatrix,
    cfg: KeySamplerConfig,
    rng: np.random.Generator,
    site: int = 0,
) -> DynamicKey:
    """
    Draw k = target_key_std * g with g ~ N(0, I_d), redrawing while the
    out-of-span energy fraction is <= 0.5.
    """
    for attempt in range(1, MAX_WRONG_KEY_DRAWS + 1):
        k = cfg.target_key_std * rng.standard_normal(basis.d)
        _, _, eta = energy_split(basis, k)
        if eta > WRONG_KEY_MIN_ETA:
            return DynamicKey(k, "wrong", site, None, attempt)
    raise RankDeficiencyError(
        f"no wrong key with eta > {WRONG_KEY_MIN_ETA} in {MAX_WRONG_KEY_DRAWS} draws (d={basis.d}, m={basis.m})"
    )


#####################################
# Per-site Key Space
#####################################


@dataclass
class KeySpace:
    """
    One basis per injection site.

    With per_layer_basis off, sites of equal width share a basis; sites
    of different width cannot, and get one basis per width.
    """

    bases: dict[int, BasisMatrix]
    cfg: KeySamplerConfig = field(default_factory=KeySamplerConfig)

    @property
    def sites(self) -> list[int]:
        return sorted(self.bases)

    @property
    def m(self) -> int:
        return next(iter(self.bases.values())).m

    def sample_correct_keys(self, rng: np.random.Generator) -> dict[int, DynamicKey]:
        keys = {}
        shared = None
        for site in self.sites:
            basis = self.bases[site]
            if self.cfg.per_layer_alpha:
                keys[site] = sample_correct_key(basis, self.cfg, rng, site)
            else:
                if shared is None:
                    shared = rng.normal(0.0, self.cfg.alpha_std, size=basis.m)
                    while not np.any(shared):
                        shared = rng.normal(0.0, self.cfg.alpha_std, size=basis.m)
                keys[site] = sample_correct_key(basis, self.cfg, rng, site, alpha=shared)
        return keys

    def sample_wrong_keys(self, rng: np.random.Generator) -> dict[int, DynamicKey]:
        return {site: sample_wrong_key(self.bases[site], self.cfg, rng, site) for site in self.sites}

    def no_keys(self) -> dict[int, DynamicKey]:
        return {site: DynamicKey(None, "none", site) for site in self.sites}

    def sample(
        self,
        protocol: str,
        rng: np.random.Generator,
        sites: Optional[Sequence[int]] = None,
    ) -> dict[int, DynamicKey]:
        """
        Keys for one of the protocols "correct", "wrong", "no_key".

        Every site is drawn so the random stream does not depend on
        `sites`; only the keys for `sites` (default all) are returned.
        """
        if protocol == "correct":
            keys = self.sample_correct_keys(rng)
        elif protocol == "wrong":
            keys = self.sample_wrong_keys(rng)
        elif protocol in ("no_key", "none"):
            keys = self.no_keys()
        else:
            raise ConfigError(f"unknown key protocol {protocol!r}")
        return keys if sites is None else restrict_keys(keys, sites)

    def keys_from_alpha(self, alphas: Mapping[int, np.ndarray]) -> dict[int, DynamicKey]:
        """Exact in-span keys k = alpha^T B, without scale matching."""
        keys = {}
        for site in self.sites:
            alpha = np.asarray(alphas[site], dtype=np.float64)
            keys[site] = DynamicKey(alpha @ self.bases[site].rows, "correct", site, alpha)
        return keys

    def to_record(self) -> dict:
        return {
            "cfg": {
                "alpha_std": self.cfg.alpha_std,
                "target_key_std": self.cfg.target_key_std,
                "per_layer_alpha": self.cfg.per_layer_alpha,
                "per_layer_basis": self.cfg.per_layer_basis,
            },
            "bases": {str(site): basis.to_record() for site, basis in self.bases.items()},
        }

    @classmethod
    def from_record(cls, record: Mapping) -> "KeySpace":
        bases = {int(site): BasisMatrix.from_record(r) for site, r in record["bases"].items()}
        return cls(bases, KeySamplerConfig(**record["cfg"]))


def build_keyspace(
    site_widths: Mapping[int, int],
    m: int,
    seed: int,
    cfg: Optional[KeySamplerConfig] = None,
) -> KeySpace:
    """
    Bases for every site. Seeds derive from the root seed and either the
    site index (per-layer bases) or the site width (shared basis).
    """
    cfg = cfg or KeySamplerConfig()
    bases: dict[int, BasisMatrix] = {}
    by_width: dict[int, BasisMatrix] = {}
    for site in sorted(site_widths):
        width = site_widths[site]
        if cfg.per_layer_basis:
            sub_seed = int(np.random.SeedSequence([seed, 1, site]).generate_state(1)[0])
            bases[site] = make_basis(width, m, sub_seed)
        else:
            if width not in by_width:
                sub_seed = int(np.random.SeedSequence([seed, 0, width]).generate_state(1)[0])
                by_width[width] = make_basis(width, m, sub_seed)
            bases[site] = by_width[width]
    logger.info(f"Built key space: sites={sorted(bases)} m={m} per_layer_basis={cfg.per_layer_basis}")
    return KeySpace(bases, cfg)


def alpha_gradient(basis: BasisMatrix, key_grad: np.ndarray) -> np.ndarray:
    """Chain rule through k = alpha^T B: grad_alpha = B grad_k."""
    return basis.rows @ np.asarray(key_grad, dtype=np.float64)


def restrict_keys(keys: Mapping[int, DynamicKey], sites: Sequence[int]) -> dict[int, DynamicKey]:
    """The keys for `sites` only; sites without a key are left out."""
    return {site: keys[site] for site in sites if site in keys}
