"""
injection.py - the two key injectors and the plan that places them.

An injector takes the activation h at a site and a key k of the same
width and returns the conditioned activation h':

    add:  h' = h + gamma * k
    mul:  h' = h * (1 + gamma * tanh(k))

Keys are vectors of the site width (one key for a whole batch) or
matrices with one key row per batch row.
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
from dataclasses import dataclass, replace

# Import external packages
import numpy as np

# Import functions from local modules
from spankey.errors import ConfigError, ShapeMismatchError
from utils.utils_logger import logger

#####################################
# Default Configurations
#####################################

INJECTOR_KINDS = ("add", "mul")
INJECTION_POINTS = ("post", "pre")


#####################################
# Injection Plan
#####################################


@dataclass(frozen=True)
class InjectionPlan:
    """
    Where and how keys enter the forward pass.

    Attributes:
        sites: hidden-layer indices receiving a key, strictly increasing.
        kind: "add" or "mul".
        gamma: injection strength, finite and >= 0.
        point: "post" injects after the site's nonlinearity, "pre" before it.
    """

    sites: tuple[int, ...] = (0,)
    kind: str = "add"
    gamma: float = 1.0
    point: str = "post"

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(int(s) for s in self.sites))
        if self.kind not in INJECTOR_KINDS:
            raise ConfigError(f"injector kind must be one of {INJECTOR_KINDS}, got {self.kind!r}")
        if self.point not in INJECTION_POINTS:
            raise ConfigError(f"injection point must be one of {INJECTION_POINTS}, got {self.point!r}")
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ConfigError(f"gamma must be finite and >= 0, got {self.gamma}")
        if any(s < 0 for s in self.sites):
            raise ConfigError(f"injection sites must be >= 0, got {self.sites}")
        if any(b <= a for a, b in zip(self.sites, self.sites[1:])):
            raise ConfigError(f"injection sites must be strictly increasing, got {self.sites}")

    def with_changes(self, **changes) -> "InjectionPlan":
        """Return a copy with some fields replaced."""
        return replace(self, **changes)


#####################################
# Injectors
#####################################


def _check_widths(h: np.ndarray, k: np.ndarray) -> None:
    if h.shape[-1] != k.shape[-1] or (k.ndim == 2 and h.ndim == 2 and k.shape[0] not in (1, h.shape[0])):
        msg = f"key shape {k.shape} does not fit activation shape {h.shape}"
        logger.error(msg)
        raise ShapeMismatchError(msg)


def inject_add(h: np.ndarray, k: np.ndarray, gamma: float) -> np.ndarray:
    """Additive injector: h + gamma * k."""
    h = np.asarray(h, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    _check_widths(h, k)
    return h + gamma * k


def inject_mul(h: np.ndarray, k: np.ndarray, gamma: float) -> np.ndarray:
    """Multiplicative injector: h * (1 + gamma * tanh(k))."""
    h = np.asarray(h, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    _check_widths(h, k)
    return h * (1.0 + gamma * np.tanh(k))


def effective_increment_mul(h: np.ndarray, k: np.ndarray, gamma: float) -> np.ndarray:
    """
    First-order increment of the multiplicative injector, gamma * (h * k).

    inject_mul(h, k, gamma) - h approaches this as ||k|| -> 0 because
    tanh(x) = x + O(x^3).
    """
    h = np.asarray(h, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    return gamma * (h * k)


def inject(kind: str, h: np.ndarray, k: np.ndarray, gamma: float) -> np.ndarray:
    """Dispatch to the injector named by `kind`."""
    if kind == "add":
        return inject_add(h, k, gamma)
    if kind == "mul":
        return inject_mul(h, k, gamma)
    raise ConfigError(f"unknown injector kind {kind!r}")


def inject_local_gain(kind: str, k: np.ndarray, gamma: float) -> np.ndarray | float:
    """Elementwise derivative dh'/dh of the injector at key k."""
    if kind == "add":
        return 1.0
    return 1.0 + gamma * np.tanh(k)


def inject_backward(
    kind: str,
    h: np.ndarray,
    k: np.ndarray,
    gamma: float,
    grad_out: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Reverse-mode step through an injector.

    Args:
        kind: "add" or "mul".
        h: the activation that entered the injector, shape (n, w).
        k: the key, shape (w,) or (n, w).
        gamma: injection strength.
        grad_out: gradient with respect to the injector output, shape (n, w).

    Returns:
        (grad_h, grad_k); grad_k has the shape of k, so a shared key
        collects the gradient summed over the batch.
    """
    k = np.asarray(k, dtype=np.float64)
    if kind == "add":
        grad_h = grad_out
        grad_k_rows = gamma * grad_out
    else:
        t = np.tanh(k)
        grad_h = grad_out * (1.0 + gamma * t)
        grad_k_rows = grad_out * h * gamma * (1.0 - t * t)
    if k.ndim == 1:
        grad_k = grad_k_rows.sum(axis=0)
    elif k.shape[0] == 1 and grad_k_rows.shape[0] != 1:
        grad_k = grad_k_rows.sum(axis=0, keepdims=True)
    else:
        grad_k = grad_k_rows
    return grad_h, grad_k
