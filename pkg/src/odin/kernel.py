"""Stationary covariance functions and their time derivatives.

For a kernel ``k(a, b)`` evaluated on a grid ``t`` the four matrices are

* ``C[i, j]     = k(t_i, t_j)``
* ``dC_a[i, j]  = d/da k(a, b)`` at ``(t_i, t_j)``
* ``dC_b[i, j]  = d/db k(a, b)`` at ``(t_i, t_j)``
* ``d2C[i, j]   = d^2/(da db) k(a, b)`` at ``(t_i, t_j)``

All kernels here depend on ``tau = a - b`` only, so ``dC_a = dk/dtau``,
``dC_b = -dk/dtau`` and ``d2C = -d^2k/dtau^2``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import linalg

from odin.errors import DomainError, InvalidGridError, NumericalError

JITTER_START = 1e-8
JITTER_MAX = 1e-4

_SQRT5 = math.sqrt(5.0)


class KernelFamily(str, enum.Enum):
    RBF = "rbf"
    MATERN52 = "matern52"


@dataclass(frozen=True)
class KernelHyperparams:
    """Kernel amplitude (signal std), lengthscale and observation noise std."""

    amplitude: float
    lengthscale: float
    noise_sigma: float = 0.0

    def __post_init__(self):
        vals = (self.amplitude, self.lengthscale, self.noise_sigma)
        if not all(math.isfinite(v) for v in vals):
            raise DomainError(f"non-finite hyperparameters: {vals}")
        if self.amplitude <= 0 or self.lengthscale <= 0:
            raise DomainError("amplitude and lengthscale must be positive")
        if self.noise_sigma < 0:
            raise DomainError("noise_sigma must be non-negative")

    def as_dict(self):
        return {
            "amplitude": self.amplitude,
            "lengthscale": self.lengthscale,
            "sigma": self.noise_sigma,
        }


class CovMatrices(NamedTuple):
    C: np.ndarray
    dC_a: np.ndarray
    dC_b: np.ndarray
    d2C: np.ndarray


def _profile(family, hp, tau):
    """Return ``k``, ``dk/dtau`` and ``d2k/dtau2`` at lag(s) ``tau``."""
    v2 = hp.amplitude**2
    ell = hp.lengthscale
    family = KernelFamily(family)
    if family is KernelFamily.RBF:
        k = v2 * np.exp(-0.5 * (tau / ell) ** 2)
        dk = -tau / ell**2 * k
        d2k = (tau**2 / ell**4 - 1.0 / ell**2) * k
        return k, dk, d2k
    c = _SQRT5 / ell
    s = c * np.abs(tau)
    e = np.exp(-s)
    k = v2 * (1.0 + s + s**2 / 3.0) * e
    dk = -(v2 * c**2 / 3.0) * tau * (1.0 + s) * e
    d2k = -(v2 * c**2 / 3.0) * (1.0 + s - s**2) * e
    return k, dk, d2k


def dk_dlog_lengthscale(family, hp, tau):
    """Derivative of ``k(tau)`` with respect to ``log(lengthscale)``."""
    family = KernelFamily(family)
    if family is KernelFamily.RBF:
        k = hp.amplitude**2 * np.exp(-0.5 * (tau / hp.lengthscale) ** 2)
        return k * (tau / hp.lengthscale) ** 2
    s = _SQRT5 * np.abs(tau) / hp.lengthscale
    return hp.amplitude**2 * s**2 * (1.0 + s) / 3.0 * np.exp(-s)


def kernel_eval(family, hp: KernelHyperparams, a: float, b: float) -> float:
    if not (math.isfinite(a) and math.isfinite(b)):
        raise DomainError(f"non-finite kernel inputs: {a}, {b}")
    k, _, _ = _profile(family, hp, np.float64(a) - np.float64(b))
    return float(k)


def check_grid(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if t.ndim != 1 or t.size < 1:
        raise InvalidGridError("time grid must be a non-empty 1-D array")
    if not np.all(np.isfinite(t)):
        raise InvalidGridError("time grid contains non-finite values")
    if np.any(np.diff(t) <= 0):
        raise InvalidGridError("time grid must be strictly increasing")
    return t


def build_cov_matrices(family, hp: KernelHyperparams, t) -> CovMatrices:
    t = check_grid(t)
    tau = t[:, None] - t[None, :]
    k, dk, d2k = _profile(family, hp, tau)
    return CovMatrices(C=k, dC_a=dk, dC_b=-dk, d2C=-d2k)


def cholesky_jitter(M, scale, start=JITTER_START, max_jitter=JITTER_MAX, try_exact=False):
    """Lower Cholesky factor of ``M + eps * scale * I`` with escalating ``eps``.

    ``eps`` starts at ``start`` and grows tenfold per failure until it
    exceeds ``max_jitter``. With ``try_exact`` an unjittered factorization is
    attempted first. Returns ``(L, jitter)`` where ``jitter`` is the absolute
    diagonal addition actually used.
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    eye = np.eye(n)
    schedule = [0.0] if try_exact else []
    eps = start
    while eps <= max_jitter * (1 + 1e-9):
        schedule.append(eps)
        eps *= 10.0
    for eps in schedule:
        jitter = eps * scale
        try:
            L = linalg.cholesky(M + jitter * eye, lower=True, check_finite=True)
        except (linalg.LinAlgError, ValueError):
            continue
        return L, jitter
    raise NumericalError(
        f"Cholesky failed with relative jitter up to {max_jitter:g}"
    )
