"""Conditional distribution of state derivatives given states.

Under a GP prior the derivatives at the grid satisfy
``xdot | x ~ N(D x, A)`` with ``D = dC_a C^-1`` and
``A = d2C - dC_a C^-1 dC_b``. Derivative "observations" with variance
``gamma`` then have covariance ``A + gamma I``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from odin.errors import NumericalError
from odin.kernel import JITTER_MAX, JITTER_START, cholesky_jitter


def compute_D_A(C, dC_a, dC_b, d2C, chol=None, jitter_scale=None):
    """Return ``(D, A)`` for one state.

    ``chol`` is a lower Cholesky factor of the (jittered) ``C``; when omitted
    it is computed here with the standard jitter escalation relative to
    ``jitter_scale`` (default ``C[0, 0]``).
    """
    C = np.asarray(C, dtype=float)
    if chol is None:
        scale = float(np.max(np.diag(C))) if jitter_scale is None else jitter_scale
        chol, _ = cholesky_jitter(C, scale)
    # D^T = C^-1 dC_b because C is symmetric and dC_a = dC_b^T.
    CinvCb = linalg.cho_solve((chol, True), dC_b)
    D = CinvCb.T
    A = d2C - dC_a @ CinvCb
    A = 0.5 * (A + A.T)
    return D, A


@dataclass(frozen=True)
class DerivObsFactor:
    """Cholesky factor of ``A + gamma I`` (plus any jitter that was needed)."""

    L: np.ndarray
    gamma: float
    jitter: float

    @property
    def logdet(self):
        return 2.0 * float(np.sum(np.log(np.diag(self.L))))

    def solve(self, r):
        return linalg.cho_solve((self.L, True), r)

    def quad(self, r):
        z = linalg.solve_triangular(self.L, r, lower=True)
        return float(z @ z)

    def trace_inv(self):
        Linv = linalg.solve_triangular(self.L, np.eye(self.L.shape[0]), lower=True)
        return float(np.sum(Linv**2))


def deriv_obs_covariance(A, gamma) -> DerivObsFactor:
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    A = np.asarray(A, dtype=float)
    A = 0.5 * (A + A.T)
    n = A.shape[0]
    M = A + gamma * np.eye(n)
    scale = max(float(np.trace(A)) / n, 1e-300)
    L, jitter = cholesky_jitter(M, scale, try_exact=gamma > 0)
    return DerivObsFactor(L=L, gamma=float(gamma), jitter=jitter)


@dataclass(frozen=True)
class SpectralDerivCov:
    """Eigendecomposition ``A = Q diag(lam) Q^T`` shared across all ``gamma``.

    ``A + gamma I`` has the same eigenvectors for every ``gamma``, so solves,
    log-determinants and traces cost one matrix-vector product each time the
    optimizer moves ``gamma``. Eigenvalues are clipped from below at the
    jitter floor, which keeps ``A + gamma I`` positive definite even at
    ``gamma = 0``.
    """

    Q: np.ndarray
    lam: np.ndarray
    floor: float

    @classmethod
    def from_A(cls, A, rel_floor=JITTER_START):
        A = np.asarray(A, dtype=float)
        A = 0.5 * (A + A.T)
        n = A.shape[0]
        lam, Q = np.linalg.eigh(A)
        scale = max(float(np.trace(A)) / n, 0.0)
        if lam[0] < -JITTER_MAX * max(scale, 1e-300):
            raise NumericalError("derivative covariance is not positive semi-definite")
        floor = rel_floor * scale if scale > 0 else 0.0
        return cls(Q=Q, lam=np.maximum(lam, floor), floor=floor)
