"""Single-output GP regression: marginal likelihood, empirical Bayes,
posterior, and the standardization used before hyperparameter fitting."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from odin.derivative_gp import compute_D_A
from odin.errors import DomainError, FittingError, InvalidGridError
from odin.kernel import (
    KernelFamily,
    KernelHyperparams,
    build_cov_matrices,
    check_grid,
    cholesky_jitter,
    dk_dlog_lengthscale,
)
from odin.optimizer import Bounds, OptimizerSettings, minimize

_LOG_2PI = math.log(2.0 * math.pi)

# Restart draws (standardized units), log-uniform.
INIT_LENGTHSCALE = (0.1, 2.0)
INIT_AMPLITUDE = (0.5, 2.0)
INIT_SIGMA = (0.01, 1.0)

# Search box for the log-hyperparameters (standardized units).
AMPLITUDE_BOX = (1e-3, 1e3)
SIGMA_BOX = (1e-6, 1e1)
LENGTHSCALE_MAX = 1e2


@dataclass(frozen=True)
class StandardizationTransform:
    t_shift: float
    t_scale: float
    y_shift: np.ndarray
    y_scale: np.ndarray
    degenerate: tuple = ()

    def standardize_t(self, t):
        return (np.asarray(t, dtype=float) - self.t_shift) / self.t_scale

    def standardize_y(self, y):
        return (np.asarray(y, dtype=float) - self.y_shift) / self.y_scale

    def unstandardize_t(self, ts):
        return np.asarray(ts, dtype=float) * self.t_scale + self.t_shift

    def unstandardize_y(self, ys):
        return np.asarray(ys, dtype=float) * self.y_scale + self.y_shift


def fit_standardization(t, Y):
    """Population-std standardization of the grid and of each state column.

    A constant column keeps scale 1 and is listed in ``degenerate``.
    """
    t = check_grid(t)
    if t.size < 2:
        raise InvalidGridError("standardization needs at least two time points")
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    y_shift = Y.mean(axis=0)
    y_scale = Y.std(axis=0)
    degenerate = tuple(int(k) for k in np.flatnonzero(~(y_scale > 0)))
    if degenerate:
        warnings.warn(f"constant observations for states {degenerate}; using scale 1")
        y_scale = np.where(y_scale > 0, y_scale, 1.0)
    return StandardizationTransform(
        t_shift=float(t.mean()),
        t_scale=float(t.std()),
        y_shift=y_shift,
        y_scale=y_scale,
        degenerate=degenerate,
    )


def standardize(dataset):
    """Return ``(standardized dataset, transform)``."""
    tr = fit_standardization(dataset.t, dataset.y)
    return dataset.replace(t=tr.standardize_t(dataset.t), y=tr.standardize_y(dataset.y)), tr


def map_hyperparams_to_original(hp_std, transform, k=0):
    ys = float(transform.y_scale[k])
    return KernelHyperparams(
        amplitude=hp_std.amplitude * ys,
        lengthscale=hp_std.lengthscale * transform.t_scale,
        noise_sigma=hp_std.noise_sigma * ys,
    )


def _noisy_factor(C, hp, try_exact=True):
    n = C.shape[0]
    K = C + hp.noise_sigma**2 * np.eye(n)
    L, _ = cholesky_jitter(K, hp.amplitude**2, try_exact=try_exact)
    return L


def log_marginal_likelihood(y, t, family, hp, mean=0.0, return_grad=False):
    """``log N(y | mean, C + sigma^2 I)``.

    With ``return_grad`` also returns the gradient with respect to
    ``(log amplitude, log lengthscale, log sigma)``.
    """
    t = check_grid(t)
    y = np.asarray(y, dtype=float) - mean
    cov = build_cov_matrices(family, hp, t)
    L = _noisy_factor(cov.C, hp)
    alpha = linalg.cho_solve((L, True), y)
    n = y.size
    value = -0.5 * float(y @ alpha) - float(np.sum(np.log(np.diag(L)))) - 0.5 * n * _LOG_2PI
    if not return_grad:
        return value
    Kinv = linalg.cho_solve((L, True), np.eye(n))
    W = np.outer(alpha, alpha) - Kinv
    tau = t[:, None] - t[None, :]
    dK = (
        2.0 * cov.C,
        dk_dlog_lengthscale(family, hp, tau),
        2.0 * hp.noise_sigma**2 * np.eye(n),
    )
    grad = np.array([0.5 * float(np.sum(W * d)) for d in dK])
    return value, grad


def _hp_from_log(z):
    a, l, s = np.exp(z)
    return KernelHyperparams(amplitude=float(a), lengthscale=float(l), noise_sigma=float(s))


def fit_hyperparameters(y, t, family=KernelFamily.RBF, restarts=10, seed=0, settings=None):
    """Empirical Bayes: maximize the log marginal likelihood over log-parameters.

    Intended for standardized data. Each restart draws its starting point
    log-uniformly; the best converged restart wins.
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    t = check_grid(t)
    y = np.asarray(y, dtype=float)
    rng = np.random.default_rng(seed)
    settings = settings or OptimizerSettings(gtol=1e-6, max_iter=500)

    min_dt = float(np.min(np.diff(t))) if t.size > 1 else 1.0
    box = Bounds(
        np.log([AMPLITUDE_BOX[0], 0.5 * min_dt, SIGMA_BOX[0]]),
        np.log([AMPLITUDE_BOX[1], LENGTHSCALE_MAX, SIGMA_BOX[1]]),
    )

    def objective(z):
        hp = _hp_from_log(z)
        value, grad = log_marginal_likelihood(y, t, family, hp, return_grad=True)
        return -value, -grad

    best = None
    best_converged = None
    for _ in range(restarts):
        z0 = np.log([
            _log_uniform(rng, *INIT_AMPLITUDE),
            _log_uniform(rng, *INIT_LENGTHSCALE),
            _log_uniform(rng, *INIT_SIGMA),
        ])
        try:
            rep = minimize(objective, True, z0, box, settings)
        except (ValueError, ArithmeticError):
            continue
        if not math.isfinite(rep.fun):
            continue
        if best is None or rep.fun < best.fun:
            best = rep
        converged = rep.success or rep.grad_norm <= 1e-4 * (1.0 + abs(rep.fun))
        if converged and (best_converged is None or rep.fun < best_converged.fun):
            best_converged = rep
    if best_converged is None:
        raise FittingError(
            "empirical Bayes did not converge on any restart",
            best=_hp_from_log(best.x) if best is not None else None,
        )
    return _hp_from_log(best_converged.x)


def _log_uniform(rng, lo, hi):
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def posterior(y, t, family, hp, mean=0.0):
    """Posterior mean and covariance of the latent states at the grid."""
    t = check_grid(t)
    y = np.asarray(y, dtype=float)
    C = build_cov_matrices(family, hp, t).C
    L = _noisy_factor(C, hp)
    mu = mean + C @ linalg.cho_solve((L, True), y - mean)
    # sigma^2 (C + sigma^2 I)^-1 C, symmetrized against round-off.
    Sigma = hp.noise_sigma**2 * linalg.cho_solve((L, True), C)
    Sigma = 0.5 * (Sigma + Sigma.T)
    return mu, Sigma


@dataclass(frozen=True)
class GPState:
    """Per-state matrices for the derivative-augmented risk."""

    hyperparams: KernelHyperparams
    family: KernelFamily
    C: np.ndarray
    dC_a: np.ndarray
    dC_b: np.ndarray
    d2C: np.ndarray
    D: np.ndarray
    A: np.ndarray
    cholesky_C: np.ndarray
    jitter_used: float
    mean: float = 0.0


def build_gp_state(t, family, hp, mean=0.0) -> GPState:
    cov = build_cov_matrices(family, hp, t)
    L, jitter = cholesky_jitter(cov.C, hp.amplitude**2)
    n = cov.C.shape[0]
    C = cov.C + jitter * np.eye(n)
    D, A = compute_D_A(C, cov.dC_a, cov.dC_b, cov.d2C, chol=L)
    if not (np.all(np.isfinite(D)) and np.all(np.isfinite(A))):
        raise DomainError("non-finite derivative matrices")
    return GPState(
        hyperparams=hp,
        family=KernelFamily(family),
        C=C,
        dC_a=cov.dC_a,
        dC_b=cov.dC_b,
        d2C=cov.d2C,
        D=D,
        A=A,
        cholesky_C=L,
        jitter_used=jitter,
        mean=float(mean),
    )
