"""The ODE-informed regression risk and its gradient.

For states ``x`` (N x K), ODE parameters ``theta`` and derivative-noise
variances ``gamma`` (one per state), with ``xc_k = x_k - m_k`` and
``r_k = f_k(x, theta) - D_k xc_k``::

    R = sum_k  xc_k^T C_k^-1 xc_k
             + |x_k - y_k|^2 / sigma_k^2
             + r_k^T (A_k + gamma_k I)^-1 r_k
             + log det(A_k + gamma_k I)

``m_k`` is a constant prior mean (zero unless the caller supplies the
standardization shift). All per-state matrices are stacked into
``(K, N, N)`` arrays so one evaluation is a handful of batched products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg, sparse
from scipy.sparse import linalg as splinalg

from odin.derivative_gp import SpectralDerivCov

GAMMA_MIN = 1e-6


@dataclass(frozen=True)
class RiskContext:
    y: np.ndarray          # (N, K)
    sigma: np.ndarray      # (K,)
    system: object
    C_inv_chol: np.ndarray  # (K, N, N) inverse of the lower Cholesky factor of C_k
    D: np.ndarray          # (K, N, N)
    Q: np.ndarray          # (K, N, N) eigenvectors of A_k
    lam: np.ndarray        # (K, N) eigenvalues of A_k (floored)
    prior_mean: np.ndarray  # (K,)
    gamma: np.ndarray      # (K,) used by risk_tilde
    gamma_min: float = GAMMA_MIN

    @property
    def N(self):
        return self.y.shape[0]

    @property
    def K(self):
        return self.y.shape[1]

    @property
    def P(self):
        return self.system.P

    @classmethod
    def from_gp_states(cls, states, y, system, gamma=1.0, gamma_min=GAMMA_MIN, sigma=None):
        """Build a context from one ``GPState`` per state column of ``y``."""
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        N, K = y.shape
        if len(states) != K:
            raise ValueError(f"{len(states)} GP states for {K} observed states")
        if system is not None and system.K != K:
            raise ValueError(f"system has {system.K} states, data has {K}")
        eye = np.eye(N)
        Linv = np.stack([
            linalg.solve_triangular(s.cholesky_C, eye, lower=True) for s in states
        ])
        spectra = [SpectralDerivCov.from_A(s.A) for s in states]
        if sigma is None:
            sigma = np.array([s.hyperparams.noise_sigma for s in states])
        sigma = np.asarray(sigma, dtype=float)
        if np.any(sigma <= 0):
            raise ValueError("observation noise sigma must be positive in the risk")
        gamma = np.broadcast_to(np.asarray(gamma, dtype=float), (K,)).copy()
        return cls(
            y=y,
            sigma=sigma,
            system=system,
            C_inv_chol=Linv,
            D=np.stack([s.D for s in states]),
            Q=np.stack([sp.Q for sp in spectra]),
            lam=np.stack([sp.lam for sp in spectra]),
            prior_mean=np.array([s.mean for s in states], dtype=float),
            gamma=gamma,
            gamma_min=gamma_min,
        )

    # -- flat parameter vector layout: vec(x) row-major, theta, gamma ------
    def pack(self, x, theta, gamma):
        return np.concatenate([np.asarray(x, float).ravel(), np.atleast_1d(theta), gamma])

    def unpack(self, z):
        nx = self.N * self.K
        x = z[:nx].reshape(self.N, self.K)
        theta = z[nx:nx + self.P]
        gamma = z[nx + self.P:]
        return x, theta, gamma


def _batched_mv(M, v):
    """``M[k] @ v[k]`` for stacks ``M`` (K, N, N) and ``v`` (K, N)."""
    return np.einsum("kij,kj->ki", M, v)


def _batched_mtv(M, v):
    return np.einsum("kji,kj->ki", M, v)


def _terms(x, F, gamma, ctx):
    x = np.asarray(x, dtype=float)
    F = np.asarray(F, dtype=float)
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), (ctx.K,))
    xc = (x - ctx.prior_mean).T                      # (K, N)
    u = _batched_mv(ctx.C_inv_chol, xc)               # L^-1 xc
    obs = (x - ctx.y) / ctx.sigma                     # (N, K)
    r = F.T - _batched_mv(ctx.D, xc)                  # (K, N)
    rq = _batched_mtv(ctx.Q, r)                       # Q^T r
    denom = ctx.lam + gamma[:, None]                  # (K, N)
    return xc, u, obs, r, rq, denom


def risk_tilde(x, F, ctx, gamma=None):
    """Quadratic risk with explicit derivative observations ``F`` (N x K)."""
    gamma = ctx.gamma if gamma is None else gamma
    _, u, obs, _, rq, denom = _terms(x, F, gamma, ctx)
    return float(np.sum(u**2) + np.sum(obs**2) + np.sum(rq**2 / denom))


def log_det_term(gamma, ctx):
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), (ctx.K,))
    return float(np.sum(np.log(ctx.lam + gamma[:, None])))


def risk_full(x, theta, gamma, ctx):
    F = ctx.system.f(x, theta)
    return risk_tilde(x, F, ctx, gamma) + log_det_term(gamma, ctx)


def risk_and_gradient(x, theta, gamma, ctx):
    """Return ``(R, dR/dx (N x K), dR/dtheta (P,), dR/dgamma (K,))``."""
    x = np.asarray(x, dtype=float)
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    gamma = np.asarray(gamma, dtype=float)
    F = ctx.system.f(x, theta)
    xc, u, obs, r, rq, denom = _terms(x, F, gamma, ctx)
    value = (
        np.sum(u**2) + np.sum(obs**2) + np.sum(rq**2 / denom) + np.sum(np.log(denom))
    )

    wq = rq / denom
    w = np.einsum("kij,kj->ki", ctx.Q, wq)            # (A + gamma I)^-1 r, (K, N)
    W = w.T                                           # (N, K)

    g_x = 2.0 * _batched_mtv(ctx.C_inv_chol, u).T     # 2 C^-1 xc
    g_x += 2.0 * obs / ctx.sigma
    g_x += 2.0 * ctx.system.vjp_x(x, theta, W)
    g_x -= 2.0 * _batched_mtv(ctx.D, w).T
    g_theta = 2.0 * ctx.system.vjp_theta(x, theta, W)
    g_gamma = -np.sum(wq**2, axis=1) + np.sum(1.0 / denom, axis=1)
    return float(value), g_x, np.asarray(g_theta, dtype=float), g_gamma


def risk_gradient(x, theta, gamma, ctx):
    _, gx, gt, gg = risk_and_gradient(x, theta, gamma, ctx)
    return gx, gt, gg


def flat_objective(ctx, fixed_gamma=None):
    """Objective ``z -> (R, grad)`` over the packed vector.

    With ``fixed_gamma`` the vector holds only ``vec(x)`` and ``theta``.
    """
    if fixed_gamma is None:
        def objective(z):
            x, theta, gamma = ctx.unpack(z)
            val, gx, gt, gg = risk_and_gradient(x, theta, gamma, ctx)
            return val, np.concatenate([gx.ravel(), gt, gg])
        return objective

    gamma = np.broadcast_to(np.asarray(fixed_gamma, dtype=float), (ctx.K,))
    nx = ctx.N * ctx.K

    def objective(z):
        x = z[:nx].reshape(ctx.N, ctx.K)
        theta = z[nx:]
        val, gx, gt, _ = risk_and_gradient(x, theta, gamma, ctx)
        return val, np.concatenate([gx.ravel(), gt])
    return objective



def gauss_newton_matrix(x, theta, gamma, ctx, with_gamma=True):
    """Positive semi-definite curvature model of ``R`` over the packed vector.

    The state and parameter block is the Gauss-Newton matrix of the three
    quadratic terms. The variance block is the Fisher information of the
    derivative-noise variances, ``tr((A + gamma I)^-2)``, with no coupling
    to the other variables. Returned as a sparse CSC matrix; the state
    block only couples states that share an equation.
    """
    x = np.asarray(x, dtype=float)
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    N, K, P = ctx.N, ctx.K, ctx.P
    nx = N * K
    n = nx + P
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), (K,))
    rows, cols, vals = ctx.system.jac_x_entries(x, theta)   # vals (N, m)
    Jt = ctx.system.jac_theta(x, theta)                      # (N, K, P)
    scale = 1.0 / np.sqrt(ctx.lam + gamma[:, None])          # (K, N)
    time_idx = np.arange(N)

    # Each equation k contributes slab^T slab, where slab is its weighted
    # residual Jacobian restricted to the (dense) columns it touches.
    data, ri, ci = [], [], []
    for k in range(K):
        sel = rows == k
        nbrs = np.unique(np.append(cols[sel], k))
        col_of = {int(l): j for j, l in enumerate(nbrs)}
        slab = np.zeros((N, N, nbrs.size))       # (row i, time j, state)
        for l, v in zip(cols[sel], vals[:, sel].T):
            slab[time_idx, time_idx, col_of[int(l)]] += v
        slab[:, :, col_of[k]] -= ctx.D[k]
        slab = np.hstack([slab.reshape(N, -1), Jt[:, k, :]])
        allcols = np.concatenate([(time_idx[:, None] * K + nbrs[None, :]).ravel(), nx + np.arange(P)])
        wslab = (ctx.Q[k].T @ slab) * scale[k][:, None]
        data.append((2.0 * (wslab.T @ wslab)).ravel())
        ri.append(np.repeat(allcols, allcols.size))
        ci.append(np.tile(allcols, allcols.size))
    C_inv = np.einsum("kji,kjl->kil", ctx.C_inv_chol, ctx.C_inv_chol)
    pr = (time_idx[:, None] * K)[None, :, :] + np.arange(K)[:, None, None]   # (K, N, 1)
    data.append(2.0 * C_inv.ravel())
    ri.append(np.broadcast_to(pr, (K, N, N)).ravel())
    ci.append(np.broadcast_to(np.swapaxes(pr, 1, 2), (K, N, N)).ravel())
    data.append(np.tile(2.0 / ctx.sigma**2, N))
    ri.append(np.arange(nx))
    ci.append(np.arange(nx))
    H = sparse.coo_matrix(
        (np.concatenate(data), (np.concatenate(ri), np.concatenate(ci))), shape=(n, n)
    )
    if with_gamma:
        fisher = np.sum((scale**2) ** 2, axis=1)
        H = sparse.block_diag([H, sparse.diags(fisher)])
    return H.tocsc()


def _state_major(N, K, n):
    nx = N * K
    return np.concatenate([np.arange(nx).reshape(N, K).T.ravel(), np.arange(nx, n)])


def gauss_newton_preconditioner(ctx, fixed_gamma=None, profiled=False, dense_limit=500):
    """Preconditioner for :func:`odin.optimizer.minimize` on ``flat_objective``.

    Returns ``build(z) -> apply`` where ``apply(v, free)`` solves with the
    Gauss-Newton matrix restricted to the free variables. The variance block
    is diagonal, so bound changes on ``gamma`` need no refactorization; the
    state and parameter block is refactorized only when its own free set
    changes. A small relative ridge keeps weakly identified parameters from
    producing huge steps. Blocks larger than ``dense_limit`` variables use a
    sparse LU. With ``fixed_gamma`` or ``profiled`` the vector holds only
    ``vec(x)`` and ``theta``, matching ``flat_objective(ctx, fixed_gamma)``
    and ``profiled_objective(ctx)``.
    """
    nx = ctx.N * ctx.K
    nxp = nx + ctx.P
    joint = fixed_gamma is None and not profiled

    def build(z):
        x, theta = z[:nx].reshape(ctx.N, ctx.K), z[nx:nxp]
        if joint:
            gamma = z[nxp:]
        elif profiled:
            gamma = profiled_gamma(x, theta, ctx)
        else:
            gamma = fixed_gamma
        H = gauss_newton_matrix(x, theta, gamma, ctx, with_gamma=False)
        fisher = None
        if joint:
            fisher = np.sum(1.0 / (ctx.lam + np.asarray(gamma)[:, None]) ** 2, axis=1)
        cache = {}

        def apply(v, free):
            key = free[:nxp].tobytes()
            if key not in cache:
                cache.clear()
                cache[key] = _factorize(H, free[:nxp], ctx.N, ctx.K, dense_limit)
            out = np.empty_like(v)
            out[:nxp] = cache[key](v[:nxp])
            if joint:
                out[nxp:] = v[nxp:] / fisher
            return out
        return apply

    return build


def _factorize(H, free, N, K, dense_limit):
    keep = sparse.diags(free.astype(float))
    H = keep @ H @ keep
    diag = H.diagonal()
    scale = float(np.mean(diag[free])) if np.any(free) else 1.0
    fill = np.where(free, 0.0, scale) + 1e-10 * scale
    H = (H + sparse.diags(fill)).tocsc()
    if H.shape[0] <= dense_limit:
        Hd = H.toarray()
        ridge = 0.0
        for _ in range(8):
            try:
                factor = linalg.cho_factor(Hd + ridge * np.eye(len(Hd)))
                return lambda v: linalg.cho_solve(factor, v)
            except linalg.LinAlgError:
                ridge = 100.0 * max(ridge, 1e-10 * scale)
        return lambda v: v / scale
    # State-major order makes the matrix cyclic block-banded, which the
    # natural column order factorizes with fill linear in K.
    perm = _state_major(N, K, H.shape[0])
    try:
        lu = splinalg.splu(
            H[perm][:, perm].tocsc(), permc_spec="NATURAL",
            options=dict(SymmetricMode=True),
        )
    except RuntimeError:
        return lambda v: v / scale
    inv = np.argsort(perm)
    return lambda v: lu.solve(v[perm])[inv]


def optimal_gamma(rq, lam, gamma_min=GAMMA_MIN, n_grid=64, n_bisect=60):
    """Per-state minimizer of ``sum_i rq_i^2/(lam_i+g) + log(lam_i+g)`` over ``g >= gamma_min``.

    ``rq`` and ``lam`` are ``(K, N)``: the residual in the eigenbasis of
    ``A_k`` and the eigenvalues. The one-dimensional problems can have
    several local minima, so a log-spaced scan picks the best bracket and
    bisection on the derivative refines it. A minimizer on the bound is
    returned as exactly ``gamma_min``.
    """
    rho = rq**2
    K = rho.shape[0]
    # Past max(rho) the derivative is positive, so the minimizer is below it.
    upper = np.maximum(rho.max(axis=1), gamma_min) * 2.0 + gamma_min
    grid = np.exp(np.linspace(0.0, 1.0, n_grid)[None, :]
                  * np.log(upper / gamma_min)[:, None]) * gamma_min    # (K, G)

    def value(g):
        d = lam[:, None, :] + g[:, :, None]
        return np.sum(rho[:, None, :] / d + np.log(d), axis=2)

    def slope(g):
        d = lam + g[:, None]
        return np.sum(1.0 / d - rho / d**2, axis=1)

    vals = value(grid)
    best = np.argmin(vals, axis=1)
    rows = np.arange(K)
    lo = grid[rows, np.maximum(best - 1, 0)]
    hi = grid[rows, np.minimum(best + 1, n_grid - 1)]
    for _ in range(n_bisect):
        mid = np.sqrt(lo * hi)
        pos = slope(mid) > 0
        hi = np.where(pos, mid, hi)
        lo = np.where(pos, lo, mid)
    gamma = np.sqrt(lo * hi)
    at_bound = (best == 0) & (slope(np.full(K, gamma_min)) >= 0)
    gamma = np.where(at_bound, gamma_min, gamma)
    # never worse than the best scanned point
    worse = value(gamma[:, None])[:, 0] > vals[rows, best]
    return np.where(worse, grid[rows, best], gamma)


def profiled_objective(ctx):
    """Objective ``z -> (R, grad)`` over ``vec(x)`` and ``theta`` with every
    ``gamma_k`` set to its exact minimizer. The gradient is that of ``R`` at
    the optimal ``gamma`` (envelope theorem)."""
    nx = ctx.N * ctx.K

    def objective(z):
        x = z[:nx].reshape(ctx.N, ctx.K)
        theta = z[nx:]
        gamma = profiled_gamma(x, theta, ctx)
        val, gx, gt, _ = risk_and_gradient(x, theta, gamma, ctx)
        return val, np.concatenate([gx.ravel(), gt])
    return objective


def profiled_gamma(x, theta, ctx):
    F = ctx.system.f(x, theta)
    *_, rq, _ = _terms(x, F, ctx.gamma, ctx)
    return optimal_gamma(rq, ctx.lam, ctx.gamma_min)
