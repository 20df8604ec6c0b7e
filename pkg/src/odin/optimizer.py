"""Bound-constrained limited-memory BFGS.

Gradient projection handles the box: variables sitting on a bound whose
gradient pushes outward are frozen for the iteration, the quasi-Newton
direction is computed on the remaining free variables, and the step length
is capped at the first bound crossing. A strong-Wolfe line search picks the
step inside that cap. Every accepted iterate is clamped exactly onto the box.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

GRADIENT_TOL = "gradient-tolerance"
STEP_TOL = "step-tolerance"
MAX_ITER = "max-iterations"
LINE_SEARCH_FAILURE = "line-search-failure"


@dataclass(frozen=True)
class Bounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape:
            raise ValueError("lower and upper bounds differ in shape")
        if np.any(lo > hi):
            raise ValueError("lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unbounded(cls, n):
        return cls(np.full(n, -np.inf), np.full(n, np.inf))

    def project(self, x):
        return np.minimum(np.maximum(x, self.lower), self.upper)


@dataclass(frozen=True)
class OptimizerSettings:
    memory: int = 10
    gtol: float = 1e-6
    xtol: float = 1e-10
    ftol: float = 1e-13
    max_iter: int = 2000
    c1: float = 1e-4
    c2: float = 0.9
    max_linesearch: int = 30
    precond_every: int = 20


@dataclass
class OptimizerReport:
    x: np.ndarray
    fun: float
    grad_norm: float
    n_iter: int
    n_fev: int
    reason: str
    initial_fun: float
    grad: np.ndarray = field(repr=False, default=None)

    @property
    def success(self):
        return self.reason in (GRADIENT_TOL, STEP_TOL)


def projected_gradient(x, g, bounds):
    return x - bounds.project(x - g)


def _two_loop(q, pairs, h0):
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q = q - a * y
    r = h0(q)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ r)
        r = r + (a - b) * s
    return r


def _max_step(x, d, bounds):
    with np.errstate(divide="ignore", invalid="ignore"):
        to_lo = np.where(d < 0, (bounds.lower - x) / d, np.inf)
        to_hi = np.where(d > 0, (bounds.upper - x) / d, np.inf)
    steps = np.minimum(to_lo, to_hi)
    steps = np.where(np.isnan(steps), np.inf, steps)
    return max(float(np.min(steps)) if steps.size else math.inf, 0.0)


def _cubic_min(a, fa, da, b, fb, db):
    """Minimizer of the cubic interpolating (a, fa, da) and (b, fb, db)."""
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - da * db
    if disc < 0:
        return None
    d2 = math.copysign(math.sqrt(disc), b - a)
    denom = db - da + 2.0 * d2
    if denom == 0:
        return None
    return b - (b - a) * (db + d2 - d1) / denom


class _LineSearch:
    def __init__(self, evaluate, f0, dphi0, settings):
        self.evaluate = evaluate
        self.f0 = f0
        self.dphi0 = dphi0
        self.c1 = settings.c1
        self.c2 = settings.c2
        self.budget = settings.max_linesearch
        self.n_eval = 0

    def _phi(self, alpha):
        self.n_eval += 1
        f, g, dphi = self.evaluate(alpha)
        return f, g, dphi

    def _armijo(self, alpha, f):
        return math.isfinite(f) and f <= self.f0 + self.c1 * alpha * self.dphi0

    def _curvature(self, dphi):
        return abs(dphi) <= -self.c2 * self.dphi0

    def _approx_wolfe(self, f, dphi):
        # Near a minimizer the decrease drops below round-off in f; accept a
        # step that keeps f flat to rounding and meets the curvature test.
        flat = math.isfinite(f) and f <= self.f0 + 1e-12 * (1.0 + abs(self.f0))
        return flat and dphi is not None and math.isfinite(dphi) and self._curvature(dphi)

    def run(self, alpha, alpha_max):
        prev = (0.0, self.f0, None, self.dphi0)
        first = True
        while self.n_eval < self.budget:
            f, g, dphi = self._phi(alpha)
            cur = (alpha, f, g, dphi)
            if self._approx_wolfe(f, dphi):
                return cur
            if not self._armijo(alpha, f) or (not first and f >= prev[1]):
                return self._zoom(prev, cur)
            if self._curvature(dphi):
                return cur
            if dphi >= 0:
                return self._zoom(cur, prev)
            if alpha >= alpha_max:
                # Bound reached with sufficient decrease.
                return cur
            prev = cur
            first = False
            alpha = min(4.0 * alpha, alpha_max)
        return prev if prev[0] > 0 else None

    def _zoom(self, lo, hi):
        while self.n_eval < self.budget:
            a_lo, f_lo, _, d_lo = lo
            a_hi, f_hi, _, d_hi = hi
            width = abs(a_hi - a_lo)
            if width <= 1e-16 * max(1.0, abs(a_lo)):
                break
            trial = None
            if math.isfinite(f_hi) and d_hi is not None and math.isfinite(d_hi):
                trial = _cubic_min(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi)
            left, right = sorted((a_lo, a_hi))
            margin = 0.1 * width
            if trial is None or not (left + margin <= trial <= right - margin):
                trial = 0.5 * (a_lo + a_hi)
            f, g, dphi = self._phi(trial)
            cur = (trial, f, g, dphi)
            if self._approx_wolfe(f, dphi):
                return cur
            if not self._armijo(trial, f) or f >= f_lo:
                hi = cur
            else:
                if self._curvature(dphi):
                    return cur
                if dphi * (a_hi - a_lo) >= 0:
                    hi = lo
                lo = cur
        return lo if lo[0] > 0 else None


def minimize(objective, gradient, x0, bounds=None, settings=None, callback=None,
             preconditioner=None):
    """Minimize ``objective`` over a box with projected L-BFGS.

    Parameters
    ----------
    objective : callable
        ``objective(x) -> float``. When ``gradient`` is ``True`` it must
        return ``(value, gradient)`` instead. A non-finite value (or a
        raised ``ArithmeticError``/``ValueError`` during the line search) is
        treated as an infeasible trial point and the step is shortened.
    gradient : callable or True
        ``gradient(x) -> ndarray``.
    x0 : array_like
        Starting point; projected onto ``bounds`` if outside.
    bounds : Bounds, optional
    settings : OptimizerSettings, optional
    callback : callable, optional
        Called as ``callback(x, f)`` after every accepted iterate.
    preconditioner : callable, optional
        ``preconditioner(x) -> apply`` where ``apply(v, free)`` approximates
        the inverse Hessian restricted to the boolean mask ``free`` of
        variables not held on a bound. It is used as the initial matrix of
        the two-loop recursion and rebuilt every ``settings.precond_every``
        iterations. Without it the usual scaled identity is used.

    Returns
    -------
    OptimizerReport
    """
    settings = settings or OptimizerSettings()
    x = np.array(x0, dtype=float).ravel()
    n = x.size
    bounds = bounds or Bounds.unbounded(n)
    if bounds.lower.shape != (n,):
        raise ValueError("bounds do not match the dimension of x0")

    n_fev = 0

    def evaluate(z, strict=False):
        nonlocal n_fev
        n_fev += 1
        try:
            if gradient is True:
                f, g = objective(z)
            else:
                f = objective(z)
                g = gradient(z) if math.isfinite(f) else None
        except (ArithmeticError, ValueError):
            if strict:
                raise
            return math.inf, None
        f = float(f)
        if g is not None:
            g = np.asarray(g, dtype=float).ravel()
            if not np.all(np.isfinite(g)):
                f = math.inf
        return f, g

    x = bounds.project(x)
    f, g = evaluate(x, strict=True)
    if not math.isfinite(f) or g is None:
        raise ValueError("objective is not finite at the starting point")
    f_init = f
    pairs = deque(maxlen=settings.memory)
    memory_scale = 1.0
    h0_apply, h0_built = None, 0
    reason = MAX_ITER
    n_iter = 0

    while n_iter < settings.max_iter:
        pg = projected_gradient(x, g, bounds)
        pg_norm = float(np.max(np.abs(pg))) if n else 0.0
        if pg_norm <= settings.gtol * (1.0 + abs(f)):
            reason = GRADIENT_TOL
            break

        at_lo = (x <= bounds.lower) & (g > 0)
        at_hi = (x >= bounds.upper) & (g < 0)
        free = ~(at_lo | at_hi)
        g_free = np.where(free, g, 0.0)

        if preconditioner is not None and (
            h0_apply is None or n_iter - h0_built >= settings.precond_every
        ):
            h0_apply = preconditioner(x.copy())
            h0_built = n_iter

        accepted = None
        for attempt in range(2):
            if attempt == 0 and (pairs or h0_apply is not None):
                if h0_apply is not None:
                    h0 = lambda q, fr=free: np.where(fr, h0_apply(np.where(fr, q, 0.0), fr), 0.0)
                else:
                    h0 = lambda q, s=memory_scale: s * q
                d = -_two_loop(g_free, pairs, h0)
                d = np.where(free, d, 0.0)
                alpha0 = 1.0
            else:
                pairs.clear()
                memory_scale = 1.0
                d = -g_free
                alpha0 = min(1.0, 1.0 / max(float(np.max(np.abs(d))), 1e-300))
            dphi0 = float(g @ d)
            if not dphi0 < 0:
                pairs.clear()
                continue
            alpha_max = _max_step(x, d, bounds)
            if alpha_max <= 0:
                continue
            alpha0 = min(alpha0, alpha_max)

            def phi(alpha, d=d, alpha_max=alpha_max):
                z = _step_point(x, d, alpha, alpha_max, bounds)
                fz, gz = evaluate(z)
                dz = float(gz @ d) if gz is not None else math.nan
                return fz, (z, gz), dz

            search = _LineSearch(phi, f, dphi0, settings)
            accepted = search.run(alpha0, alpha_max)
            if accepted is not None:
                break

        if accepted is None:
            reason = LINE_SEARCH_FAILURE
            break

        n_iter += 1
        _, f_new, (x_new, g_new), _ = accepted
        s = x_new - x
        yv = g_new - g
        sy = float(s @ yv)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(yv):
            pairs.append((s, yv, 1.0 / sy))
            memory_scale = sy / float(yv @ yv)
        step = float(np.max(np.abs(s))) if n else 0.0
        decrease = f - f_new
        x, f, g = x_new, f_new, g_new
        if callback is not None:
            callback(x.copy(), f)
        if step <= settings.xtol or decrease <= settings.ftol * max(abs(f), 1.0):
            pg = projected_gradient(x, g, bounds)
            if float(np.max(np.abs(pg))) <= settings.gtol * (1.0 + abs(f)):
                reason = GRADIENT_TOL
            else:
                reason = STEP_TOL
            break

    pg = projected_gradient(x, g, bounds)
    return OptimizerReport(
        x=x,
        fun=f,
        grad_norm=float(np.max(np.abs(pg))) if n else 0.0,
        n_iter=n_iter,
        n_fev=n_fev,
        reason=reason,
        initial_fun=f_init,
        grad=g,
    )


def _step_point(x, d, alpha, alpha_max, bounds):
    z = x + alpha * d
    if alpha >= alpha_max:
        # Snap the blocking variables exactly onto their bounds.
        with np.errstate(divide="ignore", invalid="ignore"):
            hit_lo = (d < 0) & np.isclose((bounds.lower - x) / d, alpha_max, rtol=1e-12, atol=0)
            hit_hi = (d > 0) & np.isclose((bounds.upper - x) / d, alpha_max, rtol=1e-12, atol=0)
        z = np.where(hit_lo, bounds.lower, z)
        z = np.where(hit_hi, bounds.upper, z)
    return bounds.project(z)
