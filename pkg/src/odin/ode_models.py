"""Parametric ODE systems used as benchmarks.

Every vector field works on a single state (shape ``(K,)``) or on a stack
of states (shape ``(N, K)``); Jacobians come back with matching leading
dimensions, ``(..., K, K)`` for ``jac_x`` and ``(..., K, P)`` for
``jac_theta``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from odin.errors import DomainError

PT_POLE_EPS = 1e-12
FHN_CONVENTIONS = ("standard", "paper")


@dataclass(frozen=True)
class Canonical:
    theta: np.ndarray
    x0: np.ndarray
    t: np.ndarray
    noise_presets: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ODESystem:
    """Vector field ``f(x, theta)`` with analytic Jacobians.

    ``vjp_x`` / ``vjp_theta`` compute ``sum_k W[..., k] * d f_k / d(x | theta)``
    and default to contracting the dense Jacobians. High-dimensional systems
    override them, and ``jac_x_entries``, to avoid materializing ``K x K``
    blocks.
    """

    name: str
    K: int
    P: int
    rhs: Callable
    jac_x_fn: Callable
    jac_theta_fn: Callable
    canonical: Optional[Canonical] = None
    vjp_x_fn: Optional[Callable] = None
    vjp_theta_fn: Optional[Callable] = None
    state_names: tuple = ()
    jac_x_entries_fn: Optional[Callable] = None

    def _check(self, x, theta):
        x = np.asarray(x, dtype=float)
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if x.shape[-1] != self.K:
            raise ValueError(f"{self.name}: expected {self.K} states, got {x.shape[-1]}")
        if theta.shape != (self.P,):
            raise ValueError(f"{self.name}: expected {self.P} parameters, got {theta.shape}")
        return x, theta

    def f(self, x, theta):
        x, theta = self._check(x, theta)
        return self.rhs(x, theta)

    def jac_x(self, x, theta):
        x, theta = self._check(x, theta)
        return self.jac_x_fn(x, theta)

    def jac_theta(self, x, theta):
        x, theta = self._check(x, theta)
        return self.jac_theta_fn(x, theta)

    def jac_x_entries(self, x, theta):
        """Structural nonzeros of ``jac_x`` as ``(rows, cols, values)``.

        ``values`` has shape ``(..., m)`` and entry ``j`` is
        ``d f_{rows[j]} / d x_{cols[j]}``. Repeated index pairs add up.
        """
        x, theta = self._check(x, theta)
        if self.jac_x_entries_fn is not None:
            return self.jac_x_entries_fn(x, theta)
        J = self.jac_x_fn(x, theta)
        rows, cols = np.divmod(np.arange(self.K * self.K), self.K)
        return rows, cols, J.reshape(J.shape[:-2] + (self.K * self.K,))

    def vjp_x(self, x, theta, w):
        x, theta = self._check(x, theta)
        if self.vjp_x_fn is not None:
            return self.vjp_x_fn(x, theta, w)
        return np.einsum("...j,...jk->...k", w, self.jac_x_fn(x, theta))

    def vjp_theta(self, x, theta, w):
        """Sum over all leading dimensions of ``w^T d f / d theta``."""
        x, theta = self._check(x, theta)
        if self.vjp_theta_fn is not None:
            return self.vjp_theta_fn(x, theta, w)
        J = self.jac_theta_fn(x, theta)
        w = np.asarray(w, dtype=float)
        return np.einsum("nj,njp->p", w.reshape(-1, self.K), J.reshape(-1, self.K, self.P))

    def __call__(self, x, theta):
        return self.f(x, theta)


def _stack(*cols):
    return np.stack(cols, axis=-1)


def _blocks(rows):
    """Assemble ``(..., R, C)`` arrays from nested lists of broadcastable arrays."""
    return np.stack([np.stack(np.broadcast_arrays(*r), axis=-1) for r in rows], axis=-2)


# --------------------------------------------------------------------------
# Lotka-Volterra and its misspecified variants
# --------------------------------------------------------------------------

# Each equation is (n_params, rhs, d/dx1, d/dx2, d/dtheta list).
def _lv_true_first(x1, x2, p):
    return (
        p[0] * x1 - p[1] * x1 * x2,
        (p[0] - p[1] * x2, -p[1] * x1),
        (x1, -x1 * x2),
    )


def _lv_true_second(x1, x2, p):
    return (
        -p[0] * x2 + p[1] * x1 * x2,
        (p[1] * x2, -p[0] + p[1] * x1),
        (-x2, x1 * x2),
    )


def _lv_wrong_first(x1, x2, p):
    return (
        p[0] * x1**2 + p[1] * x2,
        (2.0 * p[0] * x1, p[1] + 0.0 * x1),
        (x1**2, x2),
    )


def _lv_wrong_second(x1, x2, p):
    return (
        -p[0] * x2,
        (0.0 * x1, -p[0] + 0.0 * x2),
        (-x2,),
    )


def _two_state_system(name, first, n_first, second, n_second, canonical):
    P = n_first + n_second

    def parts(x, theta):
        x1, x2 = x[..., 0], x[..., 1]
        return first(x1, x2, theta[:n_first]), second(x1, x2, theta[n_first:])

    def rhs(x, theta):
        (f1, _, _), (f2, _, _) = parts(x, theta)
        return _stack(f1, f2)

    def jac_x(x, theta):
        (_, j1, _), (_, j2, _) = parts(x, theta)
        return _blocks([j1, j2])

    def jac_theta(x, theta):
        (_, _, t1), (_, _, t2) = parts(x, theta)
        zero = np.zeros_like(x[..., 0])
        row1 = list(t1) + [zero] * n_second
        row2 = [zero] * n_first + list(t2)
        return _blocks([row1, row2])

    return ODESystem(
        name=name, K=2, P=P, rhs=rhs, jac_x_fn=jac_x, jac_theta_fn=jac_theta,
        canonical=canonical, state_names=("x1", "x2"),
    )


def _lv_canonical():
    return Canonical(
        theta=np.array([2.0, 1.0, 4.0, 1.0]),
        x0=np.array([5.0, 3.0]),
        t=np.linspace(0.0, 2.0, 20),
        noise_presets={"low": ("sigma", 0.1), "high": ("sigma", 0.5)},
    )


def lotka_volterra():
    return _two_state_system(
        "lv", _lv_true_first, 2, _lv_true_second, 2, _lv_canonical()
    )


def lv_misspecified(i, j):
    """Candidate model ``M_{i,j}``; ``0`` swaps in the wrong equation for that state."""
    if i not in (0, 1) or j not in (0, 1):
        raise ValueError("model indices must be 0 or 1")
    first, n1 = (_lv_true_first, 2) if i == 1 else (_lv_wrong_first, 2)
    second, n2 = (_lv_true_second, 2) if j == 1 else (_lv_wrong_second, 1)
    base = _lv_canonical()
    canonical = Canonical(theta=None, x0=base.x0, t=base.t, noise_presets=base.noise_presets)
    if i == 1 and j == 1:
        canonical = base
    return _two_state_system(f"lv-m{i}{j}", first, n1, second, n2, canonical)


# --------------------------------------------------------------------------
# FitzHugh-Nagumo
# --------------------------------------------------------------------------

def fitzhugh_nagumo(sign_convention="standard"):
    """FitzHugh-Nagumo neuron model with ``theta = [a, b, c]``.

    ``"standard"``::

        dV/dt = c (V - V^3/3 + R)
        dR/dt = -(V - a + b R) / c

    which settles on a limit cycle at ``theta = [0.2, 0.2, 3]``.

    ``"paper"`` evaluates the benchmark-table formula exactly as printed,
    with the first parameter as the time-scale and no minus sign::

        dV/dt = theta1 (V - V^3/3 + R)
        dR/dt = (V - theta2 + theta3 R) / theta1
    """
    if sign_convention not in FHN_CONVENTIONS:
        raise ValueError(f"sign_convention must be one of {FHN_CONVENTIONS}")
    if sign_convention == "standard":
        sgn, ic, ia, ib = -1.0, 2, 0, 1
    else:
        sgn, ic, ia, ib = 1.0, 0, 1, 2

    def rhs(x, th):
        V, R = x[..., 0], x[..., 1]
        c, a, b = th[ic], th[ia], th[ib]
        return _stack(c * (V - V**3 / 3.0 + R), sgn / c * (V - a + b * R))

    def jac_x(x, th):
        V, R = x[..., 0], x[..., 1]
        c, b = th[ic], th[ib]
        return _blocks([
            [c * (1.0 - V**2), c + 0.0 * V],
            [sgn / c + 0.0 * V, sgn * b / c + 0.0 * V],
        ])

    def jac_theta(x, th):
        V, R = x[..., 0], x[..., 1]
        c, a, b = th[ic], th[ia], th[ib]
        zero = 0.0 * V
        d_v = [zero, zero, zero]
        d_r = [zero, zero, zero]
        d_v[ic] = V - V**3 / 3.0 + R
        d_r[ic] = -sgn / c**2 * (V - a + b * R)
        d_r[ia] = -sgn / c + zero
        d_r[ib] = sgn * R / c
        return _blocks([d_v, d_r])

    canonical = Canonical(
        theta=np.array([0.2, 0.2, 3.0]),
        x0=np.array([-1.0, 1.0]),
        t=np.linspace(0.0, 10.0, 20),
        noise_presets={"low": ("snr", 100.0), "high": ("snr", 10.0)},
    )
    name = "fhn" if sign_convention == "standard" else "fhn-paper"
    return ODESystem(
        name=name, K=2, P=3, rhs=rhs, jac_x_fn=jac_x, jac_theta_fn=jac_theta,
        canonical=canonical, state_names=("V", "R"),
    )


# --------------------------------------------------------------------------
# Protein transduction
# --------------------------------------------------------------------------

def _pt_guard(Rpp, th6):
    denom = th6 + Rpp
    if np.any(denom <= PT_POLE_EPS):
        raise DomainError("protein transduction: theta6 + R_pp must stay positive")
    return denom


def protein_transduction():
    def rhs(x, th):
        S, dS, R, RS, Rpp = np.moveaxis(x, -1, 0)
        t1, t2, t3, t4, t5, t6 = th
        denom = _pt_guard(Rpp, t6)
        mm = t5 * Rpp / denom
        return _stack(
            -t1 * S - t2 * S * R + t3 * RS,
            t1 * S,
            -t2 * S * R + t3 * RS + mm,
            t2 * S * R - t3 * RS - t4 * RS,
            t4 * RS - mm,
        )

    def jac_x(x, th):
        S, dS, R, RS, Rpp = np.moveaxis(x, -1, 0)
        t1, t2, t3, t4, t5, t6 = th
        denom = _pt_guard(Rpp, t6)
        dmm = t5 * t6 / denom**2
        z = 0.0 * S
        return _blocks([
            [-t1 - t2 * R, z, -t2 * S, t3 + z, z],
            [t1 + z, z, z, z, z],
            [-t2 * R, z, -t2 * S, t3 + z, dmm],
            [t2 * R, z, t2 * S, -t3 - t4 + z, z],
            [z, z, z, t4 + z, -dmm],
        ])

    def jac_theta(x, th):
        S, dS, R, RS, Rpp = np.moveaxis(x, -1, 0)
        t1, t2, t3, t4, t5, t6 = th
        denom = _pt_guard(Rpp, t6)
        frac = Rpp / denom
        dmm6 = -t5 * Rpp / denom**2
        z = 0.0 * S
        return _blocks([
            [-S, -S * R, RS, z, z, z],
            [S, z, z, z, z, z],
            [z, -S * R, RS, z, frac, dmm6],
            [z, S * R, -RS, -RS, z, z],
            [z, z, z, RS, -frac, -dmm6],
        ])

    canonical = Canonical(
        theta=np.array([0.07, 0.6, 0.05, 0.3, 0.017, 0.3]),
        x0=np.array([1.0, 0.0, 1.0, 0.0, 0.0]),
        t=np.array([0, 1, 2, 4, 5, 7, 10, 15, 20, 30, 40, 50, 60, 80, 100], dtype=float),
        noise_presets={"low": ("sigma", 0.001), "high": ("sigma", 0.01)},
    )
    return ODESystem(
        name="pt", K=5, P=6, rhs=rhs, jac_x_fn=jac_x, jac_theta_fn=jac_theta,
        canonical=canonical, state_names=("S", "dS", "R", "RS", "Rpp"),
    )


# --------------------------------------------------------------------------
# Lorenz '96
# --------------------------------------------------------------------------

def lorenz96(K=40, x0=None):
    """Lorenz '96 with a single forcing parameter; indices wrap modulo ``K``.

    The canonical initial state is the forcing equilibrium with the first
    component nudged by 0.01, which leaves it onto the chaotic attractor.
    """
    if K < 4:
        raise ValueError("Lorenz '96 needs K >= 4")

    def rhs(x, th):
        xp1 = np.roll(x, -1, axis=-1)
        xm1 = np.roll(x, 1, axis=-1)
        xm2 = np.roll(x, 2, axis=-1)
        return (xp1 - xm2) * xm1 - x + th[0]

    def jac_x(x, th):
        lead = x.shape[:-1]
        J = np.zeros(lead + (K, K))
        idx = np.arange(K)
        xp1 = np.roll(x, -1, axis=-1)
        xm1 = np.roll(x, 1, axis=-1)
        xm2 = np.roll(x, 2, axis=-1)
        J[..., idx, idx] = -1.0
        J[..., idx, (idx + 1) % K] += xm1
        J[..., idx, (idx - 2) % K] += -xm1
        J[..., idx, (idx - 1) % K] += xp1 - xm2
        return J

    def jac_theta(x, th):
        return np.ones(x.shape + (1,))

    def vjp_x(x, th, w):
        # out_m = sum_k w_k * d f_k / d x_m, with f_k touching x_{k+1}, x_{k-2}, x_{k-1}, x_k
        xp1 = np.roll(x, -1, axis=-1)
        xm1 = np.roll(x, 1, axis=-1)
        xm2 = np.roll(x, 2, axis=-1)
        out = -w
        out = out + np.roll(w * xm1, 1, axis=-1)
        out = out - np.roll(w * xm1, -2, axis=-1)
        out = out + np.roll(w * (xp1 - xm2), -1, axis=-1)
        return out

    def vjp_theta(x, th, w):
        return np.array([np.sum(w)])

    idx = np.arange(K)
    entry_rows = np.concatenate([idx, idx, idx, idx])
    entry_cols = np.concatenate([idx, (idx + 1) % K, (idx - 2) % K, (idx - 1) % K])

    def jac_x_entries(x, th):
        xp1 = np.roll(x, -1, axis=-1)
        xm1 = np.roll(x, 1, axis=-1)
        xm2 = np.roll(x, 2, axis=-1)
        vals = np.concatenate(
            [np.full_like(x, -1.0), xm1, -xm1, xp1 - xm2], axis=-1
        )
        return entry_rows, entry_cols, vals

    theta = np.array([8.0])
    if x0 is None:
        x0 = np.full(K, 8.0)
        x0[0] += 0.01
    canonical = Canonical(
        theta=theta,
        x0=np.asarray(x0, dtype=float),
        t=np.linspace(0.0, 5.0, 50),
        noise_presets={"low": ("sigma", 1.0)},
    )
    return ODESystem(
        name="lorenz96", K=K, P=1, rhs=rhs, jac_x_fn=jac_x, jac_theta_fn=jac_theta,
        canonical=canonical, vjp_x_fn=vjp_x, vjp_theta_fn=vjp_theta,
        state_names=tuple(f"x{k + 1}" for k in range(K)),
        jac_x_entries_fn=jac_x_entries,
    )


_REGISTRY = {
    "lv": lotka_volterra,
    "fhn": fitzhugh_nagumo,
    "fhn-paper": lambda: fitzhugh_nagumo("paper"),
    "pt": protein_transduction,
    "lorenz96": lorenz96,
    "lv-m00": lambda: lv_misspecified(0, 0),
    "lv-m01": lambda: lv_misspecified(0, 1),
    "lv-m10": lambda: lv_misspecified(1, 0),
    "lv-m11": lambda: lv_misspecified(1, 1),
}


def system_names():
    return sorted(_REGISTRY)


def get_system(name, **kwargs) -> ODESystem:
    """Look up a registered system by its CLI name (``lv``, ``fhn``, ...)."""
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown system {name!r}; choose from {system_names()}") from None
    return factory(**kwargs)
