"""Adaptive Dormand-Prince 5(4) integration with dense output."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from odin.errors import IntegrationError
from odin.kernel import check_grid


@dataclass(frozen=True)
class IntegratorSettings:
    rtol: float = 1e-8
    atol: float = 1e-10
    max_steps: int = 1_000_000


DATA_SETTINGS = IntegratorSettings()
SCORING_SETTINGS = IntegratorSettings(rtol=1e-6, atol=1e-10)


class _StepBudgetExceeded(Exception):
    pass


def integrate(system, theta, x0, t_out, settings=None):
    """Integrate ``system`` from ``x0`` at ``t_out[0]`` and sample at ``t_out``.

    Returns an ``(N, K)`` trajectory. Raises ``IntegrationError`` when the
    step size collapses or the step budget runs out; domain errors raised by
    the vector field propagate unchanged.
    """
    settings = settings or DATA_SETTINGS
    t_out = check_grid(t_out)
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    x0 = np.asarray(x0, dtype=float)
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(x0))):
        raise IntegrationError("non-finite parameters or initial state", last_time=t_out[0])
    traj = np.empty((t_out.size, x0.size))
    traj[0] = x0
    if t_out.size == 1:
        return traj

    # Each accepted step costs at least six evaluations (FSAL).
    max_evals = 6 * settings.max_steps + 12
    n_evals = 0
    last_t = [t_out[0]]

    def rhs(t, x):
        nonlocal n_evals
        n_evals += 1
        if n_evals > max_evals:
            raise _StepBudgetExceeded
        last_t[0] = t
        return system.f(x, theta)

    with np.errstate(over="ignore", invalid="ignore"):
        try:
            sol = solve_ivp(
                rhs,
                (t_out[0], t_out[-1]),
                x0,
                method="RK45",
                t_eval=t_out,
                rtol=settings.rtol,
                atol=settings.atol,
            )
        except _StepBudgetExceeded:
            raise IntegrationError(
                f"step budget of {settings.max_steps} exhausted", last_time=last_t[0]
            ) from None
    if sol.status != 0 or sol.y.shape[1] != t_out.size:
        last = sol.t[-1] if sol.t.size else t_out[0]
        raise IntegrationError(f"integration failed: {sol.message}", last_time=float(last))
    traj[1:] = sol.y.T[1:]
    if not np.all(np.isfinite(traj)):
        raise IntegrationError("trajectory diverged", last_time=last_t[0])
    return traj
