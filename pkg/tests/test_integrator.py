import math

import numpy as np
import pytest

from odin.errors import IntegrationError
from odin.integrator import IntegratorSettings, integrate
from odin.ode_models import ODESystem, get_system, lorenz96, lotka_volterra


def decay():
    return ODESystem(
        name="decay", K=1, P=1,
        rhs=lambda x, th: -th[0] * x,
        jac_x_fn=lambda x, th: -th[0] * np.ones(x.shape + (1,)),
        jac_theta_fn=lambda x, th: -x[..., None],
    )


def test_exponential_closed_form():
    x = integrate(decay(), [1.0], [1.0], [0.0, 1.0], IntegratorSettings(rtol=1e-10, atol=1e-12))
    assert x[-1, 0] == pytest.approx(math.exp(-1.0), abs=1e-8)


def test_tighter_tolerance_is_not_worse():
    t = np.linspace(0, 3, 7)
    exact = np.exp(-t)
    errs = []
    for rtol in (1e-4, 5e-5, 2.5e-5, 1.25e-5, 1e-6, 1e-8):
        x = integrate(decay(), [1.0], [1.0], t, IntegratorSettings(rtol=rtol, atol=1e-14))
        errs.append(np.max(np.abs(x[:, 0] - exact)))
    assert all(b <= a * (1 + 1e-12) for a, b in zip(errs, errs[1:]))


def test_lotka_volterra_invariant():
    lv = lotka_volterra()
    th = np.array([2.0, 1.0, 4.0, 1.0])
    t = np.linspace(0, 2, 200)
    x = integrate(lv, th, [5.0, 3.0], t)
    V = th[3] * x[:, 0] - th[2] * np.log(x[:, 0]) + th[1] * x[:, 1] - th[0] * np.log(x[:, 1])
    assert np.max(np.abs(V - V[0])) / abs(V[0]) < 1e-6


def test_lorenz96_equilibrium():
    sys = lorenz96(12)
    x = integrate(sys, [8.0], np.full(12, 8.0), np.linspace(0, 5, 50))
    assert np.max(np.abs(x - 8.0)) < 1e-10


def test_first_row_is_initial_state_and_deterministic():
    pt = get_system("pt")
    c = pt.canonical
    a = integrate(pt, c.theta, c.x0, c.t)
    b = integrate(pt, c.theta, c.x0, c.t)
    np.testing.assert_array_equal(a[0], c.x0)
    assert a.tobytes() == b.tobytes()


def test_blow_up_reports_last_time():
    blow = ODESystem(
        name="blow", K=1, P=1,
        rhs=lambda x, th: x**2,
        jac_x_fn=lambda x, th: 2 * x[..., None],
        jac_theta_fn=lambda x, th: np.zeros(x.shape + (1,)),
    )
    with pytest.raises(IntegrationError) as info:
        integrate(blow, [0.0], [1.0], [0.0, 0.5, 2.0])
    assert info.value.last_time is not None and info.value.last_time < 1.0 + 1e-6


def test_step_budget():
    with pytest.raises(IntegrationError):
        integrate(lotka_volterra(), [2, 1, 4, 1], [5, 3], np.linspace(0, 2, 5),
                  IntegratorSettings(max_steps=3))


def test_grid_must_be_increasing():
    with pytest.raises(ValueError):
        integrate(decay(), [1.0], [1.0], [0.0, 0.0, 1.0])
