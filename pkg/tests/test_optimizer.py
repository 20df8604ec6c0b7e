import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from odin.optimizer import (
    GRADIENT_TOL,
    MAX_ITER,
    Bounds,
    OptimizerSettings,
    minimize,
    projected_gradient,
)


def quadratic(H, b):
    return lambda x: (0.5 * x @ H @ x - b @ x, H @ x - b)


def rosenbrock(z):
    x, y = z
    f = (1 - x) ** 2 + 100 * (y - x * x) ** 2
    g = np.array([-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)])
    return f, g


def test_quadratic_exact_minimizer():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((6, 6))
    H = A @ A.T + 6 * np.eye(6)
    b = rng.standard_normal(6)
    rep = minimize(quadratic(H, b), True, np.zeros(6), settings=OptimizerSettings(gtol=1e-12))
    np.testing.assert_allclose(rep.x, np.linalg.solve(H, b), atol=1e-8)
    assert rep.success


def test_quadratic_with_exact_preconditioner_is_one_step():
    H = np.diag([1.0, 10.0, 1000.0])
    b = np.array([1.0, -2.0, 3.0])
    inv = np.linalg.inv(H)
    rep = minimize(quadratic(H, b), True, np.zeros(3),
                   preconditioner=lambda x: (lambda v, free: inv @ v))
    np.testing.assert_allclose(rep.x, inv @ b, rtol=1e-10)
    assert rep.n_iter <= 2


def test_rosenbrock():
    rep = minimize(rosenbrock, True, np.array([-1.2, 1.0]),
                   settings=OptimizerSettings(gtol=1e-12, ftol=0.0, xtol=0.0))
    np.testing.assert_allclose(rep.x, [1.0, 1.0], atol=1e-6)


def test_separate_gradient_callable():
    rep = minimize(lambda x: rosenbrock(x)[0], lambda x: rosenbrock(x)[1], [-1.2, 1.0],
                   settings=OptimizerSettings(gtol=1e-12, ftol=0.0, xtol=0.0))
    np.testing.assert_allclose(rep.x, [1.0, 1.0], atol=1e-6)


def test_active_bound_is_hit_exactly():
    rep = minimize(lambda x: (float(x @ x), 2 * x), True, np.array([1.7]),
                   Bounds(np.array([1.0]), np.array([2.0])))
    assert rep.x[0] == 1.0
    assert rep.reason == GRADIENT_TOL


def test_start_outside_box_is_projected():
    seen = []
    minimize(lambda x: (float(x @ x), 2 * x), True, np.array([5.0, -5.0]),
             Bounds(np.array([-1.0, -1.0]), np.array([1.0, 1.0])),
             callback=lambda x, f: seen.append(x))
    assert all(np.all(np.abs(x) <= 1.0) for x in seen)


def test_max_iterations_reported():
    rep = minimize(rosenbrock, True, np.array([-1.2, 1.0]), settings=OptimizerSettings(max_iter=3))
    assert rep.reason == MAX_ITER and rep.n_iter == 3
    assert rep.fun <= rep.initial_fun


def test_infeasible_start_raises():
    with pytest.raises(ValueError):
        minimize(lambda x: (np.inf, x), True, np.zeros(2))


def test_infeasible_region_is_avoided():
    # log barrier style objective that is undefined for x <= 0
    def f(x):
        if x[0] <= 0:
            raise ValueError("outside domain")
        return x[0] - 2 * np.log(x[0]), np.array([1 - 2 / x[0]])
    rep = minimize(f, True, np.array([0.1]))
    assert rep.x[0] == pytest.approx(2.0, rel=1e-6)


def brute_force_box_qp(H, b, lo, hi):
    """Enumerate active sets; return the best feasible KKT point."""
    n = len(b)
    best, best_f = None, np.inf
    for pattern in itertools.product((0, 1, 2), repeat=n):
        x = np.zeros(n)
        free = [i for i in range(n) if pattern[i] == 0]
        for i in range(n):
            if pattern[i] == 1:
                x[i] = lo[i]
            elif pattern[i] == 2:
                x[i] = hi[i]
        if free:
            fixed = [i for i in range(n) if pattern[i] != 0]
            rhs = b[free] - H[np.ix_(free, fixed)] @ x[fixed]
            x[free] = np.linalg.solve(H[np.ix_(free, free)], rhs)
        if np.any(x < lo - 1e-12) or np.any(x > hi + 1e-12):
            continue
        val = 0.5 * x @ H @ x - b @ x
        if val < best_f:
            best, best_f = x, val
    return best


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_boxed_quadratic_matches_active_set_enumeration(n, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    H = A @ A.T + 0.5 * np.eye(n)
    b = 3 * rng.standard_normal(n)
    lo = -rng.uniform(0.1, 1.5, n)
    hi = rng.uniform(0.1, 1.5, n)
    rep = minimize(quadratic(H, b), True, rng.uniform(lo, hi), Bounds(lo, hi),
                   OptimizerSettings(gtol=1e-11, ftol=0.0, xtol=0.0))
    np.testing.assert_allclose(rep.x, brute_force_box_qp(H, b, lo, hi), atol=1e-6)
    assert np.all(rep.x >= lo) and np.all(rep.x <= hi)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3),
       st.lists(st.floats(-10, 10).filter(lambda v: v == 0 or abs(v) > 1e-6),
                min_size=3, max_size=3))
def test_projected_gradient_vanishes_only_at_box_kkt(x, g):
    bounds = Bounds(-np.ones(3), np.ones(3))
    x = bounds.project(np.array(x))
    g = np.array(g)
    pg = projected_gradient(x, g, bounds)
    for i in range(3):
        outward = (x[i] == -1 and g[i] > 0) or (x[i] == 1 and g[i] < 0)
        if g[i] != 0 and not outward and abs(x[i]) < 1:
            assert pg[i] != 0


def test_bounds_validation():
    with pytest.raises(ValueError):
        Bounds(np.array([1.0]), np.array([0.0]))
    with pytest.raises(ValueError):
        minimize(lambda x: (0.0, x), True, np.zeros(2), Bounds(np.zeros(3), np.ones(3)))
