"""Acceptance criteria, each at its stated tolerance and runtime budget.

Every test records a single pass/fail line (shown in the terminal summary)
and then asserts the criterion.
"""

import math
import time

import numpy as np

from odin.dataset import TimeSeriesDataset
from odin.experiments import (
    NoiseSpec,
    canonical_dataset,
    run_model_selection,
    run_parameter_inference,
    run_scaling,
    run_state_inference,
)
from odin.gp import build_gp_state
from odin.integrator import IntegratorSettings, integrate
from odin.kernel import KernelHyperparams
from odin.ode_models import ODESystem, get_system, lorenz96, lotka_volterra, protein_transduction
from odin.odin_core import OdinConfig, fit
from odin.optimizer import Bounds, OptimizerSettings, minimize
from odin.risk import RiskContext, risk_gradient, risk_full, risk_tilde

GAMMA_MIN = 1e-6


def random_context(system, N, rng, t=None, x_scale=1.0, with_states=False):
    t = np.sort(rng.uniform(0, 4, N)) if t is None else t
    K = system.K
    y = x_scale * rng.uniform(0.2, 1.0, (N, K))
    states = [
        build_gp_state(t, "rbf", KernelHyperparams(rng.uniform(0.5, 2), rng.uniform(0.5, 2),
                                                   rng.uniform(0.05, 0.5)),
                       mean=float(y[:, k].mean()))
        for k in range(K)
    ]
    ctx = RiskContext.from_gp_states(states, y, system)
    return (ctx, states) if with_states else ctx


# --------------------------------------------------------------------------
# 1. gradient suite
# --------------------------------------------------------------------------

def _fd_gradient(ctx, x, theta, gamma, h=1e-6):
    z = ctx.pack(x, theta, gamma)
    g = np.zeros_like(z)
    for i in range(z.size):
        step = h * max(1.0, abs(z[i]))
        zp, zm = z.copy(), z.copy()
        zp[i] += step
        zm[i] -= step
        g[i] = (risk_full(*ctx.unpack(zp), ctx) - risk_full(*ctx.unpack(zm), ctx)) / (2 * step)
    return g


def test_criterion_01_gradient(acceptance_report):
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    cases = [(lotka_volterra(), 10, 20), (protein_transduction(), 15, 5)]
    for system, N, count in cases:
        for _ in range(count):
            ctx = random_context(system, N, rng)
            x = np.abs(ctx.y + 0.05 * rng.standard_normal(ctx.y.shape)) + 0.05
            theta = rng.uniform(0.05, 1.0, system.P)
            gamma = rng.uniform(0.01, 2.0, system.K)
            gx, gt, gg = risk_gradient(x, theta, gamma, ctx)
            analytic = np.concatenate([gx.ravel(), gt, gg])
            numeric = _fd_gradient(ctx, x, theta, gamma)
            worst = max(worst, np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-5 and elapsed < 60
    acceptance_report(1, "gradient vs central differences", ok,
                      f"max relative error {worst:.2e} (< 1e-5), {elapsed:.1f} s (< 60 s)")
    assert ok


# --------------------------------------------------------------------------
# 2. density oracle
# --------------------------------------------------------------------------

def _gaussian_log_density(v, cov):
    n = v.size
    L = np.linalg.cholesky(cov)
    w = np.linalg.solve(L, v)
    return -0.5 * (n * math.log(2 * math.pi) + 2 * np.sum(np.log(np.diag(L))) + w @ w)


def _neg2_log_density_minus_constants(ctx, states, x, F, gamma):
    """Dense evaluation of the three Gaussian factors per state, with every
    term that does not depend on (x, F) removed."""
    total = 0.0
    N = ctx.N
    for k, state in enumerate(states):
        C = state.C
        M = ctx.Q[k] @ np.diag(ctx.lam[k] + gamma[k]) @ ctx.Q[k].T
        xc = x[:, k] - ctx.prior_mean[k]
        s2 = ctx.sigma[k] ** 2
        log_p = (
            _gaussian_log_density(xc, C)
            + _gaussian_log_density(ctx.y[:, k] - x[:, k], s2 * np.eye(N))
            + _gaussian_log_density(F[:, k] - ctx.D[k] @ xc, M)
        )
        constants = (
            3 * N * math.log(2 * math.pi)
            + np.linalg.slogdet(C)[1]
            + N * math.log(s2)
            + np.linalg.slogdet(M)[1]
        )
        total += -2.0 * log_p - constants
    return total


def test_criterion_02_density_oracle(acceptance_report):
    start = time.perf_counter()
    rng = np.random.default_rng(202)
    worst = 0.0
    for N in range(2, 7):
        for _ in range(4):
            ctx, states = random_context(lotka_volterra(), N, rng, with_states=True)
            x = rng.standard_normal((N, 2))
            F = rng.standard_normal((N, 2))
            gamma = rng.uniform(0.05, 2.0, 2)
            ours = risk_tilde(x, F, ctx, gamma)
            oracle = _neg2_log_density_minus_constants(ctx, states, x, F, gamma)
            worst = max(worst, abs(ours - oracle) / abs(oracle))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-8 and elapsed < 10
    acceptance_report(2, "risk equals -2 log joint density", ok,
                      f"max relative error {worst:.2e} (< 1e-8), {elapsed:.1f} s (< 10 s)")
    assert ok


# --------------------------------------------------------------------------
# 3. noiseless recovery
# --------------------------------------------------------------------------

def test_criterion_03_noiseless_recovery(acceptance_report):
    start = time.perf_counter()
    lv = lotka_volterra()
    t = np.linspace(0, 2, 25)
    x = integrate(lv, [2, 1, 4, 1], [5, 3], t, IntegratorSettings(rtol=1e-10, atol=1e-12))
    result = fit(TimeSeriesDataset(t, x), lv, OdinConfig(seed=0, theta_restarts=5))
    elapsed = time.perf_counter() - start
    rel = np.max(np.abs(result.theta - [2, 1, 4, 1]) / [2, 1, 4, 1])
    at_bound = bool(np.all(result.gamma == GAMMA_MIN))
    ok = rel <= 0.02 and at_bound and elapsed < 120
    acceptance_report(3, "noiseless LV recovery", ok,
                      f"theta {np.round(result.theta, 4).tolist()} max rel error {rel:.4f} "
                      f"(<= 0.02), gamma {result.gamma.tolist()} (== 1e-6), {elapsed:.1f} s (< 120 s)")
    assert ok


# --------------------------------------------------------------------------
# 4. model selection
# --------------------------------------------------------------------------

def test_criterion_04_model_selection(acceptance_report):
    start = time.perf_counter()
    rows, summary = run_model_selection(NoiseSpec("sigma", 0.1), reps=20)
    elapsed = time.perf_counter() - start
    table = summary["table"]
    med = {m: (table[m]["gamma_1_median"], table[m]["gamma_2_median"]) for m in table}
    checks = {
        "M11 both at bound": med["lv-m11"] == (GAMMA_MIN, GAMMA_MIN),
        "M01 g2 at bound": med["lv-m01"][1] == GAMMA_MIN,
        "M10 g1 at bound": med["lv-m10"][0] == GAMMA_MIN,
        "wrong equations > 1e-4": min(med["lv-m01"][0], med["lv-m10"][1],
                                      med["lv-m00"][0], med["lv-m00"][1]) > 1e-4,
        "M01 g1 > M10 g2": med["lv-m01"][0] > med["lv-m10"][1],
        "M01 g1 in [1.5, 6]": 1.5 <= med["lv-m01"][0] <= 6.0,
        "M10 g2 in [0.5, 3]": 0.5 <= med["lv-m10"][1] <= 3.0,
        "runtime < 20 min": elapsed < 1200,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    medians = ", ".join(f"{m}: ({a:.3g}, {b:.3g})" for m, (a, b) in med.items())
    acceptance_report(4, "model selection", ok,
                      f"median gamma {medians}; {elapsed:.0f} s"
                      + (f"; failed: {failed}" if failed else ""))
    assert ok


# --------------------------------------------------------------------------
# 5. state inference
# --------------------------------------------------------------------------

def test_criterion_05_state_inference(acceptance_report):
    start = time.perf_counter()
    parts, ok = [], True
    for name in ("fhn", "pt"):
        system = get_system(name)
        _, summary = run_state_inference(name, NoiseSpec.preset(system), reps=20)
        odin_med = summary["state_rmse_odin"]["median"]
        gpr_med = summary["state_rmse_gpr"]["median"]
        ok &= odin_med <= gpr_med
        parts.append(f"{name} median state RMSE {odin_med:.4f} vs GP {gpr_med:.4f}")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 1800
    acceptance_report(5, "state inference beats GP regression", ok,
                      "; ".join(parts) + f"; {elapsed:.0f} s (< 1800 s)")
    assert ok


# --------------------------------------------------------------------------
# 6. parameter-inference stability
# --------------------------------------------------------------------------

def test_criterion_06_parameter_stability(acceptance_report):
    _, summary = run_parameter_inference("lv", NoiseSpec("sigma", 0.1), reps=20)
    q = summary["trmse_total"]
    iqr = q["q75"] - q["q25"]
    ok = q["n_sentinel"] == 0 and iqr <= q["median"]
    acceptance_report(6, "LV trajectory RMSE stability", ok,
                      f"IQR {iqr:.4f} <= median {q['median']:.4f}, sentinels {q['n_sentinel']}")
    assert ok


# --------------------------------------------------------------------------
# 7. scaling
# --------------------------------------------------------------------------

def test_criterion_07_scaling(acceptance_report):
    start = time.perf_counter()
    _, summary = run_scaling([25, 50, 100, 200], reps=5)
    elapsed = time.perf_counter() - start
    means = {r["K"]: r["mean_seconds"] for r in summary["rows"]}
    r2 = summary["fit"]["r2"]
    ratio = means[200] / means[25]
    ok = r2 >= 0.95 and ratio < 16 and elapsed < 1800
    acceptance_report(7, "Lorenz '96 runtime scaling", ok,
                      f"mean seconds {[round(means[k], 1) for k in sorted(means)]}, "
                      f"R^2 {r2:.3f} (>= 0.95), ratio 200/25 {ratio:.2f} (< 16), "
                      f"{elapsed:.0f} s (< 1800 s)")
    assert ok


# --------------------------------------------------------------------------
# 8. runtime sanity
# --------------------------------------------------------------------------

def test_criterion_08_lv_runtime(acceptance_report):
    lv = lotka_volterra()
    data = canonical_dataset(lv, NoiseSpec("sigma", 0.1), 0)
    start = time.perf_counter()
    fit(data, lv, OdinConfig(seed=0))
    elapsed = time.perf_counter() - start
    ok = elapsed < 120
    acceptance_report(8, "single LV fit runtime", ok, f"{elapsed:.2f} s (< 120 s)")
    assert ok


# --------------------------------------------------------------------------
# 9. optimizer suite
# --------------------------------------------------------------------------

def _brute_force_box_qp(H, b, lo, hi):
    import itertools
    n = len(b)
    best, best_f = None, np.inf
    for pattern in itertools.product((0, 1, 2), repeat=n):
        x = np.where(np.array(pattern) == 1, lo, np.where(np.array(pattern) == 2, hi, 0.0))
        free = [i for i in range(n) if pattern[i] == 0]
        fixed = [i for i in range(n) if pattern[i] != 0]
        if free:
            rhs = b[free] - H[np.ix_(free, fixed)] @ x[fixed]
            x[free] = np.linalg.solve(H[np.ix_(free, free)], rhs)
        if np.any(x < lo - 1e-12) or np.any(x > hi + 1e-12):
            continue
        f = 0.5 * x @ H @ x - b @ x
        if f < best_f:
            best, best_f = x, f
    return best


def test_criterion_09_optimizer(acceptance_report):
    checks = {}
    c = np.array([1.0, -2.0, 3.0, 0.5])
    rep = minimize(lambda x: (float((x - c) @ (x - c)), 2 * (x - c)), True, np.zeros(4),
                   settings=OptimizerSettings(gtol=1e-12))
    checks["quadratic"] = (np.max(np.abs(rep.grad)) < 1e-8 and rep.n_iter <= 10
                           and np.allclose(rep.x, c, atol=1e-10))

    def rosen(z):
        x, y = z
        return ((1 - x) ** 2 + 100 * (y - x * x) ** 2,
                np.array([-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)]))
    rep = minimize(rosen, True, np.array([-1.2, 1.0]),
                   settings=OptimizerSettings(gtol=1e-12, ftol=0.0, xtol=0.0))
    checks["rosenbrock"] = bool(np.max(np.abs(rep.x - 1.0)) < 1e-6)

    rep = minimize(lambda x: (float(x @ x), 2 * x), True, np.array([1.5]),
                   Bounds(np.array([1.0]), np.array([2.0])))
    checks["bound clamp"] = rep.x[0] == 1.0

    rng = np.random.default_rng(909)
    worst = 0.0
    for n in (1, 2, 3):
        for _ in range(30):
            A = rng.standard_normal((n, n))
            H = A @ A.T + 0.5 * np.eye(n)
            b = 3 * rng.standard_normal(n)
            lo, hi = -rng.uniform(0.1, 1.5, n), rng.uniform(0.1, 1.5, n)
            rep = minimize(lambda x: (0.5 * x @ H @ x - b @ x, H @ x - b), True,
                           rng.uniform(lo, hi), Bounds(lo, hi),
                           OptimizerSettings(gtol=1e-14, ftol=0.0, xtol=0.0))
            worst = max(worst, np.max(np.abs(rep.x - _brute_force_box_qp(H, b, lo, hi))))
    checks["active-set brute force"] = worst <= 1e-8
    ok = all(checks.values())
    acceptance_report(9, "optimizer unit suite", ok,
                      ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items())
                      + f" (max boxed-QP deviation {worst:.1e})")
    assert ok


# --------------------------------------------------------------------------
# 10. integrator suite
# --------------------------------------------------------------------------

def test_criterion_10_integrator(acceptance_report):
    decay = ODESystem(
        name="decay", K=1, P=1, rhs=lambda x, th: -th[0] * x,
        jac_x_fn=lambda x, th: -th[0] * np.ones(x.shape + (1,)),
        jac_theta_fn=lambda x, th: -x[..., None],
    )
    x = integrate(decay, [1.0], [1.0], [0.0, 1.0], IntegratorSettings(rtol=1e-10, atol=1e-12))
    exp_err = abs(x[-1, 0] - math.exp(-1))

    lv = lotka_volterra()
    th = np.array([2.0, 1.0, 4.0, 1.0])
    xs = integrate(lv, th, [5.0, 3.0], np.linspace(0, 2, 200))
    V = th[3] * xs[:, 0] - th[2] * np.log(xs[:, 0]) + th[1] * xs[:, 1] - th[0] * np.log(xs[:, 1])
    drift = np.max(np.abs(V - V[0])) / abs(V[0])

    l96 = lorenz96(40)
    xl = integrate(l96, [8.0], np.full(40, 8.0), np.linspace(0, 5, 50))
    eq_err = np.max(np.abs(xl - 8.0))
    ok = exp_err < 1e-8 and drift < 1e-6 and eq_err < 1e-10
    acceptance_report(10, "integrator suite", ok,
                      f"exp error {exp_err:.1e} (< 1e-8), LV invariant drift {drift:.1e} "
                      f"(< 1e-6), Lorenz equilibrium error {eq_err:.1e} (< 1e-10)")
    assert ok
