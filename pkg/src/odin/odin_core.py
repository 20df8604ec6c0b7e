"""Two-step estimator: per-state GP regression, then joint minimization of
the risk over states, ODE parameters and derivative-noise variances."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from odin.errors import OdinError
from odin.gp import (
    StandardizationTransform,
    build_gp_state,
    fit_hyperparameters,
    fit_standardization,
    map_hyperparams_to_original,
    posterior,
)
from odin.kernel import KernelFamily, KernelHyperparams
from odin.optimizer import Bounds, OptimizerReport, OptimizerSettings, minimize
from odin.risk import (
    GAMMA_MIN,
    RiskContext,
    flat_objective,
    gauss_newton_preconditioner,
    profiled_gamma,
    profiled_objective,
    risk_full,
)


GAMMA_MODES = ("joint", "profiled")


@dataclass(frozen=True)
class OdinConfig:
    """Settings for one fit.

    ``theta_low``/``theta_high`` define the uniform draw for random parameter
    starts; ``theta_init`` overrides it with a fixed start. ``theta_bounds``
    and ``x_bounds`` are ``(lower, upper)`` pairs broadcast to the right
    shapes. With ``fixed_gamma`` the variances stay at ``gamma_init``.
    ``gamma_mode="profiled"`` eliminates the variances analytically: each is
    set to its exact per-state minimizer at every evaluation, and only the
    states and parameters are iterated. ``precondition`` uses the
    Gauss-Newton curvature as the initial L-BFGS matrix.
    """

    family: KernelFamily = KernelFamily.RBF
    gp_restarts: int = 10
    seed: int = 0
    theta_low: float = 0.0
    theta_high: float = 1.0
    theta_init: Optional[tuple] = None
    theta_restarts: int = 1
    gamma_init: float = 1.0
    gamma_min: float = GAMMA_MIN
    theta_bounds: Optional[tuple] = None
    x_bounds: Optional[tuple] = None
    fixed_gamma: bool = False
    centered_prior: bool = True
    gamma_mode: str = "joint"
    precondition: bool = True
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)

    def __post_init__(self):
        if self.gamma_init < self.gamma_min:
            raise ValueError("gamma_init is below the gamma lower bound")
        if self.theta_restarts < 1 or self.gp_restarts < 1:
            raise ValueError("restart counts must be >= 1")
        if self.gamma_mode not in GAMMA_MODES:
            raise ValueError(f"gamma_mode must be one of {GAMMA_MODES}")
        object.__setattr__(self, "family", KernelFamily(self.family))

    def to_dict(self):
        return {
            "family": self.family.value,
            "gp_restarts": self.gp_restarts,
            "seed": self.seed,
            "theta_low": self.theta_low,
            "theta_high": self.theta_high,
            "theta_init": None if self.theta_init is None else list(self.theta_init),
            "theta_restarts": self.theta_restarts,
            "gamma_init": self.gamma_init,
            "gamma_min": self.gamma_min,
            "theta_bounds": _jsonable(self.theta_bounds),
            "x_bounds": _jsonable(self.x_bounds),
            "fixed_gamma": self.fixed_gamma,
            "centered_prior": self.centered_prior,
            "gamma_mode": self.gamma_mode,
            "precondition": self.precondition,
            "optimizer": dict(vars(self.optimizer)),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "optimizer" in d and isinstance(d["optimizer"], dict):
            d["optimizer"] = OptimizerSettings(**d["optimizer"])
        if d.get("theta_init") is not None:
            d["theta_init"] = tuple(d["theta_init"])
        for key in ("theta_bounds", "x_bounds"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


def _jsonable(pair):
    if pair is None:
        return None
    return [np.asarray(p, dtype=float).tolist() for p in pair]


@dataclass
class StepOne:
    transform: StandardizationTransform
    hyperparams: list
    states: list
    mean: np.ndarray   # (N, K) GP posterior means, original units


@dataclass
class OdinResult:
    x: np.ndarray
    theta: np.ndarray
    gamma: np.ndarray
    hyperparams: list
    risk: float
    report: OptimizerReport
    transform: StandardizationTransform
    runtime_seconds: float
    seed: int
    theta_start: np.ndarray
    risk_start: float
    x_start: np.ndarray = field(repr=False, default=None)

    def to_dict(self):
        return {
            "theta": self.theta.tolist(),
            "gamma": self.gamma.tolist(),
            "states": self.x.tolist(),
            "hyperparams": [hp.as_dict() for hp in self.hyperparams],
            "risk": self.risk,
            "seed": self.seed,
            "runtime_seconds": self.runtime_seconds,
        }


def _stage(err, stage):
    err.stage = stage
    return err


def run_step_one(dataset, config: OdinConfig) -> StepOne:
    """Standardize, fit each state's GP by empirical Bayes, map back."""
    t, Y = dataset.t, dataset.y
    if t.size < 3:
        raise ValueError("need at least 3 observations per state")
    transform = fit_standardization(t, Y)
    t_std = transform.standardize_t(t)
    Y_std = transform.standardize_y(Y)
    seeds = np.random.SeedSequence([config.seed, 1]).spawn(Y.shape[1])
    hps, states, means = [], [], []
    for k in range(Y.shape[1]):
        try:
            hp_std = fit_hyperparameters(
                Y_std[:, k], t_std, config.family, restarts=config.gp_restarts,
                seed=np.random.default_rng(seeds[k]),
            )
            hp = map_hyperparams_to_original(hp_std, transform, k)
            shift = float(transform.y_shift[k]) if config.centered_prior else 0.0
            states.append(build_gp_state(t, config.family, hp, mean=shift))
            mu, _ = posterior(Y[:, k], t, config.family, hp, mean=shift)
        except (OdinError, ArithmeticError, ValueError) as err:
            raise _stage(err, f"step 1: GP regression for state {k + 1}")
        hps.append(hp)
        means.append(mu)
    return StepOne(transform, hps, states, np.column_stack(means))


def gp_baseline(dataset, config: OdinConfig = None):
    """Posterior means of independent per-state GP regression (N x K)."""
    return run_step_one(dataset, config or OdinConfig()).mean


def _broadcast_bounds(pair, shape):
    lo = np.broadcast_to(np.asarray(pair[0], dtype=float), shape).ravel()
    hi = np.broadcast_to(np.asarray(pair[1], dtype=float), shape).ravel()
    return lo, hi


def build_bounds(ctx, config, with_gamma=True):
    N, K, P = ctx.N, ctx.K, ctx.P
    if config.x_bounds is None:
        x_lo, x_hi = np.full(N * K, -np.inf), np.full(N * K, np.inf)
    else:
        x_lo, x_hi = _broadcast_bounds(config.x_bounds, (N, K))
    if config.theta_bounds is None:
        t_lo, t_hi = np.full(P, -np.inf), np.full(P, np.inf)
    else:
        t_lo, t_hi = _broadcast_bounds(config.theta_bounds, (P,))
    lo = [x_lo, t_lo]
    hi = [x_hi, t_hi]
    if with_gamma:
        lo.append(np.full(K, config.gamma_min))
        hi.append(np.full(K, np.inf))
    return Bounds(np.concatenate(lo), np.concatenate(hi))


def _theta_starts(system, config):
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    starts = []
    for _ in range(config.theta_restarts):
        if config.theta_init is not None:
            starts.append(np.asarray(config.theta_init, dtype=float))
        else:
            starts.append(rng.uniform(config.theta_low, config.theta_high, size=system.P))
    return starts


def fit(dataset, system, config: OdinConfig = None, step_one: StepOne = None) -> OdinResult:
    """Estimate states, ODE parameters and per-state derivative variances.

    Parameters
    ----------
    dataset : TimeSeriesDataset
        Observations on a shared grid, at least three rows.
    system : ODESystem
        Parametric vector field with the same state dimension as the data.
    config : OdinConfig, optional
    step_one : StepOne, optional
        Precomputed GP regression results (lets several candidate models
        share one hyperparameter fit).

    Returns
    -------
    OdinResult
    """
    config = config or OdinConfig()
    start = time.perf_counter()
    if system.K != dataset.K:
        raise ValueError(f"system has {system.K} states, data has {dataset.K}")
    if step_one is None:
        step_one = run_step_one(dataset, config)
    gamma0 = np.full(dataset.K, float(config.gamma_init))
    ctx = RiskContext.from_gp_states(
        step_one.states, dataset.y, system, gamma=gamma0, gamma_min=config.gamma_min
    )
    joint = not config.fixed_gamma and config.gamma_mode == "joint"
    profiled = not config.fixed_gamma and config.gamma_mode == "profiled"
    if profiled:
        objective = profiled_objective(ctx)
    else:
        objective = flat_objective(ctx, fixed_gamma=None if joint else gamma0)
    preconditioner = None
    if config.precondition:
        preconditioner = gauss_newton_preconditioner(
            ctx, fixed_gamma=None if (joint or profiled) else gamma0, profiled=profiled
        )
    bounds = build_bounds(ctx, config, with_gamma=joint)
    x0 = step_one.mean

    best = None
    for theta0 in _theta_starts(system, config):
        z0 = ctx.pack(x0, theta0, gamma0) if joint else ctx.pack(x0, theta0, [])
        try:
            risk0 = objective(bounds.project(z0))[0]
            report = minimize(objective, True, z0, bounds, config.optimizer,
                              preconditioner=preconditioner)
        except (OdinError, ArithmeticError, ValueError) as err:
            raise _stage(err, "step 2: risk minimization")
        if best is None or report.fun < best[0].fun:
            best = (report, theta0, risk0)

    report, theta0, risk0 = best
    if joint:
        x, theta, gamma = ctx.unpack(report.x)
    else:
        nx = ctx.N * ctx.K
        x, theta = report.x[:nx].reshape(ctx.N, ctx.K), report.x[nx:]
        gamma = profiled_gamma(x, theta, ctx) if profiled else gamma0
    return OdinResult(
        x=x.copy(),
        theta=theta.copy(),
        gamma=np.array(gamma, dtype=float),
        hyperparams=step_one.hyperparams,
        risk=float(report.fun),
        report=report,
        transform=step_one.transform,
        runtime_seconds=time.perf_counter() - start,
        seed=config.seed,
        theta_start=theta0,
        risk_start=float(risk0),
        x_start=x0,
    )


def risk_context(dataset, system, config: OdinConfig = None, step_one: StepOne = None):
    """Risk context exactly as ``fit`` builds it; handy for diagnostics."""
    config = config or OdinConfig()
    step_one = step_one or run_step_one(dataset, config)
    return RiskContext.from_gp_states(
        step_one.states, dataset.y, system, gamma=config.gamma_init,
        gamma_min=config.gamma_min,
    )


def evaluate_risk(result: OdinResult, dataset, system, config: OdinConfig = None):
    ctx = risk_context(dataset, system, config)
    return risk_full(result.x, result.theta, result.gamma, ctx)
