"""Simulation, scoring and the four reproducible studies.

Every study draws realization ``i`` from seed ``master_seed + i``, runs the
realizations (optionally in a process pool), and writes records in
realization order so output files do not depend on scheduling.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from odin import __version__
from odin.dataset import TimeSeriesDataset
from odin.errors import DomainError, IntegrationError, OdinError
from odin.integrator import DATA_SETTINGS, SCORING_SETTINGS, integrate
from odin.ode_models import get_system
from odin.odin_core import OdinConfig, fit, run_step_one
from odin.optimizer import OptimizerSettings, minimize

MODEL_SELECTION_CANDIDATES = ("lv-m11", "lv-m01", "lv-m10", "lv-m00")
SNR_CONVENTION = "sigma_k = population std over the grid of true state k / sqrt(SNR)"
TRMSE_LITERAL = "(1/N) * ||x_tilde - x||_2"
TRMSE_CONVENTIONAL = "||x_tilde - x||_2 / sqrt(N)"


@dataclass(frozen=True)
class NoiseSpec:
    """Observation noise: an absolute standard deviation or a signal-to-noise ratio."""

    mode: str
    value: float

    def __post_init__(self):
        if self.mode not in ("sigma", "snr"):
            raise ValueError(f"noise mode must be 'sigma' or 'snr', not {self.mode!r}")
        v = float(self.value)
        if not math.isfinite(v) or v < 0 or (self.mode == "snr" and v == 0):
            raise ValueError(f"invalid noise value {self.value!r} for mode {self.mode}")
        object.__setattr__(self, "value", v)

    @classmethod
    def preset(cls, system, level="low"):
        mode, value = system.canonical.noise_presets[level]
        return cls(mode, value)

    def resolve(self, x_true):
        """Per-state standard deviations for a true trajectory ``(N, K)``."""
        x_true = np.asarray(x_true, dtype=float)
        K = x_true.shape[1]
        if self.mode == "sigma":
            return np.full(K, self.value)
        spread = x_true.std(axis=0)
        if np.any(spread == 0):
            raise ValueError("SNR noise is undefined for a constant state")
        return spread / math.sqrt(self.value)

    def to_dict(self):
        return {"mode": self.mode, "value": self.value}


def generate_dataset(system, theta, x0, t, noise: NoiseSpec, seed) -> TimeSeriesDataset:
    """Integrate the true trajectory and add independent Gaussian noise."""
    t = np.asarray(t, dtype=float)
    x_true = integrate(system, theta, x0, t, DATA_SETTINGS)
    sigma = noise.resolve(x_true)
    rng = np.random.default_rng(seed)
    y = x_true + rng.standard_normal(x_true.shape) * sigma
    return TimeSeriesDataset(
        t=t, y=y, x_true=x_true, theta_true=np.atleast_1d(np.asarray(theta, float)),
        x0_true=np.asarray(x0, dtype=float), noise_sigma=sigma,
    )


def canonical_dataset(system, noise: NoiseSpec, seed):
    c = system.canonical
    return generate_dataset(system, c.theta, c.x0, c.t, noise, seed)


def trajectory_rmse(theta_hat, system, x_true, x0, t, conventional=False):
    """Trajectory RMSE of estimated parameters, from the true initial value.

    Per state ``k`` the score is ``||x_tilde_k - x_k||_2 / N`` (or
    ``/ sqrt(N)`` with ``conventional``); the total applies the same formula
    to all states stacked. When integration under ``theta_hat`` fails, every
    entry is ``+inf``, a sentinel the summaries count separately.

    Returns
    -------
    per_state : ndarray, shape (K,)
    total : float
    """
    x_true = np.asarray(x_true, dtype=float)
    N, K = x_true.shape
    denom = math.sqrt(N) if conventional else N
    try:
        x_tilde = integrate(system, theta_hat, x0, t, SCORING_SETTINGS)
    except (IntegrationError, DomainError, ArithmeticError, ValueError):
        return np.full(K, math.inf), math.inf
    diff = x_tilde - x_true
    per_state = np.linalg.norm(diff, axis=0) / denom
    return per_state, float(np.linalg.norm(diff) / denom)


def state_rmse(x_hat, x_true):
    """Root mean squared error over all states and time points."""
    diff = np.asarray(x_hat, float) - np.asarray(x_true, float)
    return float(np.sqrt(np.mean(diff**2)))


def gradient_matching_baseline(dataset, system, config: OdinConfig = None, step_one=None):
    """Two-stage estimate: GP posterior mean, then least squares on the vector field.

    The GP mean and its derivative ``D @ mean`` are held fixed and
    ``sum_k ||D_k mu_k - f_k(mu, theta)||^2`` is minimized over ``theta``
    with unit weights.
    """
    config = config or OdinConfig()
    step_one = step_one or run_step_one(dataset, config)
    mu = step_one.mean
    slopes = np.column_stack([
        s.D @ (mu[:, k] - s.mean) for k, s in enumerate(step_one.states)
    ])

    def objective(theta):
        res = system.f(mu, theta) - slopes
        return float(np.sum(res**2)), 2.0 * system.vjp_theta(mu, theta, res)

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    theta0 = (np.asarray(config.theta_init, float) if config.theta_init is not None
              else rng.uniform(config.theta_low, config.theta_high, size=system.P))
    report = minimize(objective, True, theta0, settings=OptimizerSettings(max_iter=500))
    return report.x


# --------------------------------------------------------------------------
# records, summaries and files
# --------------------------------------------------------------------------

@dataclass
class ExperimentRecord:
    system: str
    noise: NoiseSpec
    seed: int
    trmse_total: float
    trmse_states: np.ndarray
    state_rmse_odin: float
    state_rmse_gpr: float
    gamma: np.ndarray
    theta: np.ndarray
    runtime_seconds: float
    error: Optional[str] = None

    def row(self):
        return (
            [self.system, self.noise.mode, _fmt(self.noise.value), str(self.seed),
             _fmt(self.trmse_total)]
            + [_fmt(v) for v in self.trmse_states]
            + [_fmt(self.state_rmse_odin), _fmt(self.state_rmse_gpr)]
            + [_fmt(v) for v in self.gamma]
            + [_fmt(v) for v in self.theta]
            + [_fmt(self.runtime_seconds)]
        )


def record_header(K, P):
    return (
        ["system", "noise_mode", "noise_value", "seed", "trmse_total"]
        + [f"trmse_s{k + 1}" for k in range(K)]
        + ["state_rmse_odin", "state_rmse_gpr"]
        + [f"gamma_{k + 1}" for k in range(K)]
        + [f"theta_{p + 1}" for p in range(P)]
        + ["runtime_seconds"]
    )


def _fmt(v):
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def write_rows(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(r) + "\n")


def quantiles(values):
    """25/50/75% quantiles over finite values; sentinels are only counted."""
    v = np.asarray(values, dtype=float)
    finite = v[np.isfinite(v)]
    out = {"n": int(v.size), "n_sentinel": int(v.size - finite.size)}
    if finite.size:
        q = np.quantile(finite, [0.25, 0.5, 0.75])
        out.update(q25=float(q[0]), median=float(q[1]), q75=float(q[2]))
    else:
        out.update(q25=None, median=None, q75=None)
    return out


def config_hash(config: OdinConfig):
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def manifest(study, config, master_seed, reps, **extra):
    m = {
        "study": study,
        "package_version": __version__,
        "master_seed": int(master_seed),
        "reps": int(reps),
        "seeds": [int(master_seed) + i for i in range(reps)],
        "config": config.to_dict(),
        "config_hash": config_hash(config),
        "snr_convention": SNR_CONVENTION,
    }
    m.update(extra)
    return m


def write_json(path, payload):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _summary_path(out):
    return f"{out}.summary.json"


def _run_ordered(task, jobs, workers):
    """Apply ``task`` to ``jobs`` and return results in job order."""
    if workers is None or workers <= 1 or len(jobs) <= 1:
        return [task(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(task, jobs))


# --------------------------------------------------------------------------
# parameter and state inference
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class _RealizationJob:
    system_name: str
    noise: NoiseSpec
    seed: int
    config: OdinConfig
    conventional: bool = False
    system_kwargs: dict = field(default_factory=dict)


def run_realization(job: _RealizationJob) -> ExperimentRecord:
    """Simulate, fit and score one noise realization."""
    system = get_system(job.system_name, **job.system_kwargs)
    data = canonical_dataset(system, job.noise, job.seed)
    config = _with_seed(job.config, job.seed)
    start = time.perf_counter()
    try:
        result = fit(data, system, config)
    except (OdinError, ArithmeticError, ValueError) as err:
        K, P = system.K, system.P
        return ExperimentRecord(
            system=job.system_name, noise=job.noise, seed=job.seed,
            trmse_total=math.inf, trmse_states=np.full(K, math.inf),
            state_rmse_odin=math.inf, state_rmse_gpr=math.nan,
            gamma=np.full(K, math.nan), theta=np.full(P, math.nan),
            runtime_seconds=time.perf_counter() - start,
            error=f"{getattr(err, 'stage', 'fit')}: {err}",
        )
    runtime = time.perf_counter() - start
    c = system.canonical
    per_state, total = trajectory_rmse(
        result.theta, system, data.x_true, data.x0_true, c.t, conventional=job.conventional
    )
    return ExperimentRecord(
        system=job.system_name, noise=job.noise, seed=job.seed,
        trmse_total=total, trmse_states=per_state,
        state_rmse_odin=state_rmse(result.x, data.x_true),
        state_rmse_gpr=state_rmse(result.x_start, data.x_true),
        gamma=result.gamma, theta=result.theta, runtime_seconds=runtime,
    )


def _with_seed(config, seed):
    d = config.to_dict()
    d["seed"] = int(seed)
    return OdinConfig.from_dict(d)


def _inference_study(study, system_name, noise, reps, config, out, master_seed,
                     workers, conventional):
    config = config or OdinConfig()
    jobs = [
        _RealizationJob(system_name, noise, master_seed + i, config, conventional)
        for i in range(reps)
    ]
    records = _run_ordered(run_realization, jobs, workers)
    system = get_system(system_name)
    summary = {
        "trmse_total": quantiles([r.trmse_total for r in records]),
        "trmse_states": [
            quantiles([r.trmse_states[k] for r in records]) for k in range(system.K)
        ],
        "state_rmse_odin": quantiles([r.state_rmse_odin for r in records]),
        "state_rmse_gpr": quantiles([r.state_rmse_gpr for r in records]),
        "runtime_seconds": quantiles([r.runtime_seconds for r in records]),
        "failures": [{"seed": r.seed, "error": r.error} for r in records if r.error],
        "manifest": manifest(
            study, config, master_seed, reps, system=system_name, noise=noise.to_dict(),
            trmse_convention=TRMSE_CONVENTIONAL if conventional else TRMSE_LITERAL,
        ),
    }
    if out is not None:
        write_rows(out, record_header(system.K, system.P), [r.row() for r in records])
        write_json(_summary_path(out), summary)
    return records, summary


def run_parameter_inference(system_name, noise: NoiseSpec, reps=20, config=None, out=None,
                            master_seed=0, workers=1, conventional=False):
    """Repeated fits on fresh noise with fixed truth; scored by trajectory RMSE."""
    return _inference_study("parameter-inference", system_name, noise, reps, config, out,
                            master_seed, workers, conventional)


def run_state_inference(system_name, noise: NoiseSpec, reps=20, config=None, out=None,
                        master_seed=0, workers=1):
    """Same realizations as parameter inference, summarized by state RMSE of
    the estimator against plain GP regression."""
    return _inference_study("state-inference", system_name, noise, reps, config, out,
                            master_seed, workers, False)


# --------------------------------------------------------------------------
# model selection
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class _SelectionJob:
    noise: NoiseSpec
    seed: int
    config: OdinConfig
    candidates: tuple


def _selection_realization(job: _SelectionJob):
    truth = get_system("lv")
    data = canonical_dataset(truth, job.noise, job.seed)
    config = _with_seed(job.config, job.seed)
    step_one = run_step_one(data, config)
    rows = []
    for name in job.candidates:
        system = get_system(name)
        start = time.perf_counter()
        try:
            result = fit(data, system, config, step_one=step_one)
            gamma, theta, err = result.gamma, result.theta, None
        except (OdinError, ArithmeticError, ValueError) as e:
            gamma, theta, err = np.full(2, math.nan), np.full(system.P, math.nan), str(e)
        rows.append({
            "model": name, "seed": job.seed, "gamma": np.asarray(gamma, float),
            "theta": np.asarray(theta, float),
            "runtime_seconds": time.perf_counter() - start, "error": err,
        })
    return rows


def run_model_selection(noise: NoiseSpec = NoiseSpec("sigma", 0.1), reps=20, config=None,
                        out=None, master_seed=0, workers=1,
                        candidates=MODEL_SELECTION_CANDIDATES):
    """Fit every candidate LV parameterization to the same data and tabulate
    the optimized derivative-noise variances."""
    config = config or OdinConfig()
    jobs = [_SelectionJob(noise, master_seed + i, config, tuple(candidates)) for i in range(reps)]
    per_rep = _run_ordered(_selection_realization, jobs, workers)
    rows = [row for rep in per_rep for row in rep]
    table = {}
    for name in candidates:
        g = np.array([r["gamma"] for r in rows if r["model"] == name])
        finite = np.isfinite(g).all(axis=1)
        entry = {"n": int(g.shape[0]), "n_failed": int((~finite).sum())}
        for k in range(g.shape[1]):
            gk = g[finite, k]
            entry[f"gamma_{k + 1}_median"] = float(np.median(gk)) if gk.size else None
            entry[f"gamma_{k + 1}_std"] = float(np.std(gk)) if gk.size else None
        table[name] = entry
    summary = {
        "table": table,
        "manifest": manifest("model-selection", config, master_seed, reps,
                             system="lv", noise=noise.to_dict(), candidates=list(candidates)),
    }
    if out is not None:
        max_p = max(get_system(n).P for n in candidates)
        header = (["model", "seed", "gamma_1", "gamma_2"]
                  + [f"theta_{p + 1}" for p in range(max_p)] + ["runtime_seconds"])
        lines = []
        for r in rows:
            theta = list(r["theta"]) + [math.nan] * (max_p - r["theta"].size)
            lines.append([r["model"], str(r["seed"])] + [_fmt(v) for v in r["gamma"]]
                         + [_fmt(v) for v in theta] + [_fmt(r["runtime_seconds"])])
        write_rows(out, header, lines)
        write_json(_summary_path(out), summary)
    return rows, summary


# --------------------------------------------------------------------------
# scaling
# --------------------------------------------------------------------------

def linear_fit(x, y):
    """Least-squares line ``y = slope * x + intercept`` and its R^2."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    A = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def run_scaling(dims=(25, 50, 100, 200), reps=5, config=None, out=None, master_seed=0,
                noise: NoiseSpec = None, workers=1):
    """Wall-clock runtime of full fits on Lorenz '96 as the dimension grows.

    Runs are sequential by default so timings do not compete for cores.
    """
    config = config or OdinConfig()
    noise = noise or NoiseSpec.preset(get_system("lorenz96", K=4))
    jobs = [
        _RealizationJob("lorenz96", noise, master_seed + i, config, False, {"K": int(K)})
        for K in dims for i in range(reps)
    ]
    records = _run_ordered(run_realization, jobs, workers)
    rows, means = [], []
    for j, K in enumerate(dims):
        times = np.array([r.runtime_seconds for r in records[j * reps:(j + 1) * reps]])
        means.append(float(times.mean()))
        rows.append({"K": int(K), "mean_seconds": means[-1], "std_seconds": float(times.std()),
                     "runtimes": times.tolist()})
    slope, intercept, r2 = linear_fit(dims, means)
    summary = {
        "rows": rows,
        "fit": {"slope": slope, "intercept": intercept, "r2": r2},
        "manifest": manifest("scaling", config, master_seed, reps, system="lorenz96",
                             dims=[int(d) for d in dims], noise=noise.to_dict()),
    }
    if out is not None:
        write_rows(out, ["K", "rep", "seed", "runtime_seconds", "trmse_total"],
                   [[str(K), str(i), str(master_seed + i),
                     _fmt(records[j * reps + i].runtime_seconds),
                     _fmt(records[j * reps + i].trmse_total)]
                    for j, K in enumerate(dims) for i in range(reps)])
        write_json(_summary_path(out), summary)
    return records, summary
