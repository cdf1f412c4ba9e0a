"""
Monte Carlo harness and experiment studies.
Runs path batches (inline or in worker processes) with deterministic merging,
fits regression laws to the results, and writes CSV/JSON outputs.
"""

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats as sps

import settings
from .base_engine import BaseEngine
from .errors import BlowupLimitExceeded, DegenerateEnvelope, InvalidParameter
from .estimators import EstimatorSpec, sample_batch
from .extrapolation import horizon_for_sigma, ode_reference, ode_sensitivity
from .integrate import EstimatorKind, StepPolicy
from .mlmc import MlmcConfig
from .models import ModelParams, SdeModel, build_model, default_params
from .stats import MCStats, merge_all

logger = logging.getLogger("sdesens.harness")

# =============================================================================
# REGRESSION
# =============================================================================

@dataclass(frozen=True)
class FitResult:
    """Least-squares line with its coefficient of determination and standard errors."""

    slope: float
    intercept: float
    r_squared: float
    slope_stderr: float = float("nan")
    intercept_stderr: float = float("nan")

    def to_dict(self) -> Dict[str, float]:
        return {"slope": self.slope, "intercept": self.intercept, "r2": self.r_squared}


_TRANSFORMS = {
    "linear": (False, False),
    "lin-lin": (False, False),
    "log-linear": (False, True),
    "log-lin": (False, True),
    "log-log": (True, True),
}


def fit_loglinear(points: Sequence[Tuple[float, float]], transform: str = "linear") -> FitResult:
    """
    Ordinary least squares on transformed coordinates.

    Args:
        points: (x, y) pairs
        transform: "linear", "log-linear" (log y on x) or "log-log" (log y on log x)

    Returns:
        FitResult in the transformed coordinates (natural logarithms)
    """
    if transform not in _TRANSFORMS:
        raise InvalidParameter(f"unknown transform '{transform}' (expected linear, log-linear or log-log)")
    log_x, log_y = _TRANSFORMS[transform]
    data = np.asarray(points, dtype=float).reshape(-1, 2)
    x, y = data[:, 0], data[:, 1]
    if np.unique(x).size < 2:
        raise InvalidParameter("a fit needs at least 2 distinct x values")
    if log_x:
        if (x <= 0).any():
            raise InvalidParameter("log transform of non-positive x")
        x = np.log(x)
    if log_y:
        if (y <= 0).any():
            raise InvalidParameter("log transform of non-positive y")
        y = np.log(y)
    res = sps.linregress(x, y)
    r_squared = float(np.clip(res.rvalue ** 2, 0.0, 1.0)) if np.isfinite(res.rvalue) else 1.0
    return FitResult(float(res.slope), float(res.intercept), r_squared,
                     float(res.stderr), float(res.intercept_stderr))


# =============================================================================
# EXPERIMENT CONFIGURATION
# =============================================================================

def _env_default(key: str, default: int):
    return field(default_factory=lambda: settings.env_int(key, default))


@dataclass
class ExperimentConfig:
    """All knobs of one experiment; mirrors the keys of a JSON config file."""

    model: str = "lorenz"
    theta: Optional[float] = None
    sigma: Optional[float] = None
    x0: Optional[List[float]] = None
    kappa: float = settings.OU_KAPPA
    mu: float = settings.OU_MU
    observable_index: int = settings.LORENZ_OBSERVABLE_INDEX
    estimator: str = EstimatorKind.ISPS_THETA.value
    spring: float = settings.DEFAULT_SPRING
    fd_epsilon: Optional[float] = None
    fd_target: str = "theta"
    direction: Optional[List[float]] = None
    study: str = ""
    seed: int = _env_default(settings.ENV_SEED, settings.DEFAULT_SEED)
    paths: int = _env_default(settings.ENV_PATHS, settings.DEFAULT_PATHS)
    workers: int = _env_default(settings.ENV_WORKERS, settings.DEFAULT_WORKERS)
    batch_size: int = _env_default(settings.ENV_BATCH, settings.DEFAULT_BATCH)
    out_dir: str = field(default_factory=lambda: settings.env_str(settings.ENV_OUT, "results"))
    T: Union[float, str] = settings.DEFAULT_T
    T_grid: List[float] = field(default_factory=lambda: [2.0, 4.0, 6.0, 8.0, 10.0, 12.0])
    sigma_grid: List[float] = field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0])
    theta_grid: List[float] = field(default_factory=lambda: [settings.LORENZ_THETA])
    step_mode: str = "uniform"
    h: float = settings.DEFAULT_H
    delta: float = settings.DEFAULT_DELTA
    eps: float = settings.MLMC_EPS
    eps_grid: List[float] = field(default_factory=list)
    h0: float = settings.MLMC_H0
    max_levels: int = settings.MLMC_MAX_LEVELS
    n_init: int = settings.MLMC_INITIAL_SAMPLES
    levels: List[int] = field(default_factory=list)
    order: int = 2
    t_max: float = settings.RR_T_MAX
    window: int = settings.ENVELOPE_WINDOW
    spacing: float = settings.ENVELOPE_SPACING
    allow_blowups: Optional[bool] = None
    clamp: Optional[float] = None
    write_csv: bool = True

    def __post_init__(self):
        for name in ("T_grid", "sigma_grid", "theta_grid"):
            grid = getattr(self, name)
            if not grid:
                raise InvalidParameter(f"{name} must not be empty")
            if name != "theta_grid" and any(not v > 0 for v in grid):
                raise InvalidParameter(f"{name} must be positive, got {grid}")
        if any(not v > 0 for v in self.eps_grid):
            raise InvalidParameter(f"eps_grid must be positive, got {self.eps_grid}")
        if self.paths < 2:
            raise InvalidParameter(f"paths must be >= 2, got {self.paths}")
        if self.workers < 1 or self.batch_size < 1:
            raise InvalidParameter("workers and batch_size must be >= 1")
        if not (self.T == "auto" or (isinstance(self.T, (int, float)) and self.T > 0)):
            raise InvalidParameter(f"T must be positive or 'auto', got {self.T}")

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> "ExperimentConfig":
        """Build from a mapping (e.g. a parsed JSON file); unknown keys are rejected."""
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise InvalidParameter(f"unknown config key '{unknown[0]}'")
        return cls(**dict(mapping))

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as handle:
            return cls.from_mapping(json.load(handle))

    def merged(self, overrides: Mapping[str, Any]) -> "ExperimentConfig":
        """Copy with the non-None overrides applied."""
        data = self.to_dict()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return ExperimentConfig.from_mapping(data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def build_model(self) -> SdeModel:
        return build_model(self.model, kappa=self.kappa, mu=self.mu, observable_index=self.observable_index)

    def build_params(self, model: Optional[SdeModel] = None) -> ModelParams:
        return default_params(model or self.build_model(), self.theta, self.sigma, self.x0)

    def policy(self) -> StepPolicy:
        return StepPolicy(mode=self.step_mode, h=self.h, delta=self.delta)

    def spec(self) -> EstimatorSpec:
        direction = None if self.direction is None else tuple(self.direction)
        return EstimatorSpec.parse(self.estimator, self.spring, fd_epsilon=self.fd_epsilon, direction=direction)

    def mlmc_config(self) -> MlmcConfig:
        return MlmcConfig(eps=self.eps, h0=self.h0, spring=self.spring, max_levels=self.max_levels,
                          n_init=self.n_init, batch_size=self.batch_size)


# =============================================================================
# MONTE CARLO DRIVER
# =============================================================================

@dataclass
class McJob:
    model: SdeModel
    params: ModelParams
    spec: EstimatorSpec
    T: float
    policy: StepPolicy
    n_paths: int
    master_seed: int = settings.DEFAULT_SEED
    workers: int = settings.DEFAULT_WORKERS
    batch_size: int = settings.DEFAULT_BATCH
    allow_blowups: Optional[bool] = None
    clamp: Optional[float] = None
    snapshot_times: Optional[Tuple[float, ...]] = None


@dataclass
class _BatchOutcome:
    stats: MCStats
    blowups: int
    clamped: int
    cost: int
    snapshot_stats: List[MCStats]
    moment_stats: List[MCStats]


@dataclass
class McRunResult:
    """Merged statistics of a run plus its blow-up and clamp counts."""

    stats: MCStats
    blowups: int
    clamped: int
    total_cost: int
    snapshot_stats: List[MCStats] = field(default_factory=list)
    moment_stats: List[MCStats] = field(default_factory=list)


def _run_batch(job: McJob, start: int, stop: int) -> _BatchOutcome:
    samples = sample_batch(job.model, job.params, job.spec, job.T, job.policy, job.master_seed,
                           range(start, stop), snapshot_times=job.snapshot_times)
    keep = ~samples.blown
    values = samples.values[keep]
    clamped = 0
    if job.clamp is not None:
        over = np.abs(values) > job.clamp
        clamped = int(over.sum())
        values = np.clip(values, -job.clamp, job.clamp)

    snapshot_stats, moment_stats = [], []
    if samples.snapshots is not None:
        for states in samples.snapshots:
            alive = states[keep]
            snapshot_stats.append(MCStats.from_values(job.model.observable(alive)))
            moment_stats.append(MCStats.from_values(np.sum(alive ** 2, axis=1) ** 2))
    return _BatchOutcome(MCStats.from_values(values), int((~keep).sum()), clamped,
                         int(samples.costs.sum()), snapshot_stats, moment_stats)


def _merge_lists(parts: List[List[MCStats]]) -> List[MCStats]:
    if not parts or not parts[0]:
        return []
    return [merge_all(column) for column in zip(*parts)]


class MonteCarloEngine(BaseEngine):
    """Evaluates N path samples in fixed-size batches and merges them in batch order."""

    def __init__(self, config: Dict[str, Any] = None):
        super().__init__("harness", config)

    def run(self, job: McJob) -> McRunResult:
        """
        Run one Monte Carlo estimate.

        Batch boundaries depend only on batch_size, so the merged result is
        identical for every worker count.

        Args:
            job: The run description

        Returns:
            McRunResult with merged statistics

        Raises:
            BlowupLimitExceeded: when more than 1% of paths blow up and blow-ups are not allowed
        """
        if job.n_paths < 2:
            raise InvalidParameter(f"mc_run needs at least 2 paths, got {job.n_paths}")
        self.log(settings.RUN_START_MESSAGE.format(kind=job.spec.kind.value, model=job.model.name,
                                                   n=job.n_paths, T=job.T, seed=job.master_seed))
        starts = list(range(0, job.n_paths, job.batch_size))
        stops = [min(s + job.batch_size, job.n_paths) for s in starts]
        if job.workers > 1 and len(starts) > 1:
            with ProcessPoolExecutor(max_workers=job.workers) as pool:
                outcomes = list(pool.map(_run_batch, [job] * len(starts), starts, stops))
        else:
            outcomes = []
            for start, stop in zip(starts, stops):
                outcomes.append(_run_batch(job, start, stop))
                self.log(f"batch {start}..{stop - 1} done", logging.DEBUG)

        result = McRunResult(
            stats=merge_all(o.stats for o in outcomes),
            blowups=sum(o.blowups for o in outcomes),
            clamped=sum(o.clamped for o in outcomes),
            total_cost=sum(o.cost for o in outcomes),
            snapshot_stats=_merge_lists([o.snapshot_stats for o in outcomes]),
            moment_stats=_merge_lists([o.moment_stats for o in outcomes]),
        )
        if result.clamped:
            self.log(settings.CLAMP_MESSAGE.format(clamped=result.clamped, n=job.n_paths, limit=job.clamp),
                     logging.WARNING)
        if result.blowups:
            self.log(settings.BLOWUP_MESSAGE.format(blowups=result.blowups, n=job.n_paths), logging.WARNING)
            allow = job.allow_blowups
            if allow is None:
                allow = job.spec.kind is EstimatorKind.STANDARD_PS
            if not allow and result.blowups > settings.BLOWUP_TOLERANCE * job.n_paths:
                raise BlowupLimitExceeded(result.blowups, job.n_paths)
        return result


def mc_run(model: SdeModel, params: ModelParams, spec: Union[EstimatorSpec, EstimatorKind], T: float,
           policy: StepPolicy, N: int, seed: int, S: Optional[float] = None, workers: int = 1,
           batch_size: int = settings.DEFAULT_BATCH) -> MCStats:
    """Monte Carlo statistics of N estimator samples with path indices 0..N-1."""
    if isinstance(spec, EstimatorKind):
        spec = EstimatorSpec(spec, settings.DEFAULT_SPRING if S is None else S)
    elif S is not None:
        spec = EstimatorSpec(spec.kind, S, spec.fd_epsilon, spec.direction)
    return MonteCarloEngine().run(McJob(model, params, spec, T, policy, N, seed, workers, batch_size)).stats


# =============================================================================
# STUDIES
# =============================================================================

@dataclass
class StudyResult:
    """Rows for the CSV output plus the headline numbers for the JSON summary."""

    rows: List[Dict[str, Any]]
    fit: Optional[FitResult] = None
    estimate: Optional[float] = None
    stderr: Optional[float] = None
    total_cost: int = 0
    extra: Dict[str, Any] = field(default_factory=dict)


def _job(config: ExperimentConfig, model: SdeModel, params: ModelParams, spec: EstimatorSpec, T: float,
         **overrides) -> McJob:
    job = McJob(model, params, spec, T, config.policy(), config.paths, config.seed, config.workers,
                config.batch_size, config.allow_blowups, config.clamp)
    for key, value in overrides.items():
        setattr(job, key, value)
    return job


def variance_vs_T_study(config: ExperimentConfig) -> StudyResult:
    """
    Estimator variance over a grid of horizons.

    The standard pathwise estimator is fitted as log-variance on T (its values
    are clamped at 1e12 unless a clamp is configured); the other kinds as
    log-variance on log T.
    """
    if len(config.T_grid) < 4:
        raise InvalidParameter(f"variance study needs at least 4 horizons, got {len(config.T_grid)}")
    model = config.build_model()
    params = config.build_params(model)
    spec = config.spec()
    standard = spec.kind is EstimatorKind.STANDARD_PS
    clamp = config.clamp if config.clamp is not None else (settings.STANDARD_PS_CLAMP if standard else None)
    engine = MonteCarloEngine()

    rows, cost, clamped = [], 0, 0
    for T in config.T_grid:
        run = engine.run(_job(config, model, params, spec, float(T), clamp=clamp))
        cost += run.total_cost
        clamped += run.clamped
        rows.append({"T": float(T), "mean": run.stats.mean, "variance": run.stats.variance,
                     "stderr": run.stats.stderr, "n": run.stats.n, "blowups": run.blowups})

    points = [(r["T"], r["variance"]) for r in rows if r["variance"] > 0]
    fit = fit_loglinear(points, "log-linear" if standard else "log-log")
    logger.info(f"variance fit: slope={fit.slope:.4g}, r2={fit.r_squared:.4g}")
    return StudyResult(rows, fit, total_cost=cost, extra={"clamped": clamped})


def envelope_fit(times: Sequence[float], means: Sequence[float],
                 window: int = settings.ENVELOPE_WINDOW) -> Tuple[FitResult, List[Dict[str, float]]]:
    """
    Log-linear fit of the moving error bound of a converging mean.

    The bound at t_i is half the max-min spread of the means over the trailing
    `window` grid points ending at t_i.

    Returns:
        (fit of log bound on t, rows with keys t, mean, envelope)
    """
    if window < 3:
        raise InvalidParameter(f"envelope window must be >= 3 grid points, got {window}")
    times = np.asarray(times, dtype=float)
    means = np.asarray(means, dtype=float)
    if times.size < window + 1:
        raise InvalidParameter(f"need more than {window} grid points, got {times.size}")
    rows, points = [], []
    for i in range(window - 1, times.size):
        chunk = means[i - window + 1:i + 1]
        bound = 0.5 * (chunk.max() - chunk.min())
        if not bound > 0:
            raise DegenerateEnvelope(float(times[i]))
        rows.append({"t": float(times[i]), "mean": float(means[i]), "envelope": float(bound)})
        points.append((float(times[i]), float(bound)))
    return fit_loglinear(points, "log-linear"), rows


@dataclass
class LambdaStarResult:
    fit: FitResult
    rows: List[Dict[str, float]]
    total_cost: int = 0

    @property
    def lambda_star(self) -> float:
        """Convergence speed: minus the fitted slope of the log error bound."""
        return -self.fit.slope


def lambda_star_estimate(model: SdeModel, params: ModelParams, T_max: float, N: int,
                         window: int = settings.ENVELOPE_WINDOW, spacing: float = settings.ENVELOPE_SPACING,
                         policy: Optional[StepPolicy] = None, seed: int = settings.DEFAULT_SEED,
                         workers: int = 1, batch_size: int = settings.DEFAULT_BATCH) -> LambdaStarResult:
    """
    Convergence speed of E[phi(X_t)] towards its invariant-measure value.

    Args:
        model: The SDE model
        params: Model parameters
        T_max: Last time of the snapshot grid
        N: Number of paths
        window: Trailing window of the envelope, in grid points
        spacing: Snapshot grid spacing
        policy: Step policy (default uniform h)
        seed: Master seed
        workers: Worker processes
        batch_size: Paths per batch

    Returns:
        LambdaStarResult with the log-envelope fit and envelope rows
    """
    if not spacing > 0 or not T_max > spacing:
        raise InvalidParameter(f"need 0 < spacing < T_max, got spacing={spacing}, T_max={T_max}")
    times = tuple(spacing * k for k in range(1, int(math.floor(T_max / spacing + 1e-9)) + 1))
    job = McJob(model, params, EstimatorSpec(EstimatorKind.VALUE), times[-1],
                policy or StepPolicy.uniform(settings.DEFAULT_H), N, seed, workers, batch_size,
                snapshot_times=times)
    run = MonteCarloEngine().run(job)
    fit, rows = envelope_fit(times, [s.mean for s in run.snapshot_stats], window)
    logger.info(f"lambda* = {-fit.slope:.4g} (sigma={params.sigma:g}, r2={fit.r_squared:.3g})")
    return LambdaStarResult(fit, rows, run.total_cost)


def lambda_star_sweep(model: SdeModel, params: ModelParams, sigma_grid: Sequence[float], T_max: float, N: int,
                      **kwargs) -> StudyResult:
    """lambda* for each volatility, with a linear fit of lambda* on sigma^2."""
    rows, cost = [], 0
    for sigma in sigma_grid:
        result = lambda_star_estimate(model, params.with_(sigma=float(sigma)), T_max, N, **kwargs)
        cost += result.total_cost
        rows.append({"sigma": float(sigma), "lambda_star": result.lambda_star,
                     "r2": result.fit.r_squared})
    fit = None
    if len(rows) >= 2:
        fit = fit_loglinear([(r["sigma"] ** 2, r["lambda_star"]) for r in rows], "linear")
    return StudyResult(rows, fit, total_cost=cost)


def _reference(model: SdeModel, kind: EstimatorKind, theta: float, ode_T: float, ode_h: float) -> float:
    if kind is EstimatorKind.VALUE:
        return ode_reference(model, theta, ode_T, ode_h)
    if kind in (EstimatorKind.MALLIAVIN, EstimatorKind.STANDARD_PS, EstimatorKind.ISPS_THETA):
        return ode_sensitivity(model, theta, ode_T, ode_h)
    raise InvalidParameter(f"no deterministic reference for estimator '{kind.value}'")


def weak_convergence_study(model: SdeModel, params: ModelParams, theta_grid: Sequence[float],
                           sigma_grid: Sequence[float], spec: EstimatorSpec, N: int,
                           seed: int = settings.DEFAULT_SEED, policy: Optional[StepPolicy] = None,
                           T: Union[float, str] = "auto", references: Optional[Mapping[float, float]] = None,
                           workers: int = 1, batch_size: int = settings.DEFAULT_BATCH,
                           t_max: float = settings.RR_T_MAX, ode_T: float = settings.ODE_T,
                           ode_h: float = settings.ODE_H) -> StudyResult:
    """
    Weak error against the deterministic reference as the volatility shrinks.

    For each theta, the reference comes from `references` or from the RK4
    time average (sensitivity kinds use its finite difference). Each sigma
    runs to the horizon T(sigma) unless T is fixed.

    Returns:
        StudyResult whose fit is the log-log fit of weak error on sigma for the
        first theta; all fits are in extra["fits"]
    """
    if not theta_grid or not sigma_grid:
        raise InvalidParameter("theta and sigma grids must not be empty")
    policy = policy or StepPolicy.uniform(settings.DEFAULT_H)
    engine = MonteCarloEngine()
    rows, fits, cost = [], {}, 0
    for theta in theta_grid:
        theta = float(theta)
        if references is not None and theta in references:
            reference = float(references[theta])
        else:
            reference = _reference(model, spec.kind, theta, ode_T, ode_h)
        theta_rows = []
        for sigma in sigma_grid:
            horizon = horizon_for_sigma(sigma, t_max=t_max) if T == "auto" else float(T)
            run_params = params.with_(theta=theta, sigma=float(sigma))
            run = engine.run(McJob(model, run_params, spec, horizon, policy, N, seed, workers, batch_size))
            cost += run.total_cost
            theta_rows.append({"theta": theta, "sigma": float(sigma), "T": horizon, "estimate": run.stats.mean,
                               "stderr": run.stats.stderr, "weak_error": abs(run.stats.mean - reference)})
        rows.extend(theta_rows)
        positive = [(r["sigma"], r["weak_error"]) for r in theta_rows if r["weak_error"] > 0]
        if len({p[0] for p in positive}) >= 2:
            fits[theta] = fit_loglinear(positive, "log-log")
    first = fits.get(float(theta_grid[0]))
    return StudyResult(rows, first, total_cost=cost, extra={"fits": {k: v.to_dict() for k, v in fits.items()}})


@dataclass
class MomentProfile:
    rows: List[Dict[str, float]]
    ratio: float
    total_cost: int = 0


def moment_profile(model: SdeModel, params: ModelParams, T: float = settings.MOMENT_HORIZON, N: int = 1000,
                   spacing: float = settings.ENVELOPE_SPACING, window: int = settings.ENVELOPE_WINDOW,
                   policy: Optional[StepPolicy] = None, seed: int = settings.DEFAULT_SEED,
                   batch_size: int = settings.DEFAULT_BATCH) -> MomentProfile:
    """
    Sample fourth moment E[|X_t|^4] on a time grid.

    `ratio` compares the mean moment over the last `window` grid points with
    the window ending at T/2; a bounded moment keeps it near 1.
    """
    times = tuple(spacing * k for k in range(1, int(math.floor(T / spacing + 1e-9)) + 1))
    if len(times) < 2 * window:
        raise InvalidParameter(f"need at least {2 * window} grid points for the moment windows")
    job = McJob(model, params, EstimatorSpec(EstimatorKind.VALUE), times[-1],
                policy or StepPolicy.uniform(settings.DEFAULT_H), N, seed, 1, batch_size,
                snapshot_times=times)
    run = MonteCarloEngine().run(job)
    moments = np.array([s.mean for s in run.moment_stats])
    mid = int(np.searchsorted(np.asarray(times), 0.5 * T, side="right"))
    mid = max(mid, window)
    ratio = float(moments[-window:].mean() / moments[mid - window:mid].mean())
    rows = [{"t": t, "moment4": float(m)} for t, m in zip(times, moments)]
    return MomentProfile(rows, ratio, run.total_cost)


# =============================================================================
# OUTPUT
# =============================================================================

def _plain(value: Any) -> Any:
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def write_csv(path: str, header: Sequence[str], rows: Sequence[Mapping[str, Any]]) -> str:
    """Write rows under an exact header; keys outside the header are ignored."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(header), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _plain(row.get(k)) for k in header})
    return path


def write_json(path: str, payload: Mapping[str, Any]) -> str:
    """Write a JSON document with sorted keys (no timestamps, so re-runs are byte-identical)."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(_plain(dict(payload)), handle, indent=2, sort_keys=True)
        handle.write("\n")
    return path


def summary_payload(command: str, params: Mapping[str, Any], estimate: Optional[float], stderr: Optional[float],
                    fit: Optional[FitResult], total_cost: int, seed: int, **extra) -> Dict[str, Any]:
    """The per-run JSON summary."""
    payload = {
        "command": command,
        "params": dict(params),
        "estimate": estimate,
        "stderr": stderr,
        "fit": fit.to_dict() if fit is not None else None,
        "total_cost_steps": int(total_cost),
        "seed": int(seed),
    }
    payload.update(extra)
    return payload
