"""
Multilevel Monte Carlo for the sensitivity estimators.
Fine and coarse paths are coupled through a spring drift whose effect is
removed by exact discrete Radon-Nikodym weights, so the level differences
stay small on chaotic dynamics.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy import stats as sps

import settings
from .base_engine import BaseEngine
from .errors import BlowupLimitExceeded, InvalidParameter, MaxLevelsExceeded, NonFiniteState, UnsupportedKind
from .estimators import BatchSamples, EstimatorSample, EstimatorSpec, estimator_functional
from .integrate import (
    EstimatorKind,
    NoiseBatch,
    NoiseStream,
    StepPolicy,
    derive_seed,
    em_step,
    initial_variation,
    simulate_batch,
    variation_step,
)
from .models import ModelParams, SdeModel
from .stats import MCStats

logger = logging.getLogger("sdesens.mlmc")


@dataclass(frozen=True)
class MlmcConfig:
    """Target accuracy, level hierarchy and coupling spring of an MLMC run."""

    eps: float = settings.MLMC_EPS
    h0: float = settings.MLMC_H0
    spring: float = settings.DEFAULT_SPRING
    max_levels: int = settings.MLMC_MAX_LEVELS
    n_init: int = settings.MLMC_INITIAL_SAMPLES
    refinement: int = 2
    change_of_measure: bool = True
    min_levels: int = settings.MLMC_MIN_LEVELS
    batch_size: int = settings.DEFAULT_BATCH

    def __post_init__(self):
        if not self.eps > 0:
            raise InvalidParameter(f"eps must be > 0, got {self.eps}")
        if not self.h0 > 0:
            raise InvalidParameter(f"h0 must be > 0, got {self.h0}")
        if not 1 <= self.max_levels <= settings.MLMC_LEVELS_CAP:
            raise InvalidParameter(f"max_levels must be in [1, {settings.MLMC_LEVELS_CAP}], got {self.max_levels}")
        if self.refinement != 2:
            raise InvalidParameter(f"only refinement factor 2 is supported, got {self.refinement}")
        if self.spring < 0:
            raise InvalidParameter(f"coupling spring must be >= 0, got {self.spring}")
        if self.n_init < 2:
            raise InvalidParameter(f"n_init must be >= 2, got {self.n_init}")
        if self.batch_size < 1:
            raise InvalidParameter(f"batch_size must be >= 1, got {self.batch_size}")

    @property
    def coupling_spring(self) -> float:
        """Spring used between fine and coarse paths (0 when the change of measure is off)."""
        return self.spring if self.change_of_measure else 0.0

    def step(self, level: int) -> float:
        return self.h0 * 2.0 ** -level

    def without_change_of_measure(self) -> "MlmcConfig":
        return replace(self, change_of_measure=False)


@dataclass
class CoupledLevelState:
    """Fine and coarse augmented paths of a batch, advanced one coarse step at a time."""

    t: float
    y_fine: np.ndarray
    y_coarse: np.ndarray
    v_fine: np.ndarray
    v_coarse: np.ndarray
    log_rn_fine: np.ndarray
    log_rn_coarse: np.ndarray
    ito_fine: np.ndarray
    ito_coarse: np.ndarray
    stream: Optional[NoiseBatch] = None

    @classmethod
    def initial(cls, params: ModelParams, kind: EstimatorKind, n: int,
                direction: Optional[Sequence[float]] = None,
                stream: Optional[NoiseBatch] = None) -> "CoupledLevelState":
        x0 = np.tile(params.x0_array, (n, 1))
        v0 = np.tile(initial_variation(kind, x0.shape[1], direction), (n, 1))
        return cls(0.0, x0, x0.copy(), v0, v0.copy(), np.zeros(n), np.zeros(n),
                   np.zeros(n), np.zeros(n), stream)


@dataclass
class LevelSamples(BatchSamples):
    """Level-difference samples with the terminal RN log-weights of both paths."""

    log_rn_fine: Optional[np.ndarray] = None
    log_rn_coarse: Optional[np.ndarray] = None


@dataclass
class LevelResult:
    level: int
    n_samples: int
    mean: float
    variance: float
    cost: float
    blowups: int = 0

    def to_row(self) -> Dict[str, Any]:
        return {"level": self.level, "N": self.n_samples, "mean": self.mean,
                "variance": self.variance, "cost": self.cost}


@dataclass
class MlmcReport:
    """Telescoped estimate with the per-level table and the fitted level rates."""

    estimate: float
    total_cost: float
    levels: List[LevelResult]
    alpha: float
    beta: float
    gamma: float
    eps: float

    @property
    def stderr(self) -> float:
        return math.sqrt(sum(r.variance / r.n_samples for r in self.levels))

    def to_rows(self) -> List[Dict[str, Any]]:
        return [r.to_row() for r in self.levels]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "estimate": self.estimate,
            "stderr": self.stderr,
            "total_cost": self.total_cost,
            "alpha": self.alpha,
            "beta": self.beta,
            "gamma": self.gamma,
            "eps": self.eps,
            "levels": self.to_rows(),
        }


# =============================================================================
# COUPLING KERNELS
# =============================================================================

def rn_weight_update(log_rn, self_y, other_y, dW, h, S: float, sigma: float):
    """
    Add one step's discrete Girsanov increment to a log Radon-Nikodym weight.

    The path `self_y` carries the extra drift S (other_y - self_y); the weight
    converts back to the measure under which it solves the unmodified scheme:
    log_rn + <(S/sigma)(self - other), dW> - 1/2 (S/sigma)^2 |self - other|^2 h.
    This is exact for the Gaussian one-step Euler transition.

    Args:
        log_rn: Current log-weight, scalar or shape (n,)
        self_y: Left-endpoint state of the path being weighted, shape (..., m)
        other_y: Frozen state of the partner path, shape (..., m)
        dW: Brownian increment under the simulation measure, shape (..., m)
        h: Step size, scalar or shape (n,)
        S: Coupling spring
        sigma: Volatility, must be > 0

    Returns:
        The updated log-weight
    """
    if not sigma > 0:
        raise InvalidParameter("rn_weight_update requires sigma > 0")
    if S == 0:
        return log_rn
    u = (S / sigma) * (np.asarray(self_y) - np.asarray(other_y))
    return log_rn + np.sum(u * dW, axis=-1) - 0.5 * np.sum(u * u, axis=-1) * h


def reconstruct_q_increment(dW_p, self_y, other_y, h, S: float, sigma: float):
    """Brownian increment under the path's own measure: dW_p + (S/sigma)(other - self) h."""
    if not sigma > 0:
        raise InvalidParameter("reconstruct_q_increment requires sigma > 0")
    if S == 0:
        return dW_p
    h = np.asarray(h, dtype=float)
    hc = h[..., None] if h.ndim else h
    return dW_p + (S / sigma) * (np.asarray(other_y) - np.asarray(self_y)) * hc


def _substep(model, params, kind, y, other, v, acc, log_rn, h, dw, S, estimator_spring):
    """One step of a path pulled towards the frozen state `other`; returns (y, v, acc, log_rn)."""
    if S:
        dq = reconstruct_q_increment(dw, y, other, h, S, params.sigma)
        log_rn = rn_weight_update(log_rn, y, other, dw, h, S, params.sigma)
        pull = S * (other - y) * h[:, None]
    else:
        dq, pull = dw, 0.0
    v, acc = variation_step(kind, model, y, params.theta, v, acc, h, dq, params.sigma, estimator_spring)
    y = em_step(y, h[:, None], dw, model, params) + pull
    return y, v, acc, log_rn


def coupled_step(state: CoupledLevelState, h_c: float, dW1: np.ndarray, dW2: np.ndarray, model: SdeModel,
                 params: ModelParams, S: float, kind: EstimatorKind = EstimatorKind.VALUE,
                 estimator_spring: float = 0.0) -> CoupledLevelState:
    """
    Advance a coupled fine/coarse batch by one coarse step.

    The fine path takes two half-steps driven by dW1 then dW2, pulled towards
    the coarse state frozen at the start of the coarse step. The coarse path
    takes one step driven by dW1 + dW2, pulled towards the fine state frozen
    at the same instant. Variation processes and Ito accumulators consume the
    increments reconstructed under each path's own measure.

    Args:
        state: Current coupled state (arrays of shape (n, m) and (n,))
        h_c: Coarse step size
        dW1: First fine half-step increment, shape (n, m)
        dW2: Second fine half-step increment, shape (n, m)
        model: The SDE model
        params: Model parameters
        S: Coupling spring (0 gives the classical shared-noise coupling)
        kind: Estimator kind carried along both paths
        estimator_spring: Spring of the IS-PS variation process

    Returns:
        The new CoupledLevelState
    """
    n = state.y_fine.shape[0]
    h_f = np.full(n, 0.5 * h_c)
    h_coarse = np.full(n, float(h_c))
    yf0, yc0 = state.y_fine, state.y_coarse

    yf1, vf, accf, lrf = _substep(model, params, kind, yf0, yc0, state.v_fine, state.ito_fine,
                                  state.log_rn_fine, h_f, dW1, S, estimator_spring)
    yf2, vf, accf, lrf = _substep(model, params, kind, yf1, yc0, vf, accf, lrf, h_f, dW2, S, estimator_spring)
    yc1, vc, accc, lrc = _substep(model, params, kind, yc0, yf0, state.v_coarse, state.ito_coarse,
                                  state.log_rn_coarse, h_coarse, dW1 + dW2, S, estimator_spring)
    return CoupledLevelState(state.t + h_c, yf2, yc1, vf, vc, lrf, lrc, accf, accc, state.stream)


# =============================================================================
# LEVEL SAMPLERS
# =============================================================================

def _check_coupled(spec: EstimatorSpec, params: ModelParams, config: MlmcConfig) -> None:
    if spec.kind is EstimatorKind.STANDARD_PS:
        raise UnsupportedKind("the standard pathwise estimator is not available for multilevel coupling")
    spec.validate(params)
    if config.coupling_spring > 0:
        params.require_volatility()


def simulate_level(level: int, model: SdeModel, params: ModelParams, spec: EstimatorSpec, T: float,
                   config: MlmcConfig, noise: NoiseBatch) -> LevelSamples:
    """
    Level samples for the paths of one noise batch.

    Level 0 is the plain estimator at step h0. Level l >= 1 returns
    phi~(fine) exp(log_rn_fine) - phi~(coarse) exp(log_rn_coarse) with fine
    step h0 2^-l; its cost is the fine plus coarse step count.
    """
    if level < 0:
        raise InvalidParameter(f"level must be >= 0, got {level}")
    if not T > 0:
        raise InvalidParameter(f"horizon T must be > 0, got {T}")
    model.check_params(params)
    estimator_spring = spec.spring if spec.kind.uses_spring else 0.0

    if level == 0:
        spec.validate(params)
        batch = simulate_batch(model, params, spec.kind, T, StepPolicy.uniform(config.h0), noise,
                               spring=estimator_spring, direction=spec.direction)
        values = np.where(batch.blown, np.nan, estimator_functional(model, spec.kind, batch.x, batch.v,
                                                                    batch.ito_acc))
        zeros = np.zeros(len(noise))
        return LevelSamples(values, batch.steps.copy(), batch.blown.copy(),
                            log_rn_fine=zeros, log_rn_coarse=zeros.copy())

    _check_coupled(spec, params, config)
    S = config.coupling_spring
    h_c = 2.0 * config.step(level)
    n_coarse = max(1, math.ceil(T / h_c - 1e-9))
    n = len(noise)
    state = CoupledLevelState.initial(params, spec.kind, n, spec.direction, noise)
    blown = np.zeros(n, dtype=bool)

    with np.errstate(all="ignore"):
        for k in range(n_coarse):
            step = min(h_c, T - k * h_c)
            root = math.sqrt(0.5 * step)
            dW1 = root * noise.next_normals()
            dW2 = root * noise.next_normals()
            state = coupled_step(state, step, dW1, dW2, model, params, S, spec.kind, estimator_spring)
            finite = np.ones(n, dtype=bool)
            for arr in (state.y_fine, state.y_coarse, state.v_fine, state.v_coarse):
                finite &= np.isfinite(arr).all(axis=1)
            for arr in (state.log_rn_fine, state.log_rn_coarse, state.ito_fine, state.ito_coarse):
                finite &= np.isfinite(arr)
            fresh = ~finite & ~blown
            if fresh.any():
                blown |= fresh
                for arr in (state.y_fine, state.y_coarse, state.v_fine, state.v_coarse,
                            state.log_rn_fine, state.log_rn_coarse, state.ito_fine, state.ito_coarse):
                    arr[fresh] = 0.0

        fine = estimator_functional(model, spec.kind, state.y_fine, state.v_fine, state.ito_fine)
        coarse = estimator_functional(model, spec.kind, state.y_coarse, state.v_coarse, state.ito_coarse)
        values = fine * np.exp(state.log_rn_fine) - coarse * np.exp(state.log_rn_coarse)
    blown |= ~np.isfinite(values)
    values = np.where(blown, np.nan, values)
    costs = np.full(n, 3 * n_coarse, dtype=np.int64)
    return LevelSamples(values, costs, blown, log_rn_fine=state.log_rn_fine, log_rn_coarse=state.log_rn_coarse)


def sample_level_batch(level: int, model: SdeModel, params: ModelParams, spec: EstimatorSpec, T: float,
                       config: MlmcConfig, master_seed: int, indices: Sequence[int]) -> LevelSamples:
    """Level samples for a block of sample indices, on the level's derived sub-stream."""
    noise = NoiseBatch.for_indices(derive_seed(master_seed, level), indices, model.dim)
    return simulate_level(level, model, params, spec, T, config, noise)


def level_sample(level: int, model: SdeModel, params: ModelParams, spec: EstimatorSpec, T: float,
                 config: MlmcConfig, stream: NoiseStream) -> EstimatorSample:
    """
    One level sample driven by `stream`.

    Raises:
        NonFiniteState: if either path of the sample blows up
        UnsupportedKind: for the standard pathwise estimator at level >= 1
    """
    samples = simulate_level(level, model, params, spec, T, config, NoiseBatch([stream], block_steps=64))
    if samples.blown[0]:
        raise NonFiniteState(T, stream.path_index)
    return EstimatorSample(float(samples.values[0]), int(samples.costs[0]))


# =============================================================================
# MLMC DRIVER
# =============================================================================

@dataclass
class MlmcJob:
    """Everything an MLMC run needs besides the engine configuration."""

    model: SdeModel
    params: ModelParams
    spec: EstimatorSpec
    T: float
    config: MlmcConfig = field(default_factory=MlmcConfig)
    master_seed: int = settings.DEFAULT_SEED


@dataclass
class _LevelTally:
    stats: MCStats = field(default_factory=MCStats)
    drawn: int = 0
    cost: float = 0.0
    blowups: int = 0

    @property
    def cost_per_sample(self) -> float:
        return self.cost / self.drawn if self.drawn else 0.0


def _fit_rate(levels: Sequence[int], values: Sequence[float]) -> float:
    """Slope of log2 |values| on the level index, NaN with fewer than two levels."""
    if len(levels) < 2:
        return float("nan")
    logs = np.log2(np.maximum(np.abs(np.asarray(values, dtype=float)), 1e-300))
    return float(sps.linregress(np.asarray(levels, dtype=float), logs).slope)


class MlmcEngine(BaseEngine):
    """Multilevel Monte Carlo driver with optimal sample allocation and the geometric bias test."""

    def __init__(self, config: Dict[str, Any] = None):
        super().__init__("mlmc", config)

    def _draw(self, job: MlmcJob, level: int, tally: _LevelTally, count: int) -> None:
        cfg = job.config
        start = tally.drawn
        for offset in range(0, count, cfg.batch_size):
            indices = range(start + offset, start + min(offset + cfg.batch_size, count))
            samples = sample_level_batch(level, job.model, job.params, job.spec, job.T, cfg,
                                         job.master_seed, indices)
            tally.stats = tally.stats.merge(samples.stats)
            tally.cost += float(samples.costs.sum())
            tally.blowups += int(samples.blown.sum())
        tally.drawn += count
        if tally.blowups > settings.BLOWUP_TOLERANCE * tally.drawn:
            raise BlowupLimitExceeded(tally.blowups, tally.drawn)
        self.log(f"level {level}: drew {count} samples ({tally.drawn} total)", logging.DEBUG)

    def _rates(self, tallies: List[_LevelTally], floor: float):
        levels = list(range(1, len(tallies)))
        upper = tallies[1:]
        alpha = -_fit_rate(levels, [t.stats.mean for t in upper])
        beta = -_fit_rate(levels, [t.stats.variance for t in upper])
        gamma = _fit_rate(levels, [t.cost_per_sample for t in upper])
        alpha = floor if math.isnan(alpha) else max(alpha, floor)
        return alpha, beta, gamma

    def run(self, job: MlmcJob) -> MlmcReport:
        """
        Run levels 0..L until the sampling and bias criteria meet eps.

        Args:
            job: Model, parameters, estimator, horizon, MLMC configuration and seed

        Returns:
            MlmcReport with the telescoped estimate and per-level table
        """
        cfg = job.config
        if job.spec.kind is EstimatorKind.STANDARD_PS:
            raise UnsupportedKind("the standard pathwise estimator is not available for multilevel coupling")
        self.log(settings.RUN_START_MESSAGE.format(kind=job.spec.kind.value, model=job.model.name,
                                                   n=f"{cfg.n_init}/level", T=job.T, seed=job.master_seed))

        L = min(cfg.min_levels, cfg.max_levels)
        tallies = [_LevelTally() for _ in range(L + 1)]
        pending = [cfg.n_init] * (L + 1)
        while True:
            for level, count in enumerate(pending):
                if count > 0:
                    self._draw(job, level, tallies[level], count)

            variances = np.array([t.stats.variance for t in tallies])
            costs = np.array([max(t.cost_per_sample, 1.0) for t in tallies])
            total = np.sum(np.sqrt(variances * costs))
            optimal = np.ceil(np.sqrt(variances / costs) * total / (0.5 * cfg.eps ** 2))
            optimal = np.maximum(optimal, 2).astype(np.int64)
            drawn = np.array([t.drawn for t in tallies])
            pending = [int(v) for v in np.maximum(optimal - drawn, 0)]
            if any(p > 0.01 * d for p, d in zip(pending, drawn)):
                continue

            alpha, beta, gamma = self._rates(tallies, settings.MLMC_ALPHA_FLOOR)
            remainder = abs(tallies[-1].stats.mean) / (2.0 ** alpha - 1.0)
            if remainder <= cfg.eps / math.sqrt(2.0):
                break
            if L >= cfg.max_levels:
                raise MaxLevelsExceeded(cfg.max_levels)
            L += 1
            tallies.append(_LevelTally())
            pending = [0] * L + [cfg.n_init]

        levels = []
        for level, tally in enumerate(tallies):
            result = LevelResult(level, tally.stats.n, tally.stats.mean, tally.stats.variance,
                                 tally.cost_per_sample, tally.blowups)
            self.log(settings.LEVEL_MESSAGE.format(level=level, n=result.n_samples, mean=result.mean,
                                                   variance=result.variance, cost=result.cost))
            levels.append(result)
        return MlmcReport(
            estimate=float(sum(r.mean for r in levels)),
            total_cost=float(sum(t.cost for t in tallies)),
            levels=levels,
            alpha=alpha,
            beta=beta,
            gamma=gamma,
            eps=cfg.eps,
        )


def mlmc_driver(model: SdeModel, params: ModelParams, spec: EstimatorSpec, T: float,
                config: Optional[MlmcConfig] = None, master_seed: int = settings.DEFAULT_SEED) -> MlmcReport:
    """Run MLMC for one estimator; see MlmcEngine.run."""
    return MlmcEngine().run(MlmcJob(model, params, spec, T, config or MlmcConfig(), master_seed))


# =============================================================================
# LEVEL STUDIES
# =============================================================================

def level_statistics(level: int, model: SdeModel, params: ModelParams, spec: EstimatorSpec, T: float,
                     config: MlmcConfig, master_seed: int, n_samples: int) -> LevelResult:
    """Mean, variance and cost of a fixed number of level samples."""
    tally = _LevelTally()
    MlmcEngine()._draw(MlmcJob(model, params, spec, T, config, master_seed), level, tally, n_samples)
    return LevelResult(level, tally.stats.n, tally.stats.mean, tally.stats.variance,
                       tally.cost_per_sample, tally.blowups)


def level_variance_study(model: SdeModel, params: ModelParams, spec: EstimatorSpec, T_grid: Sequence[float],
                         config: MlmcConfig, master_seed: int, n_samples: int,
                         levels: Sequence[int] = (0, 1)) -> List[Dict[str, float]]:
    """
    Level variances across horizons, with and without the change of measure.

    Returns:
        Rows with keys T, level, variance, variance_no_com
    """
    plain = config.without_change_of_measure()
    rows = []
    for T in T_grid:
        for level in levels:
            with_com = level_statistics(level, model, params, spec, T, config, master_seed, n_samples)
            if level == 0:
                without = with_com
            else:
                without = level_statistics(level, model, params, spec, T, plain, master_seed, n_samples)
            rows.append({"T": float(T), "level": int(level), "variance": with_com.variance,
                         "variance_no_com": without.variance})
            logger.info(f"T={T:g} level {level}: V={with_com.variance:.4g} (no COM {without.variance:.4g})")
    return rows


def mlmc_complexity_study(model: SdeModel, params: ModelParams, spec: EstimatorSpec, T: float,
                          eps_grid: Sequence[float], config: MlmcConfig,
                          master_seed: int) -> List[Dict[str, float]]:
    """
    MLMC cost per target accuracy against the single-level cost 2 V0 C_L / eps^2.

    C_L is the step count of one plain path at the finest level the MLMC run used.
    """
    rows = []
    for eps in eps_grid:
        report = mlmc_driver(model, params, spec, T, replace(config, eps=float(eps)), master_seed)
        finest = len(report.levels) - 1
        plain_cost = max(1, math.ceil(T / config.step(finest) - 1e-9))
        std_cost = 2.0 * report.levels[0].variance * plain_cost / eps ** 2
        rows.append({"eps": float(eps), "estimate": report.estimate, "mlmc_cost": report.total_cost,
                     "std_mc_cost": std_cost})
    return rows
