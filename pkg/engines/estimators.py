"""
Per-path sensitivity estimators for chaotic SDEs.
Standard pathwise, Malliavin and the importance-sampled pathwise estimators
(drift parameter, volatility, initial condition), plus the common-random-number
finite-difference oracle.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

import settings
from .errors import InvalidParameter
from .integrate import (
    EstimatorKind,
    NoiseBatch,
    NoiseStream,
    PathBatch,
    StepPolicy,
    simulate_augmented,
    simulate_batch,
)
from .models import ModelParams, SdeModel
from .stats import MCStats, merge_all

logger = logging.getLogger("sdesens.estimators")

FD_TARGETS = ("theta", "sigma", "x0")


@dataclass(frozen=True)
class EstimatorSpec:
    """An estimator kind with its spring S, FD step and x0 perturbation direction."""

    kind: EstimatorKind
    spring: float = settings.DEFAULT_SPRING
    fd_epsilon: Optional[float] = None
    direction: Optional[Tuple[float, ...]] = None

    @classmethod
    def parse(cls, name: str, spring: float = settings.DEFAULT_SPRING, **kwargs) -> "EstimatorSpec":
        try:
            kind = EstimatorKind(name)
        except ValueError:
            choices = ", ".join(k.value for k in EstimatorKind)
            raise InvalidParameter(f"unknown estimator '{name}' (expected one of {choices})") from None
        return cls(kind, spring, **kwargs)

    def validate(self, params: ModelParams) -> None:
        """Run-entry preconditions: S > 0 for spring kinds, sigma > 0 for weighted kinds."""
        if self.kind.uses_spring and not self.spring > 0:
            raise InvalidParameter(f"{self.kind.value} requires spring S > 0, got {self.spring}")
        if self.kind is EstimatorKind.MALLIAVIN or self.kind.uses_spring:
            params.require_volatility()


@dataclass
class EstimatorSample:
    """One path's estimator value and the timesteps it consumed."""

    value: float
    cost: int


@dataclass
class BatchSamples:
    """Estimator values of a batch of paths; blown-up paths carry NaN."""

    values: np.ndarray
    costs: np.ndarray
    blown: np.ndarray
    snapshots: Optional[np.ndarray] = None

    @property
    def stats(self) -> MCStats:
        return MCStats.from_values(self.values[~self.blown])


def estimator_functional(model: SdeModel, kind: EstimatorKind, x: np.ndarray, v: np.ndarray,
                         acc: np.ndarray) -> np.ndarray:
    """
    Estimator value from terminal state x, variation v and Ito accumulator acc.

    VALUE gives phi(X_T); STANDARD_PS <grad phi, x_T>; MALLIAVIN
    phi(X_T) * sum <gamma/sigma, dW>; the ISPS kinds
    <grad phi, v_T> + phi(Y_T) * sum (S/sigma) <v, dW>.
    """
    phi = model.observable(x)
    if kind is EstimatorKind.VALUE:
        return phi
    if kind is EstimatorKind.MALLIAVIN:
        return phi * acc
    values = np.einsum("ni,ni->n", model.observable_grad(x), v)
    if kind.uses_spring:
        values = values + phi * acc
    return values


def estimator_values(model: SdeModel, kind: EstimatorKind, batch: PathBatch) -> np.ndarray:
    """Per-path estimator values of a simulated batch; blown-up paths give NaN."""
    values = estimator_functional(model, kind, batch.x, batch.v, batch.ito_acc)
    return np.where(batch.blown, np.nan, values)


def _check_spring_growth(spec: EstimatorSpec, batch: PathBatch, T: float) -> None:
    mid, end = batch.v_norm_mid, batch.v_norm_end
    if mid and end and end > settings.SPRING_GROWTH_WARNING * mid:
        logger.warning(settings.SPRING_WARNING_MESSAGE.format(
            mid=mid, t_mid=0.5 * T, end=end, T=T, spring=spec.spring))


def sample_batch(model: SdeModel, params: ModelParams, spec: EstimatorSpec, T: float, policy: StepPolicy,
                 master_seed: int, indices: Sequence[int],
                 snapshot_times: Optional[Sequence[float]] = None) -> BatchSamples:
    """
    Estimator samples for a contiguous block of path indices.

    Args:
        model: The SDE model
        params: Model parameters
        spec: Estimator kind and options (validated here)
        T: Horizon
        policy: Step policy
        master_seed: Master seed of the run
        indices: Path indices of the block
        snapshot_times: Times at which to keep the state of every path

    Returns:
        BatchSamples with one value and cost per index
    """
    spec.validate(params)
    noise = NoiseBatch.for_indices(master_seed, indices, model.dim)
    batch = simulate_batch(model, params, spec.kind, T, policy, noise,
                           spring=spec.spring if spec.kind.uses_spring else 0.0,
                           direction=spec.direction, snapshot_times=snapshot_times)
    if spec.kind.uses_spring:
        _check_spring_growth(spec, batch, T)
    return BatchSamples(estimator_values(model, spec.kind, batch), batch.steps.copy(), batch.blown.copy(),
                        batch.snapshots)


def _single_path(model, params, spec, T, policy, stream: NoiseStream) -> EstimatorSample:
    spec.validate(params)
    state = simulate_augmented(model, params, spec.kind, T, policy, stream,
                               spring=spec.spring if spec.kind.uses_spring else 0.0,
                               direction=spec.direction)
    batch = PathBatch(t=np.array([state.t]), x=state.x[None, :], v=state.v[None, :],
                      ito_acc=np.array([state.ito_acc]), log_rn=np.zeros(1), steps=np.array([state.steps]),
                      blown=np.zeros(1, dtype=bool), blown_t=np.full(1, np.nan))
    return EstimatorSample(float(estimator_values(model, spec.kind, batch)[0]), max(1, state.steps))


def standard_ps_path(model: SdeModel, params: ModelParams, T: float, policy: StepPolicy,
                     stream: NoiseStream) -> EstimatorSample:
    """Standard pathwise estimator <grad phi(X_T), x_T> with x' = gamma + J x, x_0 = 0."""
    return _single_path(model, params, EstimatorSpec(EstimatorKind.STANDARD_PS), T, policy, stream)


def malliavin_path(model: SdeModel, params: ModelParams, T: float, policy: StepPolicy,
                   stream: NoiseStream) -> EstimatorSample:
    """Malliavin estimator phi(X_T) * sum <gamma(X_tn)/sigma, dW_n>."""
    return _single_path(model, params, EstimatorSpec(EstimatorKind.MALLIAVIN), T, policy, stream)


def is_ps_theta_path(model: SdeModel, params: ModelParams, T: float, policy: StepPolicy,
                     stream: NoiseStream, S: float) -> EstimatorSample:
    """Importance-sampled pathwise estimator for the drift parameter."""
    return _single_path(model, params, EstimatorSpec(EstimatorKind.ISPS_THETA, S), T, policy, stream)


def is_ps_sigma_path(model: SdeModel, params: ModelParams, T: float, policy: StepPolicy,
                     stream: NoiseStream, S: float) -> EstimatorSample:
    """Importance-sampled pathwise estimator for the volatility; the variation is noise-driven."""
    return _single_path(model, params, EstimatorSpec(EstimatorKind.ISPS_SIGMA, S), T, policy, stream)


def is_ps_x0_path(model: SdeModel, params: ModelParams, T: float, policy: StepPolicy,
                  stream: NoiseStream, S: float, direction: Optional[Sequence[float]] = None) -> EstimatorSample:
    """Importance-sampled pathwise estimator for the initial condition along `direction` (default all-ones)."""
    spec = EstimatorSpec(EstimatorKind.ISPS_X0, S, direction=None if direction is None else tuple(direction))
    return _single_path(model, params, spec, T, policy, stream)


# =============================================================================
# FINITE-DIFFERENCE ORACLE
# =============================================================================

def default_fd_epsilon(params: ModelParams, target: str) -> float:
    """0.01 |parameter| with floor 1e-4 (x0 uses the norm of the initial state)."""
    if target == "theta":
        scale = abs(params.theta)
    elif target == "sigma":
        scale = abs(params.sigma)
    else:
        scale = float(np.linalg.norm(params.x0_array))
    return max(settings.FD_RELATIVE_EPSILON * scale, settings.FD_EPSILON_FLOOR)


def perturbed_params(params: ModelParams, target: str, shift: float,
                     direction: Optional[Sequence[float]] = None) -> ModelParams:
    """Parameters with the FD target moved by `shift`."""
    if target == "theta":
        return params.with_(theta=params.theta + shift)
    if target == "sigma":
        return params.with_(sigma=params.sigma + shift)
    if target == "x0":
        d = np.ones(len(params.x0)) if direction is None else np.asarray(direction, dtype=float)
        return params.with_(x0=tuple(params.x0_array + shift * d))
    raise InvalidParameter(f"unknown FD target '{target}' (expected one of {', '.join(FD_TARGETS)})")


@dataclass
class FdResult:
    """Finite-difference estimate with its stderr, step count over both runs and dropped paths."""

    mean: float
    stderr: float
    epsilon: float
    cost: int
    dropped: int = 0


def fd_run(model: SdeModel, params: ModelParams, T: float, policy: StepPolicy, master_seed: int,
           epsilon: Optional[float], n_paths: int, target: str,
           direction: Optional[Sequence[float]] = None,
           batch_size: int = settings.DEFAULT_BATCH) -> FdResult:
    """
    Central finite difference (F(p + eps/2) - F(p - eps/2)) / eps with common random numbers.

    Both perturbed runs consume the identical noise streams for every path
    index, which requires uniform steps. Paths that blow up in either run are
    dropped.

    Args:
        model: The SDE model
        params: Model parameters at the evaluation point
        T: Horizon
        policy: Step policy, must be uniform
        master_seed: Master seed shared by both runs
        epsilon: FD step, None for the default rule
        n_paths: Number of paths, >= 2
        target: "theta", "sigma" or "x0"
        direction: x0 perturbation direction (default all-ones)
        batch_size: Paths per vectorised batch

    Returns:
        FdResult with the statistics of the per-path differences
    """
    policy.require_uniform("the finite-difference oracle")
    if epsilon is None:
        epsilon = default_fd_epsilon(params, target)
    if not epsilon > 0:
        raise InvalidParameter(f"FD epsilon must be > 0, got {epsilon}")
    if n_paths < 2:
        raise InvalidParameter(f"FD needs at least 2 paths, got {n_paths}")
    upper = perturbed_params(params, target, 0.5 * epsilon, direction)
    lower = perturbed_params(params, target, -0.5 * epsilon, direction)
    value = EstimatorSpec(EstimatorKind.VALUE)

    parts = []
    dropped = 0
    cost = 0
    for start in range(0, n_paths, batch_size):
        indices = range(start, min(start + batch_size, n_paths))
        hi = sample_batch(model, upper, value, T, policy, master_seed, indices)
        lo = sample_batch(model, lower, value, T, policy, master_seed, indices)
        keep = ~(hi.blown | lo.blown)
        dropped += int((~keep).sum())
        cost += int(hi.costs.sum() + lo.costs.sum())
        parts.append(MCStats.from_values((hi.values[keep] - lo.values[keep]) / epsilon))
    if dropped:
        logger.warning(settings.BLOWUP_MESSAGE.format(blowups=dropped, n=n_paths))
    stats = merge_all(parts)
    return FdResult(stats.mean, stats.stderr, float(epsilon), cost, dropped)


def fd_sensitivity(model: SdeModel, params: ModelParams, T: float, policy: StepPolicy, master_seed: int,
                   epsilon: Optional[float], n_paths: int, target: str,
                   direction: Optional[Sequence[float]] = None,
                   batch_size: int = settings.DEFAULT_BATCH) -> Tuple[float, float]:
    """(estimate, stderr) of the common-random-numbers finite difference; see fd_run."""
    result = fd_run(model, params, T, policy, master_seed, epsilon, n_paths, target, direction, batch_size)
    return result.mean, result.stderr
