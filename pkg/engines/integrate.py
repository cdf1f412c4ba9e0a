"""
Brownian noise streams, timestep policies and Euler-Maruyama kernels.
Paths are advanced in vectorised batches; the single-path operations are the
same kernels run on a batch of one.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

import settings
from .errors import InvalidParameter, NonFiniteState
from .models import ModelParams, SdeModel


# =============================================================================
# NOISE
# =============================================================================

def derive_key(master_seed: int, path_index: int) -> int:
    """128-bit Philox key mixed from the master seed and the path index."""
    words = np.random.SeedSequence([int(master_seed), int(path_index)]).generate_state(2, np.uint64)
    return (int(words[0]) << 64) | int(words[1])


def derive_seed(master_seed: int, *labels: int) -> int:
    """A 64-bit master seed for a labelled sub-experiment (e.g. one MLMC level)."""
    state = np.random.SeedSequence([int(master_seed), *[int(v) for v in labels]]).generate_state(1, np.uint64)
    return int(state[0])


class NoiseStream:
    """
    Standard-normal stream of one path, keyed on (master_seed, path_index).

    The stream yields standard normals Z; a Brownian increment over a step h
    is sqrt(h) Z, so the Z sequence is shared by every step size.
    """

    def __init__(self, master_seed: int, path_index: int, dim: int):
        if master_seed < 0 or path_index < 0:
            raise InvalidParameter("master_seed and path_index must be unsigned")
        self.master_seed = int(master_seed)
        self.path_index = int(path_index)
        self.dim = int(dim)
        self.reset()

    def reset(self) -> None:
        """Rewind to the first increment."""
        self._generator = np.random.Generator(np.random.Philox(key=derive_key(self.master_seed, self.path_index)))
        self.draws = 0

    def normals(self, count: int) -> np.ndarray:
        """The next `count` standard-normal vectors, shape (count, dim)."""
        self.draws += count
        return self._generator.standard_normal((count, self.dim))

    def increment(self, h: float) -> np.ndarray:
        """The next Brownian increment over a step of size h."""
        return math.sqrt(h) * self.normals(1)[0]


class NoiseBatch:
    """Block-buffered normals for a set of path streams advanced in lock-step."""

    def __init__(self, streams: Sequence[NoiseStream], block_steps: int = settings.NOISE_BLOCK_STEPS):
        if not streams:
            raise InvalidParameter("a noise batch needs at least one stream")
        self.streams = list(streams)
        self.dim = self.streams[0].dim
        self.block_steps = int(block_steps)
        self._buffer: Optional[np.ndarray] = None
        self._cursor = 0

    @classmethod
    def for_indices(cls, master_seed: int, indices: Sequence[int], dim: int,
                    block_steps: int = settings.NOISE_BLOCK_STEPS) -> "NoiseBatch":
        return cls([NoiseStream(master_seed, int(i), dim) for i in indices], block_steps)

    def __len__(self) -> int:
        return len(self.streams)

    def next_normals(self) -> np.ndarray:
        """One standard-normal vector per stream, shape (n, dim)."""
        if self._buffer is None or self._cursor == self.block_steps:
            self._buffer = np.stack([s.normals(self.block_steps) for s in self.streams])
            self._cursor = 0
        z = self._buffer[:, self._cursor, :]
        self._cursor += 1
        return z

    def increments(self, h: np.ndarray) -> np.ndarray:
        """One Brownian increment per stream for per-path step sizes h, shape (n, dim)."""
        return self.next_normals() * np.sqrt(h)[:, None]


# =============================================================================
# TIMESTEP POLICY
# =============================================================================

@dataclass(frozen=True)
class StepPolicy:
    """Uniform steps of size h, or adaptive steps delta / max(1, |f|) clamped to [h_min, h_max]."""

    mode: str = "uniform"
    h: float = settings.DEFAULT_H
    delta: float = settings.DEFAULT_DELTA

    def __post_init__(self):
        if self.mode not in ("uniform", "adaptive"):
            raise InvalidParameter(f"step mode must be 'uniform' or 'adaptive', got {self.mode}")
        if self.mode == "uniform" and not self.h > 0:
            raise InvalidParameter(f"uniform step h must be > 0, got {self.h}")
        if self.mode == "adaptive" and not self.delta > 0:
            raise InvalidParameter(f"adaptive scale delta must be > 0, got {self.delta}")

    @classmethod
    def uniform(cls, h: float) -> "StepPolicy":
        return cls(mode="uniform", h=float(h))

    @classmethod
    def adaptive(cls, delta: float) -> "StepPolicy":
        return cls(mode="adaptive", delta=float(delta))

    @property
    def h_min(self) -> float:
        return self.delta * settings.ADAPTIVE_FLOOR_FACTOR

    @property
    def h_max(self) -> float:
        return self.delta

    @property
    def typical_step(self) -> float:
        return self.h if self.mode == "uniform" else self.delta

    def require_uniform(self, purpose: str) -> None:
        """Reject adaptive stepping where paths at different parameters must share their increments."""
        if self.mode != "uniform":
            raise InvalidParameter(
                f"{purpose} needs a uniform step policy: adaptive steps depend on the state, "
                "so runs at different parameters would integrate different Brownian paths"
            )

    def uniform_steps(self, T: float) -> int:
        """Number of uniform steps needed to reach T (the last one truncated)."""
        return max(1, math.ceil(T / self.h - 1e-9))


def em_step(x: np.ndarray, h, dW: np.ndarray, model: SdeModel, params: ModelParams) -> np.ndarray:
    """
    One Euler-Maruyama step x + f(theta; x) h + sigma dW.

    Args:
        x: State, shape (..., m)
        h: Step size, scalar or broadcastable against x
        dW: Brownian increment with the shape of x
        model: The SDE model
        params: Model parameters

    Returns:
        The advanced state
    """
    return x + model.drift(x, params.theta) * h + params.sigma * dW


def adaptive_step_size(x: np.ndarray, model: SdeModel, params: ModelParams, policy: StepPolicy):
    """Adaptive step clamp(delta / max(1, |f(x)|), h_min, h_max); batched over leading axes."""
    if policy.mode != "adaptive":
        raise InvalidParameter("adaptive_step_size requires an adaptive policy")
    norm = np.linalg.norm(model.drift(x, params.theta), axis=-1)
    step = policy.delta / np.maximum(1.0, norm)
    return np.clip(step, policy.h_min, policy.h_max)


# =============================================================================
# AUGMENTED SYSTEMS
# =============================================================================

class EstimatorKind(Enum):
    """Which variation process and Ito accumulator ride along with the state."""

    VALUE = "value"
    STANDARD_PS = "standard"
    MALLIAVIN = "malliavin"
    ISPS_THETA = "isps-theta"
    ISPS_SIGMA = "isps-sigma"
    ISPS_X0 = "isps-x0"

    @property
    def uses_spring(self) -> bool:
        return self in (EstimatorKind.ISPS_THETA, EstimatorKind.ISPS_SIGMA, EstimatorKind.ISPS_X0)


def initial_variation(kind: EstimatorKind, dim: int, direction: Optional[Sequence[float]] = None) -> np.ndarray:
    """v0: the x0 direction for initial-condition sensitivities, zero otherwise."""
    if kind is EstimatorKind.ISPS_X0:
        v0 = np.ones(dim) if direction is None else np.asarray(direction, dtype=float)
        if v0.shape != (dim,):
            raise InvalidParameter(f"direction must have length {dim}")
        return v0
    return np.zeros(dim)


def variation_step(kind: EstimatorKind, model: SdeModel, x: np.ndarray, theta: float, v: np.ndarray,
                   acc: np.ndarray, h: np.ndarray, dw: np.ndarray, sigma: float, spring: float):
    """
    Advance the variation process and the Ito accumulator over one step.

    Every term is evaluated at the left endpoint x. `dw` is the increment of
    the Brownian motion under which x solves the unmodified SDE.

    Returns:
        (v, acc) after the step
    """
    hc = h[:, None]
    if kind is EstimatorKind.VALUE:
        return v, acc
    if kind is EstimatorKind.MALLIAVIN:
        gamma = model.drift_dtheta(x, theta)
        return v, acc + np.einsum("ni,ni->n", gamma, dw) / sigma

    jv = np.einsum("nij,nj->ni", model.drift_jac(x, theta), v)
    if kind is EstimatorKind.STANDARD_PS:
        return v + (model.drift_dtheta(x, theta) + jv) * hc, acc

    weight = spring / sigma if spring else 0.0
    acc = acc + weight * np.einsum("ni,ni->n", v, dw)
    contracted = jv - spring * v
    if kind is EstimatorKind.ISPS_THETA:
        return v + (model.drift_dtheta(x, theta) + contracted) * hc, acc
    if kind is EstimatorKind.ISPS_SIGMA:
        return v + contracted * hc + dw, acc
    return v + contracted * hc, acc


@dataclass
class AugmentedPathState:
    """Terminal state of one path: solution, variation and accumulators."""

    t: float
    x: np.ndarray
    v: np.ndarray
    ito_acc: float
    log_rn: float = 0.0
    steps: int = 0


@dataclass
class PathBatch:
    """Terminal augmented states of a batch of paths."""

    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    ito_acc: np.ndarray
    log_rn: np.ndarray
    steps: np.ndarray
    blown: np.ndarray
    blown_t: np.ndarray
    snapshots: Optional[np.ndarray] = None
    v_norm_mid: Optional[float] = None
    v_norm_end: Optional[float] = None

    def path(self, i: int) -> AugmentedPathState:
        return AugmentedPathState(float(self.t[i]), self.x[i].copy(), self.v[i].copy(),
                                  float(self.ito_acc[i]), float(self.log_rn[i]), int(self.steps[i]))


def _step_sizes(policy: StepPolicy, x, t, target, model, params) -> np.ndarray:
    """Per-path step, truncated to land exactly on the next target time."""
    if policy.mode == "uniform":
        h = np.full(t.shape, policy.h)
        tol = 1e-9 * policy.h
    else:
        h = adaptive_step_size(x, model, params, policy)
        tol = 1e-9 * policy.h_min
    remaining = target - t
    return np.where(t + h > target - tol, remaining, h)


def simulate_batch(model: SdeModel, params: ModelParams, kind: EstimatorKind, T: float, policy: StepPolicy,
                   noise: NoiseBatch, spring: float = 0.0, direction: Optional[Sequence[float]] = None,
                   snapshot_times: Optional[Sequence[float]] = None) -> PathBatch:
    """
    Advance a batch of augmented paths from t=0 to t=T.

    The state uses Euler-Maruyama, the variation explicit Euler on the same
    step sequence. Snapshot times become forced step boundaries; the state at
    each is recorded in `snapshots` with shape (len(snapshot_times), n, m).

    Args:
        model: The SDE model
        params: Model parameters
        kind: Estimator kind selecting the variation recursion
        T: Horizon, > 0
        policy: Uniform or adaptive step policy
        noise: Noise for the paths of this batch
        spring: Spring coefficient S >= 0 (ignored by kinds without a spring)
        direction: Initial perturbation direction for ISPS_X0
        snapshot_times: Increasing times in (0, T] at which to record the state

    Returns:
        PathBatch of terminal states with a blow-up mask
    """
    if not T > 0:
        raise InvalidParameter(f"horizon T must be > 0, got {T}")
    if spring < 0:
        raise InvalidParameter(f"spring must be >= 0, got {spring}")
    model.check_params(params)
    n, m = len(noise), model.dim
    snaps = sorted(float(s) for s in snapshot_times) if snapshot_times else []
    if snaps and (snaps[0] <= 0 or snaps[-1] > T):
        raise InvalidParameter("snapshot times must lie in (0, T]")
    targets = np.array(snaps + ([T] if not snaps or snaps[-1] < T else []))

    t = np.zeros(n)
    x = np.tile(params.x0_array, (n, 1))
    v = np.tile(initial_variation(kind, m, direction), (n, 1))
    acc = np.zeros(n)
    steps = np.zeros(n, dtype=np.int64)
    blown = np.zeros(n, dtype=bool)
    blown_t = np.full(n, np.nan)
    next_target = np.zeros(n, dtype=np.int64)
    recorded = np.zeros((len(snaps), n, m)) if snaps else None
    v_norm_mid = None
    done = np.zeros(n, dtype=bool)

    with np.errstate(all="ignore"):
        while not done.all():
            target = targets[np.minimum(next_target, len(targets) - 1)]
            h = np.where(done, 0.0, _step_sizes(policy, x, t, target, model, params))
            dw = noise.increments(h)
            v_new, acc_new = variation_step(kind, model, x, params.theta, v, acc, h, dw, params.sigma, spring)
            x_new = em_step(x, h[:, None], dw, model, params)

            finite = (np.isfinite(x_new).all(axis=1) & np.isfinite(v_new).all(axis=1) & np.isfinite(acc_new))
            fresh = ~done & ~finite
            if fresh.any():
                blown |= fresh
                blown_t[fresh] = t[fresh]
                x_new[fresh] = 0.0
                v_new[fresh] = 0.0
                acc_new[fresh] = 0.0
            x, v, acc = x_new, v_new, acc_new
            stepped = ~done & ~fresh
            steps += stepped
            t = np.where(stepped & (t + h >= target - 1e-12), target, t + h)

            hit = stepped & (t >= target)
            if hit.any():
                if recorded is not None:
                    rows = np.flatnonzero(hit & (next_target < len(snaps)))
                    recorded[next_target[rows], rows] = x[rows]
                next_target[hit] += 1
            done = blown | (next_target >= len(targets))

            if v_norm_mid is None and kind.uses_spring:
                alive = ~blown
                if alive.any() and t[alive].min() >= 0.5 * T:
                    v_norm_mid = float(np.linalg.norm(v[alive], axis=1).mean())

    v_norm_end = float(np.linalg.norm(v[~blown], axis=1).mean()) if kind.uses_spring and (~blown).any() else None
    return PathBatch(t=t, x=x, v=v, ito_acc=acc, log_rn=np.zeros(n), steps=steps, blown=blown,
                     blown_t=blown_t, snapshots=recorded, v_norm_mid=v_norm_mid, v_norm_end=v_norm_end)


def simulate_augmented(model: SdeModel, params: ModelParams, kind: EstimatorKind, T: float, policy: StepPolicy,
                       stream: NoiseStream, spring: float = 0.0,
                       direction: Optional[Sequence[float]] = None) -> AugmentedPathState:
    """
    Simulate one augmented path to time T.

    Raises:
        NonFiniteState: if any component of the path becomes non-finite
    """
    batch = simulate_batch(model, params, kind, T, policy, NoiseBatch([stream], block_steps=64),
                           spring=spring, direction=direction)
    if batch.blown[0]:
        raise NonFiniteState(float(batch.blown_t[0]), stream.path_index)
    return batch.path(0)
