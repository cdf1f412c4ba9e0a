"""
Richardson-Romberg extrapolation in the volatility.
Estimators at a ladder of volatilities driven by identical noise are combined
so the leading powers of sigma cancel, approximating quantities of the
deterministic system's invariant measure. Includes the RK4 ODE reference.
"""

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import settings
from .base_engine import BaseEngine
from .errors import BlowupLimitExceeded, InvalidParameter, NonFiniteState
from .estimators import EstimatorSpec, sample_batch
from .integrate import EstimatorKind, StepPolicy
from .models import ModelParams, SdeModel, default_params
from .stats import MCStats, merge_all

logger = logging.getLogger("sdesens.extrapolation")

Horizon = Union[float, str]


def rr_weights_exact(R: int) -> Tuple[Fraction, ...]:
    """Weights w_k = (-1)^(R-k) k^R / (k! (R-k)!) as exact fractions."""
    if not isinstance(R, (int, np.integer)) or not 1 <= R <= settings.RR_MAX_ORDER:
        raise InvalidParameter(f"Richardson-Romberg order must be in [1, {settings.RR_MAX_ORDER}], got {R}")
    return tuple(
        Fraction((-1) ** (R - k) * k ** R, math.factorial(k) * math.factorial(R - k))
        for k in range(1, R + 1)
    )


def rr_weights(R: int) -> Tuple[float, ...]:
    """
    Closed-form Richardson-Romberg weights for order R.

    Args:
        R: Order, 1 <= R <= 8

    Returns:
        Tuple (w_1, ..., w_R); R=2 gives (-1, 2)
    """
    return tuple(float(w) for w in rr_weights_exact(R))


def rr_sigmas(base_sigma: float, R: int) -> Tuple[float, ...]:
    """Volatility ladder sigma_k = base_sigma R / k, decreasing to base_sigma."""
    return tuple(base_sigma * R / k for k in range(1, R + 1))


def rr_combine(values, weights: Sequence[float]) -> np.ndarray:
    """Weighted combination sum_k w_k values[k]; `values` has the rungs on its first axis."""
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if values.shape[0] != weights.shape[0]:
        raise InvalidParameter(f"expected {weights.shape[0]} rungs, got {values.shape[0]}")
    return np.tensordot(weights, values, axes=1)


@dataclass(frozen=True)
class RRScheme:
    """Order, base volatility, weights and volatility ladder of one extrapolation."""

    order: int
    base_sigma: float
    weights: Tuple[float, ...] = ()
    sigmas: Tuple[float, ...] = ()

    @classmethod
    def build(cls, order: int, base_sigma: float) -> "RRScheme":
        if not base_sigma > 0:
            raise InvalidParameter(f"base sigma must be > 0, got {base_sigma}")
        return cls(order, float(base_sigma), rr_weights(order), rr_sigmas(float(base_sigma), order))


def horizon_for_sigma(sigma: float, t_ref: float = settings.RR_T_REF, sigma_ref: float = settings.RR_SIGMA_REF,
                      t_max: float = settings.RR_T_MAX) -> float:
    """Horizon T_ref (sigma_ref / sigma)^2, capped at t_max; smaller noise mixes more slowly."""
    if not sigma > 0:
        raise InvalidParameter(f"sigma must be > 0 to choose a horizon, got {sigma}")
    return min(t_ref * (sigma_ref / sigma) ** 2, t_max)


def resolve_horizon(T: Horizon, base_sigma: float, t_max: float = settings.RR_T_MAX) -> float:
    if isinstance(T, str):
        if T != "auto":
            raise InvalidParameter(f"T must be a number or 'auto', got '{T}'")
        return horizon_for_sigma(base_sigma, t_max=t_max)
    if not T > 0:
        raise InvalidParameter(f"horizon T must be > 0, got {T}")
    return float(T)


@dataclass
class RRJob:
    model: SdeModel
    params: ModelParams
    spec: EstimatorSpec
    order: int
    T: Horizon
    policy: StepPolicy
    n_paths: int
    master_seed: int = settings.DEFAULT_SEED
    batch_size: int = settings.DEFAULT_BATCH
    t_max: float = settings.RR_T_MAX


@dataclass
class RRResult:
    """Extrapolated estimate with the per-rung statistics it was combined from."""

    estimate: float
    stderr: float
    scheme: RRScheme
    T: float
    total_cost: int
    rungs: List[MCStats] = field(default_factory=list)
    blowups: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "estimate": self.estimate,
            "stderr": self.stderr,
            "order": self.scheme.order,
            "sigmas": list(self.scheme.sigmas),
            "T": self.T,
            "total_cost": self.total_cost,
        }

    def to_rows(self) -> List[Dict[str, Any]]:
        return [
            {"sigma": s, "weight": w, "T": self.T, "mean": r.mean, "stderr": r.stderr}
            for s, w, r in zip(self.scheme.sigmas, self.scheme.weights, self.rungs)
        ]


class RichardsonEngine(BaseEngine):
    """Runs the volatility ladder on shared noise and combines it per path."""

    def __init__(self, config: Dict[str, Any] = None):
        super().__init__("extrapolation", config)

    def run(self, job: RRJob) -> RRResult:
        """
        Extrapolated estimate over a ladder of volatilities.

        Every rung of a path index consumes the identical noise stream; the
        per-path sample is sum_k w_k (estimator at sigma_k). Paths that blow
        up on any rung are dropped.

        Args:
            job: Model, base parameters (sigma is the smallest rung), estimator,
                order, horizon (or "auto"), uniform step policy, path count and seed

        Returns:
            RRResult with the combined estimate and per-rung statistics
        """
        if job.n_paths < 2:
            raise InvalidParameter(f"RR needs at least 2 paths, got {job.n_paths}")
        job.policy.require_uniform("Richardson-Romberg extrapolation")
        scheme = RRScheme.build(job.order, job.params.sigma)
        T = resolve_horizon(job.T, scheme.base_sigma, job.t_max)
        ladder = [job.params.with_(sigma=s) for s in scheme.sigmas]
        self.log(f"RR order {scheme.order}: sigmas={[round(s, 6) for s in scheme.sigmas]}, T={T:g}")

        combined, per_rung = [], [[] for _ in ladder]
        cost = 0
        blowups = 0
        for start in range(0, job.n_paths, job.batch_size):
            indices = range(start, min(start + job.batch_size, job.n_paths))
            batches = [sample_batch(job.model, p, job.spec, T, job.policy, job.master_seed, indices)
                       for p in ladder]
            blown = np.any([b.blown for b in batches], axis=0)
            keep = ~blown
            blowups += int(blown.sum())
            cost += int(sum(b.costs.sum() for b in batches))
            values = np.stack([b.values[keep] for b in batches])
            combined.append(MCStats.from_values(rr_combine(values, scheme.weights)))
            for rung, row in zip(per_rung, values):
                rung.append(MCStats.from_values(row))
            self.log(f"paths {indices.start}..{indices.stop - 1} done", logging.DEBUG)

        if blowups:
            self.log(settings.BLOWUP_MESSAGE.format(blowups=blowups, n=job.n_paths), logging.WARNING)
            if blowups > settings.BLOWUP_TOLERANCE * job.n_paths:
                raise BlowupLimitExceeded(blowups, job.n_paths)
        total = merge_all(combined)
        return RRResult(total.mean, total.stderr, scheme, T, cost, [merge_all(r) for r in per_rung], blowups)


def rr_estimate(model: SdeModel, params_base: ModelParams, estimator_kind: EstimatorKind, R: int, T: Horizon,
                policy: StepPolicy, n_paths: int, master_seed: int,
                S: float = settings.DEFAULT_SPRING) -> Tuple[float, float]:
    """Richardson-Romberg (estimate, stderr) for one estimator kind; see RichardsonEngine.run."""
    job = RRJob(model, params_base, EstimatorSpec(estimator_kind, S), R, T, policy, n_paths, master_seed)
    result = RichardsonEngine().run(job)
    return result.estimate, result.stderr


# =============================================================================
# DETERMINISTIC REFERENCE
# =============================================================================

def _rk4_step(model: SdeModel, x: np.ndarray, theta: float, h: float) -> np.ndarray:
    k1 = model.drift(x, theta)
    k2 = model.drift(x + 0.5 * h * k1, theta)
    k3 = model.drift(x + 0.5 * h * k2, theta)
    k4 = model.drift(x + h * k3, theta)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def ode_reference(model: SdeModel, theta: float, T: float = settings.ODE_T, h: float = settings.ODE_H,
                  burn_in: float = settings.ODE_BURN_IN, x0: Optional[Sequence[float]] = None) -> float:
    """
    Long-time average of the observable along the deterministic flow.

    Integrates x' = f(theta; x) with classical RK4 and averages phi over the
    grid points in [burn_in, T).

    Args:
        model: The model; its volatility is ignored
        theta: Drift parameter
        T: Final time, > burn_in
        h: RK4 step
        burn_in: Initial transient discarded from the average
        x0: Initial state (default: the model's default initial state)

    Returns:
        The time average of phi
    """
    if not h > 0:
        raise InvalidParameter(f"ODE step h must be > 0, got {h}")
    if not 0 <= burn_in < T:
        raise InvalidParameter(f"need 0 <= burn_in < T, got burn_in={burn_in}, T={T}")
    x = default_params(model).x0_array if x0 is None else np.asarray(x0, dtype=float)
    n_steps = int(round(T / h))
    first = int(round(burn_in / h))
    samples = np.empty(n_steps - first)
    for k in range(n_steps):
        if k >= first:
            samples[k - first] = model.observable(x)
        x = _rk4_step(model, x, theta, h)
        if not np.isfinite(x).all():
            raise NonFiniteState((k + 1) * h)
    return float(np.mean(samples))


def ode_sensitivity(model: SdeModel, theta: float, T: float = settings.ODE_T, h: float = settings.ODE_H,
                    epsilon: float = 0.5, burn_in: float = settings.ODE_BURN_IN,
                    x0: Optional[Sequence[float]] = None) -> float:
    """Central finite difference of ode_reference in theta."""
    if not epsilon > 0:
        raise InvalidParameter(f"epsilon must be > 0, got {epsilon}")
    upper = ode_reference(model, theta + 0.5 * epsilon, T, h, burn_in, x0)
    lower = ode_reference(model, theta - 0.5 * epsilon, T, h, burn_in, x0)
    return (upper - lower) / epsilon
