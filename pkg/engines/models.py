"""
SDE model definitions.
Stochastic Lorenz and Ornstein-Uhlenbeck models carrying the analytic drift
derivatives and observables that the sensitivity estimators need.
"""

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np

import settings
from .errors import InvalidParameter


@dataclass(frozen=True)
class ModelParams:
    """Drift parameter, additive volatility and initial state of one SDE."""

    theta: float
    sigma: float
    x0: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(float(v) for v in np.ravel(self.x0)))
        if not math.isfinite(self.theta):
            raise InvalidParameter(f"theta must be finite, got {self.theta}")
        if not math.isfinite(self.sigma) or self.sigma < 0:
            raise InvalidParameter(f"sigma must be >= 0, got {self.sigma}")
        if not self.x0 or not all(math.isfinite(v) for v in self.x0):
            raise InvalidParameter(f"x0 must be a non-empty finite vector, got {self.x0}")

    @property
    def x0_array(self) -> np.ndarray:
        return np.asarray(self.x0, dtype=float)

    def with_(self, **changes) -> "ModelParams":
        """Return a copy with the given fields replaced."""
        return replace(self, **changes)

    def require_volatility(self) -> None:
        """Reject sigma = 0 for operations that divide by the volatility."""
        if self.sigma <= 0:
            raise InvalidParameter("sigma must be > 0 for sensitivity estimators")


class SdeModel(ABC):
    """
    An SDE dX = f(theta; X) dt + sigma dW with observable phi.

    All methods accept batched states of shape (..., dim). The observable must
    have polynomial growth; this is a caller contract and is not checked.
    """

    name: str = "model"
    dim: int = 1

    @abstractmethod
    def drift(self, x: np.ndarray, theta: float) -> np.ndarray:
        """Drift f(theta; x), shape (..., dim)."""

    @abstractmethod
    def drift_jac(self, x: np.ndarray, theta: float) -> np.ndarray:
        """Jacobian df/dx, shape (..., dim, dim)."""

    @abstractmethod
    def drift_dtheta(self, x: np.ndarray, theta: float) -> np.ndarray:
        """Perturbation direction gamma(x) = df/dtheta, shape (..., dim)."""

    @abstractmethod
    def observable(self, x: np.ndarray) -> np.ndarray:
        """Observable phi(x), shape (...)."""

    @abstractmethod
    def observable_grad(self, x: np.ndarray) -> np.ndarray:
        """Gradient of phi, shape (..., dim)."""

    def check_params(self, params: ModelParams) -> None:
        if len(params.x0) != self.dim:
            raise InvalidParameter(
                f"{self.name} has dimension {self.dim} but x0 has length {len(params.x0)}"
            )


# =============================================================================
# STOCHASTIC LORENZ
# =============================================================================

LORENZ_PRANDTL = 10.0
LORENZ_BETA = 8.0 / 3.0


def lorenz_drift(x, theta: float) -> np.ndarray:
    """Lorenz drift (10(x2-x1), x1(theta-x3)-x2, x1 x2 - 8/3 x3)."""
    x = np.asarray(x, dtype=float)
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    return np.stack(
        (
            LORENZ_PRANDTL * (x2 - x1),
            x1 * (theta - x3) - x2,
            x1 * x2 - LORENZ_BETA * x3,
        ),
        axis=-1,
    )


def lorenz_jacobian(x, theta: float) -> np.ndarray:
    """Jacobian of the Lorenz drift with respect to the state."""
    x = np.asarray(x, dtype=float)
    jac = np.zeros(x.shape[:-1] + (3, 3))
    jac[..., 0, 0] = -LORENZ_PRANDTL
    jac[..., 0, 1] = LORENZ_PRANDTL
    jac[..., 1, 0] = theta - x[..., 2]
    jac[..., 1, 1] = -1.0
    jac[..., 1, 2] = -x[..., 0]
    jac[..., 2, 0] = x[..., 1]
    jac[..., 2, 1] = x[..., 0]
    jac[..., 2, 2] = -LORENZ_BETA
    return jac


def lorenz_dtheta(x) -> np.ndarray:
    """Derivative of the Lorenz drift in theta: (0, x1, 0)."""
    x = np.asarray(x, dtype=float)
    gamma = np.zeros_like(x)
    gamma[..., 1] = x[..., 0]
    return gamma


@dataclass(frozen=True)
class LorenzModel(SdeModel):
    """Stochastic Lorenz system with additive noise; theta plays the rho role."""

    observable_index: int = settings.LORENZ_OBSERVABLE_INDEX
    name: str = "lorenz"
    dim: int = 3

    def drift(self, x, theta):
        return lorenz_drift(x, theta)

    def drift_jac(self, x, theta):
        return lorenz_jacobian(x, theta)

    def drift_dtheta(self, x, theta):
        return lorenz_dtheta(x)

    def observable(self, x):
        return np.asarray(x, dtype=float)[..., self.observable_index]

    def observable_grad(self, x):
        x = np.asarray(x, dtype=float)
        grad = np.zeros_like(x)
        grad[..., self.observable_index] = 1.0
        return grad


# =============================================================================
# ORNSTEIN-UHLENBECK ORACLE
# =============================================================================

@dataclass(frozen=True)
class OrnsteinUhlenbeckModel(SdeModel):
    """
    dX = kappa (mu - X) dt + sigma dW with phi(x) = x.

    The drift parameter theta is mu, so gamma(x) = kappa. Closed-form
    sensitivities make it the oracle for every estimator.
    """

    kappa: float = settings.OU_KAPPA
    mu: float = settings.OU_MU
    name: str = "ou"
    dim: int = 1

    def drift(self, x, theta):
        return self.kappa * (theta - np.asarray(x, dtype=float))

    def drift_jac(self, x, theta):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape + (1,), -self.kappa)

    def drift_dtheta(self, x, theta):
        return np.full(np.shape(x), self.kappa, dtype=float)

    def observable(self, x):
        return np.asarray(x, dtype=float)[..., 0]

    def observable_grad(self, x):
        return np.ones(np.shape(x), dtype=float)

    def expected_value(self, params: ModelParams, T: float) -> float:
        """E[X_T] = mu + (x0 - mu) exp(-kappa T)."""
        mu = params.theta
        return mu + (params.x0[0] - mu) * math.exp(-self.kappa * T)

    def sensitivity_theta(self, T: float) -> float:
        return 1.0 - math.exp(-self.kappa * T)

    def sensitivity_x0(self, T: float) -> float:
        return math.exp(-self.kappa * T)

    def sensitivity_sigma(self, T: float) -> float:
        return 0.0


def ou_model(kappa: float, mu: float) -> OrnsteinUhlenbeckModel:
    """
    Build the Ornstein-Uhlenbeck oracle model.

    Args:
        kappa: Mean-reversion rate, must be positive
        mu: Long-run mean; also the model's default theta

    Returns:
        A one-dimensional OrnsteinUhlenbeckModel
    """
    if not kappa > 0:
        raise InvalidParameter(f"kappa must be > 0 for a mean-reverting OU model, got {kappa}")
    return OrnsteinUhlenbeckModel(kappa=float(kappa), mu=float(mu))


def build_model(name: str, kappa: float = settings.OU_KAPPA, mu: float = settings.OU_MU,
                observable_index: int = settings.LORENZ_OBSERVABLE_INDEX) -> SdeModel:
    """
    Build a model by its configuration name.

    Args:
        name: "lorenz" or "ou"
        kappa: OU mean-reversion rate (ignored for Lorenz)
        mu: OU long-run mean (ignored for Lorenz)
        observable_index: Lorenz component observed by phi (ignored for OU)

    Returns:
        The model instance
    """
    if name == "lorenz":
        if observable_index not in (0, 1, 2):
            raise InvalidParameter(f"observable_index must be 0, 1 or 2, got {observable_index}")
        return LorenzModel(observable_index=observable_index)
    if name == "ou":
        return ou_model(kappa, mu)
    raise InvalidParameter(f"unknown model '{name}' (expected 'lorenz' or 'ou')")


def default_params(model: SdeModel, theta: Optional[float] = None, sigma: Optional[float] = None,
                   x0: Optional[Sequence[float]] = None) -> ModelParams:
    """Parameters for a model, filling gaps with the model's published defaults."""
    if isinstance(model, OrnsteinUhlenbeckModel):
        base = ModelParams(model.mu, settings.OU_SIGMA, settings.OU_X0)
    else:
        base = ModelParams(settings.LORENZ_THETA, settings.LORENZ_SIGMA, settings.LORENZ_X0)
    params = ModelParams(
        theta=base.theta if theta is None else float(theta),
        sigma=base.sigma if sigma is None else float(sigma),
        x0=base.x0 if x0 is None else tuple(x0),
    )
    model.check_params(params)
    return params
