"""
Test Multilevel Monte Carlo
Covers the discrete Girsanov weights, the fine/coarse coupling, level samples and the driver.
"""

import math
from dataclasses import dataclass

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from engines.errors import InvalidParameter, MaxLevelsExceeded, UnsupportedKind
from engines.estimators import EstimatorSpec, malliavin_path
from engines.integrate import EstimatorKind, NoiseStream, StepPolicy, em_step, simulate_augmented
from engines.mlmc import (
    CoupledLevelState,
    MlmcConfig,
    coupled_step,
    level_sample,
    level_statistics,
    level_variance_study,
    mlmc_complexity_study,
    mlmc_driver,
    reconstruct_q_increment,
    rn_weight_update,
    sample_level_batch,
)
from engines.models import LorenzModel, ModelParams, SdeModel, ou_model


@dataclass(frozen=True)
class DriftlessModel(SdeModel):
    name: str = "driftless"
    dim: int = 2

    def drift(self, x, theta):
        return np.zeros(np.shape(x))

    def drift_jac(self, x, theta):
        return np.zeros(np.shape(x) + (self.dim,))

    def drift_dtheta(self, x, theta):
        return np.zeros(np.shape(x))

    def observable(self, x):
        return np.asarray(x)[..., 0]

    def observable_grad(self, x):
        grad = np.zeros(np.shape(x))
        grad[..., 0] = 1.0
        return grad


LORENZ = LorenzModel()
LORENZ_PARAMS = ModelParams(28.0, 6.0, (-2.4, -3.7, 14.98))
OU = ou_model(1.0, 0.0)
OU_PARAMS = ModelParams(0.0, 0.5, (1.0,))


def test_rn_update_trivial_cases():
    y = np.array([1.0, 2.0, 3.0])
    dW = np.array([0.1, -0.2, 0.3])
    assert rn_weight_update(0.5, y, y, dW, 0.01, 10.0, 6.0) == pytest.approx(0.5)
    assert rn_weight_update(0.5, y, y + 1.0, dW, 0.01, 0.0, 6.0) == 0.5
    with pytest.raises(InvalidParameter):
        rn_weight_update(0.0, y, y, dW, 0.01, 10.0, 0.0)


def test_rn_update_is_exact_gaussian_transition_ratio():
    rng = np.random.default_rng(3)
    y0 = np.array([-2.4, -3.7, 14.98])
    other = y0 + rng.normal(scale=0.3, size=3)
    h, S, sigma = 0.01, 10.0, 6.0
    dW = rng.normal(scale=math.sqrt(h), size=3)
    free = y0 + LORENZ.drift(y0, 28.0) * h
    y1 = free + S * (other - y0) * h + sigma * dW

    cov = sigma ** 2 * h * np.eye(3)
    exact = (multivariate_normal(free, cov).logpdf(y1)
             - multivariate_normal(free + S * (other - y0) * h, cov).logpdf(y1))
    assert rn_weight_update(0.0, y0, other, dW, h, S, sigma) == pytest.approx(exact, rel=1e-9)


def test_reconstructed_increment_drives_unmodified_scheme():
    rng = np.random.default_rng(5)
    y0 = np.array([[1.0, -1.0, 20.0]])
    other = np.array([[1.2, -0.7, 19.5]])
    h, S = 0.01, 10.0
    dW = rng.normal(scale=math.sqrt(h), size=(1, 3))
    dq = reconstruct_q_increment(dW, y0, other, np.array([h]), S, LORENZ_PARAMS.sigma)
    pulled = em_step(y0, h, dW, LORENZ, LORENZ_PARAMS) + S * (other - y0) * h
    assert em_step(y0, h, dq, LORENZ, LORENZ_PARAMS) == pytest.approx(pulled)
    assert np.array_equal(reconstruct_q_increment(dW, y0, y0, h, S, 6.0), dW)
    assert np.array_equal(reconstruct_q_increment(dW, y0, other, h, 0.0, 6.0), dW)


def test_coupled_step_stays_together_without_noise():
    params = ModelParams(0.0, 1.0, (0.5, -0.5))
    state = CoupledLevelState.initial(params, EstimatorKind.VALUE, 3)
    zero = np.zeros((3, 2))
    for _ in range(4):
        state = coupled_step(state, 0.1, zero, zero, DriftlessModel(), params, 10.0)
    assert np.array_equal(state.y_fine, state.y_coarse)
    assert np.all(state.log_rn_fine == 0.0)
    assert np.all(state.log_rn_coarse == 0.0)
    assert state.t == pytest.approx(0.4)


def test_coarse_increment_is_sum_of_fine_increments():
    params = ModelParams(0.0, 2.0, (0.0, 0.0))
    state = CoupledLevelState.initial(params, EstimatorKind.VALUE, 2)
    rng = np.random.default_rng(1)
    dW1, dW2 = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    state = coupled_step(state, 0.5, dW1, dW2, DriftlessModel(), params, 0.0)
    assert state.y_coarse == pytest.approx(2.0 * (dW1 + dW2))
    assert state.y_fine == pytest.approx(state.y_coarse)


def test_level_zero_is_plain_estimator():
    config = MlmcConfig(h0=2.0 ** -6)
    spec = EstimatorSpec(EstimatorKind.MALLIAVIN)
    sample = level_sample(0, OU, OU_PARAMS, spec, 1.0, config, NoiseStream(17, 3, 1))
    plain = malliavin_path(OU, OU_PARAMS, 1.0, StepPolicy.uniform(2.0 ** -6), NoiseStream(17, 3, 1))
    assert sample.value == pytest.approx(plain.value, rel=1e-12)
    assert sample.cost == plain.cost


def test_level_cost_counts_fine_and_coarse_steps():
    config = MlmcConfig(h0=0.25)
    sample = level_sample(2, OU, OU_PARAMS, EstimatorSpec(EstimatorKind.VALUE), 1.0, config, NoiseStream(1, 0, 1))
    assert sample.cost == 3 * 8


def test_standard_ps_is_not_multileveled():
    with pytest.raises(UnsupportedKind):
        level_sample(1, OU, OU_PARAMS, EstimatorSpec(EstimatorKind.STANDARD_PS), 1.0, MlmcConfig(),
                     NoiseStream(0, 0, 1))
    with pytest.raises(UnsupportedKind):
        mlmc_driver(OU, OU_PARAMS, EstimatorSpec(EstimatorKind.STANDARD_PS), 1.0)


def test_without_change_of_measure_weights_are_one():
    config = MlmcConfig(h0=2.0 ** -5).without_change_of_measure()
    samples = sample_level_batch(1, LORENZ, LORENZ_PARAMS, EstimatorSpec(EstimatorKind.MALLIAVIN), 1.0,
                                 config, 3, range(20))
    assert np.all(samples.log_rn_fine == 0.0)
    assert np.all(samples.log_rn_coarse == 0.0)


def test_rn_weights_have_mean_one():
    config = MlmcConfig(h0=2.0 ** -6, spring=10.0)
    samples = sample_level_batch(2, LORENZ, LORENZ_PARAMS, EstimatorSpec(EstimatorKind.VALUE), 1.0,
                                 config, 2024, range(2000))
    for log_rn in (samples.log_rn_fine, samples.log_rn_coarse):
        weights = np.exp(log_rn)
        stderr = weights.std(ddof=1) / math.sqrt(weights.size)
        assert abs(weights.mean() - 1.0) < 4 * stderr + 1e-12


def test_level_variance_decays_on_ou():
    config = MlmcConfig(h0=2.0 ** -3)
    spec = EstimatorSpec(EstimatorKind.VALUE)
    v1 = level_statistics(1, OU, OU_PARAMS, spec, 1.0, config, 5, 2000).variance
    v3 = level_statistics(3, OU, OU_PARAMS, spec, 1.0, config, 5, 2000).variance
    assert v1 > 4 * v3


def test_deterministic_levels_telescope_exactly():
    params = OU_PARAMS.with_(sigma=0.0)
    config = MlmcConfig(h0=0.25, n_init=2).without_change_of_measure()
    spec = EstimatorSpec(EstimatorKind.VALUE)
    total = sum(level_statistics(level, OU, params, spec, 1.0, config, 0, 2).mean for level in range(4))
    finest = simulate_augmented(OU, params, EstimatorKind.VALUE, 1.0, StepPolicy.uniform(0.25 / 8),
                                NoiseStream(0, 0, 1))
    assert total == pytest.approx(finest.x[0], rel=1e-12)


def test_max_levels_exceeded():
    params = OU_PARAMS.with_(sigma=0.0)
    config = MlmcConfig(eps=1e-9, h0=0.25, max_levels=1, n_init=2).without_change_of_measure()
    with pytest.raises(MaxLevelsExceeded):
        mlmc_driver(OU, params, EstimatorSpec(EstimatorKind.VALUE), 1.0, config)


def test_driver_matches_ou_sensitivity():
    config = MlmcConfig(eps=0.02, h0=2.0 ** -4, spring=1.0, n_init=200)
    report = mlmc_driver(OU, OU_PARAMS, EstimatorSpec(EstimatorKind.MALLIAVIN), 1.0, config, master_seed=11)
    assert abs(report.estimate - OU.sensitivity_theta(1.0)) < 3 * config.eps
    assert len(report.levels) >= 3
    assert report.alpha >= 0.5
    assert all(level.n_samples >= 2 for level in report.levels)
    assert report.total_cost > 0
    assert [row["level"] for row in report.to_rows()] == list(range(len(report.levels)))


def test_config_validation():
    with pytest.raises(InvalidParameter):
        MlmcConfig(eps=0.0)
    with pytest.raises(InvalidParameter):
        MlmcConfig(max_levels=25)
    with pytest.raises(InvalidParameter):
        MlmcConfig(refinement=4)
    assert MlmcConfig(h0=0.5).step(3) == 0.0625


def test_level_variance_study_rows():
    config = MlmcConfig(h0=2.0 ** -4, spring=1.0)
    rows = level_variance_study(OU, OU_PARAMS, EstimatorSpec(EstimatorKind.VALUE), [0.5, 1.0], config, 1, 50)
    assert [(r["T"], r["level"]) for r in rows] == [(0.5, 0), (0.5, 1), (1.0, 0), (1.0, 1)]
    assert rows[0]["variance"] == rows[0]["variance_no_com"]
    assert all(r["variance"] >= 0 for r in rows)


def test_complexity_study_rows():
    config = MlmcConfig(h0=2.0 ** -4, spring=1.0, n_init=100)
    rows = mlmc_complexity_study(OU, OU_PARAMS, EstimatorSpec(EstimatorKind.MALLIAVIN), 1.0, [0.1, 0.05],
                                 config, 3)
    assert [r["eps"] for r in rows] == [0.1, 0.05]
    assert all(r["mlmc_cost"] > 0 and r["std_mc_cost"] > 0 for r in rows)
