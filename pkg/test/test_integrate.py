"""
Test Noise Streams and Euler-Maruyama Kernels
Covers stream determinism, batching independence, step policies and the augmented recursions.
"""

import math
from dataclasses import dataclass

import numpy as np
import pytest

from engines.errors import InvalidParameter, NonFiniteState
from engines.integrate import (
    EstimatorKind,
    NoiseBatch,
    NoiseStream,
    StepPolicy,
    adaptive_step_size,
    derive_seed,
    em_step,
    initial_variation,
    simulate_augmented,
    simulate_batch,
    variation_step,
)
from engines.models import LorenzModel, ModelParams, SdeModel, ou_model


@dataclass(frozen=True)
class CubicModel(SdeModel):
    """dX = 1000 X^3 dt + sigma dW: explodes in a few steps from x0 = 10."""

    name: str = "cubic"
    dim: int = 1

    def drift(self, x, theta):
        return 1000.0 * np.asarray(x) ** 3

    def drift_jac(self, x, theta):
        x = np.asarray(x)
        return (3000.0 * x ** 2)[..., None]

    def drift_dtheta(self, x, theta):
        return np.zeros(np.shape(x))

    def observable(self, x):
        return np.asarray(x)[..., 0]

    def observable_grad(self, x):
        return np.ones(np.shape(x))


LORENZ = LorenzModel()
LORENZ_PARAMS = ModelParams(28.0, 6.0, (-2.4, -3.7, 14.98))


def test_stream_is_deterministic_and_resettable():
    a = NoiseStream(7, 3, 3)
    b = NoiseStream(7, 3, 3)
    first = a.normals(10)
    assert np.array_equal(first, b.normals(10))
    a.reset()
    assert a.draws == 0
    assert np.array_equal(a.normals(10), first)
    assert not np.array_equal(NoiseStream(7, 4, 3).normals(10), first)


def test_increment_scales_normals():
    a = NoiseStream(1, 0, 2)
    b = NoiseStream(1, 0, 2)
    assert a.increment(0.25) == pytest.approx(0.5 * b.normals(1)[0])


def test_increments_have_brownian_moments():
    h = 0.01
    n = 10 ** 6
    dW = math.sqrt(h) * NoiseStream(2024, 0, 1).normals(n)[:, 0]
    assert abs(dW.mean()) < 4 * math.sqrt(h / n)
    assert abs(dW.var() / h - 1.0) < 0.05


def test_streams_and_components_are_uncorrelated():
    n = 10 ** 5
    bound = 4 / math.sqrt(n)
    a = NoiseStream(2024, 0, 1).normals(n)[:, 0]
    b = NoiseStream(2024, 1, 1).normals(n)[:, 0]
    c = NoiseStream(2025, 0, 1).normals(n)[:, 0]
    assert abs(np.corrcoef(a, b)[0, 1]) < bound
    assert abs(np.corrcoef(a, c)[0, 1]) < bound
    assert abs(np.corrcoef(a[:-1], a[1:])[0, 1]) < bound
    z = NoiseStream(2024, 2, 3).normals(n)
    corr = np.corrcoef(z.T)
    assert np.abs(corr[np.triu_indices(3, 1)]).max() < bound


def test_stream_rejects_negative_seed():
    with pytest.raises(InvalidParameter):
        NoiseStream(-1, 0, 1)


def test_noise_batch_independent_of_batch_composition():
    wide = NoiseBatch.for_indices(11, [0, 1, 2], 3, block_steps=16)
    narrow = NoiseBatch.for_indices(11, [1], 3, block_steps=16)
    for _ in range(40):
        assert np.array_equal(wide.next_normals()[1], narrow.next_normals()[0])


def test_derive_seed_labels():
    assert derive_seed(5, 1) == derive_seed(5, 1)
    assert derive_seed(5, 1) != derive_seed(5, 2)


def test_step_policy_validation_and_counts():
    with pytest.raises(InvalidParameter):
        StepPolicy.uniform(0.0)
    with pytest.raises(InvalidParameter):
        StepPolicy(mode="implicit")
    policy = StepPolicy.uniform(2.0 ** -8)
    assert policy.uniform_steps(1.0) == 256
    assert policy.uniform_steps(1.001) == 257
    adaptive = StepPolicy.adaptive(2.0 ** -9)
    assert adaptive.h_max == 2.0 ** -9
    assert adaptive.h_min == 2.0 ** -19


def test_adaptive_step_size_clamps():
    model = ou_model(1.0, 0.0)
    params = ModelParams(0.0, 0.5, (0.0,))
    policy = StepPolicy.adaptive(0.01)
    steps = adaptive_step_size(np.array([[0.5], [50.0], [1e9]]), model, params, policy)
    assert steps[0] == pytest.approx(0.01)
    assert steps[1] == pytest.approx(0.01 / 50.0)
    assert steps[2] == pytest.approx(policy.h_min)
    with pytest.raises(InvalidParameter):
        adaptive_step_size(np.zeros((1, 1)), model, params, StepPolicy.uniform(0.1))


def test_em_step():
    model = ou_model(2.0, 1.0)
    params = ModelParams(1.0, 0.5, (0.0,))
    x = em_step(np.array([0.0]), 0.1, np.array([0.2]), model, params)
    assert x == pytest.approx([0.2 + 0.1])


def test_simulate_batch_lands_on_horizon():
    model = ou_model(1.0, 0.0)
    params = ModelParams(0.0, 0.5, (1.0,))
    batch = simulate_batch(model, params, EstimatorKind.VALUE, 0.3, StepPolicy.uniform(0.25),
                           NoiseBatch.for_indices(1, range(4), 1))
    assert batch.t == pytest.approx(np.full(4, 0.3), abs=0)
    assert list(batch.steps) == [2, 2, 2, 2]


def test_adaptive_simulation_reaches_horizon():
    batch = simulate_batch(LORENZ, LORENZ_PARAMS, EstimatorKind.VALUE, 0.5, StepPolicy.adaptive(2.0 ** -7),
                           NoiseBatch.for_indices(2, range(8), 3))
    assert np.all(batch.t == 0.5)
    assert np.all(batch.steps >= 64)
    assert not batch.blown.any()


def test_snapshots_match_shorter_run():
    policy = StepPolicy.uniform(2.0 ** -9)
    long = simulate_batch(LORENZ, LORENZ_PARAMS, EstimatorKind.VALUE, 1.0, policy,
                          NoiseBatch.for_indices(3, range(5), 3), snapshot_times=[0.5])
    short = simulate_batch(LORENZ, LORENZ_PARAMS, EstimatorKind.VALUE, 0.5, policy,
                           NoiseBatch.for_indices(3, range(5), 3))
    assert long.snapshots.shape == (1, 5, 3)
    assert long.snapshots[0] == pytest.approx(short.x)


def test_snapshot_times_validated():
    with pytest.raises(InvalidParameter):
        simulate_batch(LORENZ, LORENZ_PARAMS, EstimatorKind.VALUE, 1.0, StepPolicy.uniform(0.01),
                       NoiseBatch.for_indices(0, [0], 3), snapshot_times=[1.5])
    with pytest.raises(InvalidParameter):
        simulate_batch(LORENZ, LORENZ_PARAMS, EstimatorKind.VALUE, 0.0, StepPolicy.uniform(0.01),
                       NoiseBatch.for_indices(0, [0], 3))
    with pytest.raises(InvalidParameter):
        simulate_batch(LORENZ, LORENZ_PARAMS, EstimatorKind.ISPS_THETA, 1.0, StepPolicy.uniform(0.01),
                       NoiseBatch.for_indices(0, [0], 3), spring=-1.0)


def test_blown_paths_are_masked_and_frozen():
    params = ModelParams(0.0, 1.0, (10.0,))
    batch = simulate_batch(CubicModel(), params, EstimatorKind.VALUE, 1.0, StepPolicy.uniform(0.01),
                           NoiseBatch.for_indices(0, range(3), 1))
    assert batch.blown.all()
    assert np.isfinite(batch.blown_t).all()
    assert np.all(batch.x == 0.0)
    with pytest.raises(NonFiniteState):
        simulate_augmented(CubicModel(), params, EstimatorKind.VALUE, 1.0, StepPolicy.uniform(0.01),
                           NoiseStream(0, 0, 1))


def test_standard_variation_on_ou_is_deterministic():
    model = ou_model(1.0, 0.0)
    params = ModelParams(0.0, 0.5, (1.0,))
    h = 2.0 ** -6
    state = simulate_augmented(model, params, EstimatorKind.STANDARD_PS, 1.0, StepPolicy.uniform(h),
                               NoiseStream(9, 0, 1))
    assert state.v[0] == pytest.approx(1.0 - (1.0 - h) ** 64, rel=1e-12)


def test_x0_variation_contracts_with_spring():
    model = ou_model(1.0, 0.0)
    params = ModelParams(0.0, 0.5, (1.0,))
    h = 2.0 ** -6
    state = simulate_augmented(model, params, EstimatorKind.ISPS_X0, 1.0, StepPolicy.uniform(h),
                               NoiseStream(9, 0, 1), spring=1.0, direction=[2.0])
    assert state.v[0] == pytest.approx(2.0 * (1.0 - 2.0 * h) ** 64, rel=1e-12)


def test_malliavin_accumulator_on_ou():
    model = ou_model(1.5, 0.0)
    params = ModelParams(0.0, 0.5, (1.0,))
    h = 2.0 ** -5
    state = simulate_augmented(model, params, EstimatorKind.MALLIAVIN, 1.0, StepPolicy.uniform(h),
                               NoiseStream(4, 2, 1))
    replica = NoiseBatch([NoiseStream(4, 2, 1)], block_steps=64)
    w = sum(math.sqrt(h) * replica.next_normals()[0, 0] for _ in range(32))
    assert state.ito_acc == pytest.approx(1.5 * w / 0.5, rel=1e-10)


def test_isps_theta_without_spring_matches_standard_bitwise():
    policy = StepPolicy.uniform(2.0 ** -9)
    standard = simulate_augmented(LORENZ, LORENZ_PARAMS, EstimatorKind.STANDARD_PS, 1.0, policy,
                                  NoiseStream(2024, 5, 3))
    bypass = simulate_augmented(LORENZ, LORENZ_PARAMS, EstimatorKind.ISPS_THETA, 1.0, policy,
                                NoiseStream(2024, 5, 3), spring=0.0)
    assert np.array_equal(standard.x, bypass.x)
    assert np.array_equal(standard.v, bypass.v)
    assert bypass.ito_acc == 0.0


def test_initial_variation():
    assert initial_variation(EstimatorKind.ISPS_X0, 3) == pytest.approx(np.ones(3))
    assert initial_variation(EstimatorKind.ISPS_THETA, 3) == pytest.approx(np.zeros(3))
    with pytest.raises(InvalidParameter):
        initial_variation(EstimatorKind.ISPS_X0, 3, direction=[1.0, 0.0])


def test_spring_kinds():
    assert EstimatorKind.ISPS_SIGMA.uses_spring
    assert not EstimatorKind.MALLIAVIN.uses_spring
    assert EstimatorKind("isps-x0") is EstimatorKind.ISPS_X0


def coupled_malliavin_gap(h, n, T, seed):
    """Accumulator difference between a 2h path and an h path driven by the same Brownian motion."""
    noise = NoiseBatch.for_indices(seed, range(n), 3)
    coarse = np.tile(LORENZ_PARAMS.x0, (n, 1))
    fine = coarse.copy()
    acc_coarse = np.zeros(n)
    acc_fine = np.zeros(n)
    v = np.zeros((n, 3))
    steps = np.full(n, h)
    for _ in range(round(T / (2 * h))):
        dw1 = math.sqrt(h) * noise.next_normals()
        dw2 = math.sqrt(h) * noise.next_normals()
        _, acc_coarse = variation_step(EstimatorKind.MALLIAVIN, LORENZ, coarse, 28.0, v, acc_coarse, 2 * steps,
                                       dw1 + dw2, 6.0, 0.0)
        coarse = em_step(coarse, 2 * h, dw1 + dw2, LORENZ, LORENZ_PARAMS)
        for dw in (dw1, dw2):
            _, acc_fine = variation_step(EstimatorKind.MALLIAVIN, LORENZ, fine, 28.0, v, acc_fine, steps, dw,
                                         6.0, 0.0)
            fine = em_step(fine, h, dw, LORENZ, LORENZ_PARAMS)
    return acc_coarse - acc_fine


def test_left_point_accumulator_gap_shrinks_with_step():
    wide = coupled_malliavin_gap(2.0 ** -8, 4000, 0.5, 31).var()
    narrow = coupled_malliavin_gap(2.0 ** -9, 4000, 0.5, 31).var()
    assert 1.5 < wide / narrow < 3.2


def test_malliavin_accumulator_is_a_martingale():
    batch = simulate_batch(LORENZ, LORENZ_PARAMS, EstimatorKind.MALLIAVIN, 1.0, StepPolicy.uniform(2.0 ** -8),
                           NoiseBatch.for_indices(32, range(2000), 3))
    acc = batch.ito_acc[~batch.blown]
    assert abs(acc.mean()) < 4 * acc.std(ddof=1) / math.sqrt(acc.size)


def test_malliavin_weight_halves_when_sigma_doubles():
    model = ou_model(1.0, 0.0)
    policy = StepPolicy.uniform(2.0 ** -6)
    base = simulate_augmented(model, ModelParams(0.0, 0.5, (1.0,)), EstimatorKind.MALLIAVIN, 1.0, policy,
                              NoiseStream(33, 0, 1))
    doubled = simulate_augmented(model, ModelParams(0.0, 1.0, (1.0,)), EstimatorKind.MALLIAVIN, 1.0, policy,
                                 NoiseStream(33, 0, 1))
    assert doubled.ito_acc == pytest.approx(base.ito_acc / 2, rel=1e-12)
