import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mtmpc.adapt import (SIGMA_R_BOUNDS, NoiseEstimateWarning, accel_estimator_step, batch_adapter,
                         estimate_measurement_noise, init_accel_estimator, init_adapter, kalman_step)
from mtmpc.errors import InvalidArgumentError
from mtmpc.features import PriorSpec, posterior_update
from mtmpc.metatrain import Hyperparams

# steady-state acceleration lag under unit jerk, q_jerk=100, r=(1e-6, 1e-4), dt=0.02;
# recorded from the first validated run
UNIT_JERK_LAG = -0.0108855379786


class TestInit:
    def test_prior_state(self):
        s = init_adapter(PriorSpec([1.0, 1.0]), 0.0, 0.01)
        np.testing.assert_array_equal(s.mean, [0.0, 0.0])
        np.testing.assert_array_equal(s.cov, np.eye(2))

    def test_from_hyperparams(self):
        hp = Hyperparams(np.array([[0.3]]), np.array([-1.0, 0.5]), np.array([-2.0]))
        s = init_adapter(hp.prior(), 1e-6, 0.01)
        np.testing.assert_allclose(s.cov, np.diag(np.exp([-1.0, 0.5])))

    def test_mismatched_dims(self):
        with pytest.raises(InvalidArgumentError):
            init_adapter(PriorSpec([1.0, 1.0]), 0.0, 0.01, feature_dim=3)
        with pytest.raises(InvalidArgumentError):
            init_adapter(PriorSpec([1.0]), -1.0, 0.01)
        with pytest.raises(InvalidArgumentError):
            kalman_step(init_adapter(PriorSpec([1.0, 1.0]), 0.0, 0.01), np.ones(3), 0.0)


class TestKalmanStep:
    def test_no_information(self):
        s = init_adapter(PriorSpec([2.0, 3.0]), 0.1, 0.5)
        out = kalman_step(s, np.zeros(2), 4.0)
        np.testing.assert_array_equal(out.mean, s.mean)
        np.testing.assert_allclose(out.cov, s.cov + 0.1 * np.eye(2))

    def test_uninformative_measurement(self):
        s = init_adapter(PriorSpec([2.0, 3.0]), 0.0, 1e9)
        out = kalman_step(s, np.array([1.0, -0.5]), 5.0)
        assert np.abs(out.mean - s.mean).max() < 1e-6

    def test_scalar_hand_case(self):
        out = kalman_step(init_adapter(PriorSpec([1.0]), 0.0, 1.0), np.array([1.0]), 2.0)
        np.testing.assert_allclose(out.mean, [1.0])
        np.testing.assert_allclose(out.cov, [[0.5]])

    def test_rejects_non_finite_measurement(self):
        with pytest.raises(InvalidArgumentError):
            kalman_step(init_adapter(PriorSpec([1.0]), 0.0, 1.0), np.array([1.0]), np.nan)

    @given(st.integers(0, 2**32 - 1))
    def test_sequential_equals_batch_posterior(self, seed):
        rng = np.random.default_rng(seed)
        F, N = rng.integers(1, 6), rng.integers(1, 30)
        lam = rng.uniform(0.2, 3.0, F)
        sw = rng.uniform(0.1, 1.0)
        Phi, y = rng.normal(size=(N, F)), rng.normal(size=N)
        s = init_adapter(PriorSpec(lam), 0.0, sw**2)
        for phi, v in zip(Phi, y):
            s = kalman_step(s, phi, v)
        post = posterior_update(PriorSpec(lam), Phi, y, sw)
        np.testing.assert_allclose(s.mean, post.mean, rtol=0, atol=1e-9)
        np.testing.assert_allclose(s.cov, post.covariance, rtol=0, atol=1e-9)

    def test_batched_matches_single(self, rng):
        prior = PriorSpec([1.0, 2.0, 0.5])
        single = [init_adapter(prior, 1e-4, 0.2) for _ in range(4)]
        batch = batch_adapter(single[0], 4)
        for _ in range(10):
            Phi, y = rng.normal(size=(4, 3)), rng.normal(size=4)
            batch = kalman_step(batch, Phi, y)
            single = [kalman_step(s, p, v) for s, p, v in zip(single, Phi, y)]
        np.testing.assert_allclose(batch.mean, np.stack([s.mean for s in single]), rtol=1e-12)
        np.testing.assert_allclose(batch.cov, np.stack([s.cov for s in single]), rtol=1e-12)

    def test_covariance_stays_symmetric_positive(self, rng):
        s = init_adapter(PriorSpec(np.full(4, 10.0)), 1e-6, 1e-4)
        for _ in range(500):
            s = kalman_step(s, rng.normal(size=4) * 10, rng.normal())
        np.testing.assert_array_equal(s.cov, s.cov.T)
        assert np.linalg.eigvalsh(s.cov).min() > 0


class TestNoiseEstimate:
    def planted(self, rng, n=200, r=0.1):
        Phi = rng.normal(size=(n, 4))
        y = Phi @ rng.normal(size=4) + math.sqrt(r) * rng.standard_normal(n)
        return Phi, y

    def test_planted_noise_recovered(self, rng):
        est = estimate_measurement_noise(self.planted(rng), PriorSpec(np.ones(4)))
        assert 0.1 / 1.5 <= est <= 0.1 * 1.5

    def test_noiseless_hits_lower_bound(self, rng):
        Phi = rng.normal(size=(50, 3))
        with pytest.warns(NoiseEstimateWarning):
            est = estimate_measurement_noise((Phi, Phi @ np.array([1.0, -2.0, 0.5])), PriorSpec(np.ones(3)))
        assert est == SIGMA_R_BOUNDS[0]

    def test_duplicated_batch_same_location(self, rng):
        Phi, y = self.planted(rng)
        a = estimate_measurement_noise((Phi, y), PriorSpec(np.ones(4)))
        b = estimate_measurement_noise((np.vstack([Phi, Phi]), np.concatenate([y, y])), PriorSpec(np.ones(4)))
        grid_step = math.log(SIGMA_R_BOUNDS[1] / SIGMA_R_BOUNDS[0]) / 120
        assert abs(math.log(a / b)) <= grid_step

    def test_pairs_interface(self, rng):
        Phi, y = self.planted(rng, n=30)
        assert estimate_measurement_noise(list(zip(Phi, y)), PriorSpec(np.ones(4))) == \
            estimate_measurement_noise((Phi, y), PriorSpec(np.ones(4)))

    def test_small_batch_rejected(self):
        with pytest.raises(InvalidArgumentError):
            estimate_measurement_noise((np.ones((3, 1)), np.ones(3)), PriorSpec([1.0]))


class TestAccelEstimator:
    def test_constant_acceleration_converges(self):
        est = init_accel_estimator(1.0, [1e-6, 1e-6])
        dt, a = 0.02, 1.7
        for k in range(1, 51):
            t = k * dt
            est = accel_estimator_step(est, [0.5 * a * t * t, a * t], dt)
        assert abs(est.state[2] - a) <= 0.01 * a

    def test_rest_stays_at_rest(self):
        est = init_accel_estimator(100.0, [1e-4, 1e-4])
        for _ in range(100):
            est = accel_estimator_step(est, [0.0, 0.0], 0.02)
        np.testing.assert_array_equal(est.state, 0.0)

    def test_unit_jerk_lag(self):
        est = init_accel_estimator(100.0, [1e-6, 1e-4])
        dt = 0.02
        for k in range(1, 301):
            t = k * dt
            est = accel_estimator_step(est, [t**3 / 6, t**2 / 2], dt)
        np.testing.assert_allclose(est.state[2] - 300 * dt, UNIT_JERK_LAG, rtol=0, atol=1e-8)

    def test_batched(self, rng):
        est = init_accel_estimator(100.0, [1e-4, 1e-3])
        batch = type(est)(np.tile(est.state, (3, 1)), np.tile(est.cov, (3, 1, 1)), est.q_jerk, est.r_meas)
        meas = rng.normal(size=(20, 3, 2))
        singles = [est] * 3
        for m in meas:
            batch = accel_estimator_step(batch, m, 0.02)
            singles = [accel_estimator_step(s, mi, 0.02) for s, mi in zip(singles, m)]
        np.testing.assert_allclose(batch.state, np.stack([s.state for s in singles]), rtol=1e-12)

    def test_bad_dt(self):
        with pytest.raises(InvalidArgumentError):
            accel_estimator_step(init_accel_estimator(1.0, [1.0, 1.0]), [0.0, 0.0], 0.0)
