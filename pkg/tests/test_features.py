import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mtmpc.errors import InvalidArgumentError
from mtmpc.features import (FeatureModel, MlpWeights, Posterior, PriorSpec, eval_features,
                            feature_jacobian, posterior_update, predict)


def naive_posterior(lam, Phi, y, sigma_w):
    """Explicit-inverse reference for the Gaussian weight posterior."""
    cov = np.linalg.inv(np.linalg.inv(np.diag(lam)) + Phi.T @ Phi / sigma_w**2)
    return cov @ Phi.T @ y / sigma_w**2, cov


class TestEvalFeatures:
    def test_trig_at_origin(self):
        m = FeatureModel.from_frequencies([[0.3, -1.2], [2.0, 0.5], [0.7, 0.1]])
        np.testing.assert_array_equal(eval_features(m, [0.0, 0.0]), [0, 0, 0, 1, 1, 1])

    def test_trig_quarter_period(self):
        m = FeatureModel.from_frequencies([[0.25]])
        np.testing.assert_allclose(eval_features(m, [1.0]), [1.0, 0.0], atol=1e-15)

    @given(hnp.arrays(float, (4, 3), elements=st.floats(-5, 5)))
    def test_constant(self, z):
        m = FeatureModel.constant(3)
        np.testing.assert_array_equal(eval_features(m, z), np.ones((4, 1)))

    def test_batched_matches_single(self, rng):
        m = FeatureModel.from_frequencies(rng.normal(size=(3, 2)))
        Z = rng.normal(size=(5, 2))
        np.testing.assert_allclose(eval_features(m, Z), np.stack([eval_features(m, z) for z in Z]))

    def test_wrong_input_dim(self):
        with pytest.raises(InvalidArgumentError):
            eval_features(FeatureModel.from_frequencies([[1.0, 2.0]]), [1.0])

    def test_degenerate_mlp_is_constant(self, rng):
        w = MlpWeights.init(2, 4, 3, rng)
        w = MlpWeights(np.zeros_like(w.W1), w.b1, np.zeros_like(w.W2), w.b2, np.zeros_like(w.W3), w.b3)
        out = eval_features(FeatureModel.from_mlp(w), rng.normal(size=(6, 2)))
        np.testing.assert_allclose(out, np.broadcast_to(w.b3, (6, 3)))


class TestFeatureJacobian:
    @given(hnp.arrays(float, 2, elements=st.floats(-2, 2)))
    def test_matches_central_differences(self, z):
        rng = np.random.default_rng(0)
        h = 1e-6
        for m in (FeatureModel.from_frequencies(rng.normal(size=(3, 2))),
                  FeatureModel.from_mlp(MlpWeights.init(2, 5, 4, rng)),
                  FeatureModel.constant(2)):
            num = np.stack([(eval_features(m, z + h * e) - eval_features(m, z - h * e)) / (2 * h)
                            for e in np.eye(2)], axis=-1)
            np.testing.assert_allclose(feature_jacobian(m, z), num, rtol=1e-6, atol=1e-7)


class TestPosteriorUpdate:
    def test_no_data_is_prior(self):
        prior = PriorSpec([0.5, 2.0, 3.0])
        post = posterior_update(prior, np.zeros((0, 3)), np.zeros(0), 0.1)
        np.testing.assert_array_equal(post.mean, np.zeros(3))
        np.testing.assert_allclose(post.covariance, np.diag([0.5, 2.0, 3.0]))

    def test_uninformative_noise(self, rng):
        prior = PriorSpec([0.5, 2.0])
        post = posterior_update(prior, rng.normal(size=(10, 2)), rng.normal(size=10), 1e6)
        np.testing.assert_allclose(post.mean, 0.0, atol=1e-6)
        np.testing.assert_allclose(post.covariance, np.diag([0.5, 2.0]), atol=1e-6)

    def test_matches_naive_oracle(self, rng):
        lam = np.array([0.7, 1.9])
        Phi, y = rng.normal(size=(5, 2)), rng.normal(size=5)
        post = posterior_update(PriorSpec(lam), Phi, y, 0.3)
        mean, cov = naive_posterior(lam, Phi, y, 0.3)
        np.testing.assert_allclose(post.mean, mean, rtol=0, atol=1e-8)
        np.testing.assert_allclose(post.covariance, cov, rtol=0, atol=1e-8)

    def test_covariance_symmetric_positive(self, rng):
        post = posterior_update(PriorSpec(np.ones(6)), rng.normal(size=(40, 6)), rng.normal(size=40), 0.05)
        np.testing.assert_array_equal(post.covariance, post.covariance.T)
        assert np.linalg.eigvalsh(post.covariance).min() > 0

    def test_shape_errors(self):
        with pytest.raises(InvalidArgumentError):
            posterior_update(PriorSpec([1.0, 1.0]), np.zeros((3, 2)), np.zeros(4), 0.1)
        with pytest.raises(InvalidArgumentError):
            posterior_update(PriorSpec([1.0]), np.zeros((3, 1)), np.zeros(3), 0.0)
        with pytest.raises(InvalidArgumentError):
            PriorSpec([1.0, -1.0])


class TestPredict:
    def test_prior_predictive(self, rng):
        m = FeatureModel.from_frequencies(rng.normal(size=(2, 1)))
        lam = np.array([0.5, 1.5, 2.0, 3.0])
        z = np.array([0.37])
        mean, var = predict(PriorSpec(lam).as_posterior(), m, z, 0.2)
        phi = eval_features(m, z)
        assert mean == 0.0
        np.testing.assert_allclose(var, 0.04 + np.sum(lam * phi**2))

    def test_interpolates_noiseless_data(self, rng):
        m = FeatureModel.from_frequencies([[0.4], [1.3]])
        Z = rng.uniform(-1, 1, (50, 1))
        y = eval_features(m, Z) @ np.array([1.0, -0.5, 0.3, 2.0])
        post = posterior_update(PriorSpec(np.ones(4)), eval_features(m, Z), y, 1e-3)
        mean, _ = predict(post, m, Z, 1e-3)
        np.testing.assert_allclose(mean, y, atol=1e-2)

    def test_constant_model(self):
        post = Posterior(np.array([2.5]), np.array([[0.3]]))
        mean, var = predict(post, FeatureModel.constant(1), [7.0], 0.1)
        np.testing.assert_allclose([mean, var], [2.5, 0.01 + 0.3])

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            predict(PriorSpec(np.ones(3)).as_posterior(), FeatureModel.constant(1), [0.0], 0.1)


def test_feature_model_round_trip(rng):
    for m in (FeatureModel.from_frequencies(rng.normal(size=(3, 2))),
              FeatureModel.from_mlp(MlpWeights.init(2, 5, 4, rng)), FeatureModel.constant(2)):
        back = FeatureModel.from_dict(m.to_dict())
        z = rng.normal(size=(4, 2))
        np.testing.assert_array_equal(eval_features(back, z), eval_features(m, z))
