import numpy as np
import pytest

from varenkf.baselines import (
    WeightedEnsemble,
    analytic_kalman_map,
    ekf_update,
    importance_weights,
    nleaf_update,
    pf_update,
    stochastic_enkf_update,
    systematic_resample,
)
from varenkf.ensemble import (
    GaussianMoments,
    StateEnsemble,
    empirical_moments,
    sample_gaussian,
)
from varenkf.obsmodel import LinearGaussianObs, PowerScaledNoiseModel


def _linear_setup(seed=0, M=50_000):
    rng = np.random.default_rng(seed)
    prior = GaussianMoments(np.array([1.0, -1.0]), np.array([[2.0, 0.5], [0.5, 1.0]]))
    obs = LinearGaussianObs(np.array([[1.0, 0.0], [0.3, 1.0]]), np.diag([0.5, 0.8]))
    y = np.array([0.2, -0.4])
    ens = sample_gaussian(prior, M, rng)
    return rng, prior, obs, y, ens


def _kalman_posterior(mom, obs, y):
    S = obs.H @ mom.cov @ obs.H.T + obs.R
    K = np.linalg.solve(S.T, obs.H @ mom.cov).T
    mean = mom.mean + K @ (y - obs.H @ mom.mean)
    cov = (np.eye(mom.dim) - K @ obs.H) @ mom.cov
    return mean, cov, K


class TestWeightedEnsemble:
    def test_valid(self):
        we = WeightedEnsemble(np.zeros((3, 2)), np.full(3, 1 / 3))
        assert we.weights.sum() == pytest.approx(1.0)

    @pytest.mark.parametrize(
        "weights", [np.full(2, 0.5), np.array([0.5, 0.6, -0.1]), np.full(3, 0.5)]
    )
    def test_invalid(self, weights):
        with pytest.raises(ValueError):
            WeightedEnsemble(np.zeros((3, 2)), weights)


class TestAnalyticKalmanMap:
    def test_matches_hand_formulas(self):
        _, prior, obs, y, _ = _linear_setup()
        mean, cov, K = _kalman_posterior(prior, obs, y)
        amap = analytic_kalman_map(prior, obs, y)
        assert np.allclose(amap.A, np.eye(2) - K @ obs.H)
        assert np.allclose(amap.b, K @ y)
        assert np.allclose(amap(prior.mean), mean)


class TestEkfUpdate:
    def test_exact_on_linear_gaussian(self):
        _, prior, obs, y, ens = _linear_setup()
        emp = empirical_moments(ens)
        mean, _, K = _kalman_posterior(emp, obs, y)
        out = empirical_moments(ekf_update(ens, obs, y))
        assert np.allclose(out.mean, mean, atol=1e-10)
        # the deterministic map contracts the sample covariance to A S A^T
        A = np.eye(2) - K @ obs.H
        assert np.allclose(out.cov, A @ emp.cov @ A.T, atol=1e-10)

    def test_linearized_nonlinear_model_runs(self):
        rng = np.random.default_rng(1)
        ens = StateEnsemble(rng.normal(2.0, 0.5, size=(200, 3)))
        obs = PowerScaledNoiseModel(obs_dim=3, theta=0.5)
        out = ekf_update(ens, obs, np.array([0.4, 0.4, 0.4]))
        assert np.all(np.isfinite(out.members))


class TestStochasticEnkf:
    def test_large_ensemble_matches_kalman_mean(self):
        rng, prior, obs, y, ens = _linear_setup()
        mean, cov, _ = _kalman_posterior(empirical_moments(ens), obs, y)
        out = empirical_moments(stochastic_enkf_update(ens, obs, y, rng))
        assert np.allclose(out.mean, mean, atol=0.03)
        assert np.allclose(out.cov, cov, atol=0.05)

    def test_reproducible_given_rng_state(self):
        _, _, obs, y, ens = _linear_setup(M=100)
        a = stochastic_enkf_update(ens, obs, y, np.random.default_rng(7))
        b = stochastic_enkf_update(ens, obs, y, np.random.default_rng(7))
        assert np.array_equal(a.members, b.members)


class TestImportanceWeights:
    def test_normalized_and_shift_invariant(self):
        nll = np.array([1.0, 2.0, 3.0])
        w = importance_weights(nll)
        assert w.sum() == pytest.approx(1.0)
        assert np.allclose(w, importance_weights(nll + 500.0))
        assert w[0] > w[1] > w[2]

    def test_degenerate_raises(self):
        with pytest.raises(FloatingPointError):
            importance_weights(np.array([np.inf, np.inf]))


class TestSystematicResample:
    def test_counts_within_one_of_expectation(self):
        # systematic resampling guarantees counts within 1 of M * w
        w = np.array([0.5, 0.3, 0.2])
        idx = systematic_resample(w, np.random.default_rng(0))
        counts = np.bincount(idx, minlength=3)
        assert np.all(np.abs(counts - len(idx) * w) < 1)

    def test_uniform_weights_keep_every_member(self):
        idx = systematic_resample(np.full(4, 0.25), np.random.default_rng(1))
        assert sorted(idx) == [0, 1, 2, 3]

    def test_indices_in_range(self):
        rng = np.random.default_rng(2)
        w = rng.dirichlet(np.ones(10))
        idx = systematic_resample(w, rng)
        assert idx.min() >= 0 and idx.max() < 10


class TestPfUpdate:
    def test_posterior_mean_linear_gaussian(self):
        rng, prior, obs, y, ens = _linear_setup(M=100_000)
        mean, _, _ = _kalman_posterior(empirical_moments(ens), obs, y)
        out = pf_update(ens, obs, y, rng)
        assert np.allclose(out.members.mean(axis=0), mean, atol=0.03)

    def test_members_are_subset_of_prior(self):
        rng = np.random.default_rng(3)
        ens = StateEnsemble(rng.normal(1.0, 1.0, size=(50, 2)))
        obs = PowerScaledNoiseModel(obs_dim=2, theta=0.0)
        out = pf_update(ens, obs, np.array([0.1, 0.1]), rng)
        prior_rows = {tuple(row) for row in ens.members}
        assert all(tuple(row) in prior_rows for row in out.members)


class TestNleafUpdate:
    def test_rejects_bad_order(self):
        rng = np.random.default_rng(4)
        ens = StateEnsemble(rng.standard_normal((10, 2)))
        obs = PowerScaledNoiseModel(obs_dim=2, theta=0.0)
        with pytest.raises(ValueError):
            nleaf_update(ens, obs, np.zeros(2), 3, rng)

    @pytest.mark.parametrize("order", [1, 2])
    def test_posterior_mean_linear_gaussian(self, order):
        rng, prior, obs, y, ens = _linear_setup(M=4000)
        mean, _, _ = _kalman_posterior(empirical_moments(ens), obs, y)
        out = nleaf_update(ens, obs, y, order, rng)
        assert np.allclose(out.members.mean(axis=0), mean, atol=0.08)

    def test_order2_corrects_spread(self):
        # order 2 should track the posterior covariance as well as the mean
        rng, prior, obs, y, ens = _linear_setup(M=4000)
        _, cov, _ = _kalman_posterior(empirical_moments(ens), obs, y)
        out = empirical_moments(nleaf_update(ens, obs, y, 2, rng))
        assert np.allclose(out.cov, cov, atol=0.12)

    def test_reproducible_given_rng_state(self):
        _, _, obs, y, ens = _linear_setup(M=100)
        a = nleaf_update(ens, obs, y, 1, np.random.default_rng(9))
        b = nleaf_update(ens, obs, y, 1, np.random.default_rng(9))
        assert np.array_equal(a.members, b.members)
