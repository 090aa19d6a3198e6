"""Exact GP regression: NLML, fitting and prediction."""

import numpy as np
import pytest

from scalegp import full
from scalegp.data import Dataset, generate_sinc, normalize
from scalegp.exceptions import DimensionError
from scalegp.kernel import Hyperparameters, kernel_matrix
from scalegp.optimize import check_gradient

LOG_2PI = np.log(2 * np.pi)


def make_hp(ls, sf2, sn2):
    return Hyperparameters(np.log(np.atleast_1d(ls)), np.log(sf2), np.log(sn2))


class TestNlml:
    def test_single_point_at_zero(self):
        data = Dataset(np.array([[0.0]]), np.array([0.0]))
        hp = make_hp(1.0, 1.0, 1e-12)
        val, _ = full.nlml(data, hp)
        assert val == pytest.approx(0.5 * LOG_2PI, abs=1e-9)

    def test_single_point_standard_normal(self):
        data = Dataset(np.array([[0.0]]), np.array([1.0]))
        hp = make_hp(1.0, 0.5, 0.5)  # sf2 + sn2 = 1
        val, _ = full.nlml(data, hp)
        assert val == pytest.approx(0.5 * LOG_2PI + 0.5, abs=1e-12)

    def test_matches_dense_gaussian_density(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(3, 2))
        y = rng.normal(size=3)
        hp = make_hp([0.8, 1.3], 1.5, 0.3)
        val, _ = full.nlml(Dataset(X, y), hp)
        # independent route: explicit inverse and slogdet
        A = kernel_matrix(X, X, hp).values + hp.noise_var * np.eye(3)
        brute = 0.5 * (3 * LOG_2PI + np.linalg.slogdet(A)[1]
                       + y @ np.linalg.inv(A) @ y)
        assert val == pytest.approx(brute, abs=1e-10)

    def test_gradient_matches_fd_over_50_draws(self):
        rng = np.random.default_rng(1)
        data = Dataset(rng.normal(size=(30, 2)), rng.normal(size=30))
        worst = 0.0
        for _ in range(50):
            hp = make_hp(rng.uniform(0.4, 2.0, 2), rng.uniform(0.5, 2.0),
                         rng.uniform(0.05, 0.5))
            err = check_gradient(
                lambda v: full.nlml(data, Hyperparameters.from_vector(v)),
                hp.to_vector())
            worst = max(worst, err)
        assert worst < 1e-5

    def test_size_cap(self):
        rng = np.random.default_rng(2)
        data = Dataset(rng.normal(size=(50, 1)), rng.normal(size=50))
        with pytest.raises(DimensionError):
            full.nlml(data, make_hp(1.0, 1.0, 0.1), exact_cap=40)


class TestFit:
    def test_recovers_noise_on_prior_sample(self):
        rng = np.random.default_rng(3)
        n = 200
        X = rng.uniform(-3, 3, size=(n, 1))
        hp_true = make_hp(0.8, 1.0, 0.1)
        K = kernel_matrix(X, X, hp_true).values
        L = np.linalg.cholesky(K + 1e-10 * np.eye(n))
        y = L @ rng.normal(size=n) + np.sqrt(0.1) * rng.normal(size=n)
        model = full.fit(Dataset(X, y), Hyperparameters.default(1))
        assert 0.05 <= model.hp.noise_var <= 0.2

    def test_sinc_noise_estimate(self):
        train, _ = generate_sinc(seed=0)
        train = normalize(train)
        model = full.fit(train, Hyperparameters.default(1))
        sn2_orig = model.hp.noise_var * train.norm_stats.y_std**2
        assert 0.02 <= sn2_orig <= 0.08

    def test_stationary_start_returns_immediately(self):
        # for one observation y with sf2 + sn2 = y^2 every log-gradient is zero
        data = Dataset(np.array([[0.0]]), np.array([1.0]))
        hp0 = make_hp(1.0, 0.5, 0.5)
        model = full.fit(data, hp0)
        np.testing.assert_allclose(model.hp.to_vector(), hp0.to_vector())
        _, grad = full.nlml(data, model.hp)
        assert np.linalg.norm(grad) < 1e-6
        assert len(model.trace.iterations) == 1

    def test_fit_never_worse_than_start(self):
        rng = np.random.default_rng(4)
        data = Dataset(rng.normal(size=(40, 2)), rng.normal(size=40))
        hp0 = Hyperparameters.default(2)
        start, _ = full.nlml(data, hp0)
        model = full.fit(data, hp0)
        assert model.nlml <= start + 1e-12


class TestTrainedModelInvariants:
    def test_factor_reconstruction_and_nlml_consistency(self):
        rng = np.random.default_rng(5)
        data = Dataset(rng.normal(size=(25, 2)), rng.normal(size=25))
        model = full.fit(data, Hyperparameters.default(2), max_iters=15)
        A = kernel_matrix(data.X, data.X, model.hp).values \
            + (model.hp.noise_var + model.jitter) * np.eye(25)
        rel = np.linalg.norm(model.chol @ model.chol.T - A) / np.linalg.norm(A)
        assert rel < 1e-8
        recomputed = 0.5 * (25 * LOG_2PI
                            + 2 * np.sum(np.log(np.diag(model.chol)))
                            + data.y @ model.alpha)
        assert model.nlml == pytest.approx(recomputed, abs=1e-10)


class TestPredict:
    def test_noiseless_interpolation(self):
        rng = np.random.default_rng(6)
        X = rng.uniform(-2, 2, size=(8, 1))
        y = np.sin(X[:, 0])
        hp = make_hp(1.0, 1.0, 1e-12)
        model = full.build(Dataset(X, y), hp)
        pred = full.predict(model, X)
        np.testing.assert_allclose(pred.mean, y, atol=1e-6)
        np.testing.assert_allclose(pred.variance, 0.0, atol=1e-8)

    def test_prior_reversion_far_away(self):
        rng = np.random.default_rng(7)
        X = rng.uniform(-1, 1, size=(20, 1))
        y = rng.normal(size=20)
        hp = make_hp(0.5, 1.3, 0.1)
        model = full.build(Dataset(X, y), hp)
        pred = full.predict(model, np.array([[30.0]]))  # 10+ lengthscales away
        assert abs(pred.mean[0]) < 1e-6
        assert abs(pred.variance[0] - 1.3) < 1e-6

    def test_single_training_point_closed_form(self):
        x0, y0 = 0.3, 1.7
        hp = make_hp(1.0, 2.0, 0.5)
        model = full.build(Dataset(np.array([[x0]]), np.array([y0])), hp)
        xs = np.array([[1.1]])
        pred = full.predict(model, xs)
        k = 2.0 * np.exp(-0.5 * (1.1 - x0) ** 2)
        assert pred.mean[0] == pytest.approx(k * y0 / 2.5, rel=1e-12)
        assert pred.variance[0] == pytest.approx(2.0 - k**2 / 2.5, rel=1e-12)

    def test_observed_flavor_adds_noise_variance(self):
        rng = np.random.default_rng(8)
        data = Dataset(rng.normal(size=(15, 2)), rng.normal(size=15))
        hp = make_hp([1.0, 1.0], 1.0, 0.2)
        model = full.build(data, hp)
        Xs = rng.normal(size=(6, 2))
        lat = full.predict(model, Xs, "latent")
        obs = full.predict(model, Xs, "observed")
        np.testing.assert_allclose(obs.variance - lat.variance, 0.2, rtol=1e-12)
        np.testing.assert_allclose(obs.mean, lat.mean)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(9)
        X = rng.normal(size=(20, 2))
        y = rng.normal(size=20)
        hp = make_hp([0.7, 1.2], 1.0, 0.1)
        perm = rng.permutation(20)
        Xs = rng.normal(size=(5, 2))
        p1 = full.predict(full.build(Dataset(X, y), hp), Xs)
        p2 = full.predict(full.build(Dataset(X[perm], y[perm]), hp), Xs)
        np.testing.assert_allclose(p1.mean, p2.mean, atol=1e-10)
        np.testing.assert_allclose(p1.variance, p2.variance, atol=1e-10)

    def test_latent_variance_bounded_by_prior(self):
        rng = np.random.default_rng(10)
        X = rng.normal(size=(30, 1))
        y = rng.normal(size=30)
        hp = make_hp(0.8, 1.6, 0.05)
        model = full.build(Dataset(X, y), hp)
        pred = full.predict(model, rng.normal(scale=3, size=(200, 1)))
        assert np.all(pred.variance <= 1.6 + 1e-10)
        assert np.all(pred.variance >= 0.0)

    def test_dimension_mismatch(self):
        model = full.build(Dataset(np.zeros((3, 2)), np.arange(3.0)),
                           Hyperparameters.default(2))
        with pytest.raises(DimensionError):
            full.predict(model, np.zeros((4, 3)))
