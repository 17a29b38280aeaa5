import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from elk.geometry import Domain, MultiresBasis
from elk.inference import (
    FitError,
    FitSettings,
    PredictionSet,
    aggregation_matrix,
    finite_hessian,
    fit,
    fit_from_json,
    fit_to_json,
    implied_covariance,
    predict_areal,
    predict_points,
)
from elk.model import Dataset, LatentModel
from elk.precision import HyperParams, build_norm_splines
from elk.special import matern1_corr
from helpers import fixed_fit, simulate_from_model

SQUARE = Domain(-1.0, 1.0, -1.0, 1.0)
TRUTH = HyperParams(1.0, (1.0,), (0.6,), 0.04)
QUICK = FitSettings(max_evals=300, restarts=1, n_hyper_samples=8, seed=3)


@pytest.fixture(scope="module")
def sim():
    rng = np.random.default_rng(2024)
    basis = MultiresBasis.from_counts(SQUARE, [10], buffer_cells=3)
    locs = rng.uniform(-1, 1, (400, 2))
    _, y = simulate_from_model(basis, TRUTH, locs, rng)
    model = LatentModel(basis, Dataset.gaussian(locs, y), splines=build_norm_splines(basis))
    return model, fit(model, settings=QUICK)


@pytest.fixture(scope="module")
def small():
    rng = np.random.default_rng(11)
    basis = MultiresBasis.from_counts(SQUARE, [6], buffer_cells=2)
    locs = rng.uniform(-1, 1, (40, 2))
    y = np.cos(2 * locs[:, 0]) + 0.1 * rng.standard_normal(40)
    return LatentModel(basis, Dataset.gaussian(locs, y))


class TestFit:
    def test_recovers_variance(self, sim):
        model, res = sim
        sd = res.posterior_sd()
        assert abs(res.mode_theta[0] - math.log(TRUTH.sigma2_S)) < 3 * sd[0]
        assert abs(res.mode_theta[-1] - math.log(TRUTH.sigma2_N)) < 3 * sd[-1]

    def test_ascent_and_shape(self, sim):
        model, res = sim
        assert res.log_post_mode >= res.log_post_init
        assert res.theta_samples.shape == (8, 3)
        H = res.hessian
        np.testing.assert_allclose(H, H.T)
        assert np.all(np.linalg.eigvalsh(H) > 0)

    def test_deterministic(self, small):
        s = FitSettings(max_evals=80, restarts=1, n_hyper_samples=4, seed=5)
        a, b = fit(small, settings=s), fit(small, settings=s)
        np.testing.assert_array_equal(a.mode_theta, b.mode_theta)
        np.testing.assert_array_equal(a.theta_samples, b.theta_samples)

    def test_single_sample_is_mode(self, small):
        res = fit(small, settings=FitSettings(max_evals=60, restarts=0, n_hyper_samples=1))
        np.testing.assert_array_equal(res.theta_samples[0], res.mode_theta)

    def test_unreachable_objective(self):
        class Hopeless:
            scheme, L = "ELK-T", 1

            def default_init(self):
                return TRUTH

            def hyper_to_theta(self, h):
                return np.zeros(3)

            def log_posterior(self, theta):
                return -math.inf

        with pytest.raises(FitError):
            fit(Hopeless(), settings=FitSettings(init_attempts=5))

    def test_finite_hessian_quadratic(self):
        A = np.array([[3.0, 1.0], [1.0, 2.0]])
        H = finite_hessian(lambda x: 0.5 * x @ A @ x, np.array([0.3, -0.1]), 1e-3)
        np.testing.assert_allclose(H, A, atol=1e-6)

    def test_json_round_trip(self, small):
        res = fixed_fit(small, HyperParams(0.5, (1.0,), (0.7,), 0.02), n=3)
        back, model = fit_from_json(fit_to_json(res, small))
        np.testing.assert_array_equal(back.theta_samples, res.theta_samples)
        pts = [[0.1, 0.2], [-0.5, 0.4]]
        a = predict_points(res, small, pts, n_samples=30, seed=1).samples
        b = predict_points(back, model, pts, n_samples=30, seed=1).samples
        np.testing.assert_array_equal(a, b)

    def test_json_tamper(self, small):
        text = fit_to_json(fixed_fit(small, HyperParams(0.5, (1.0,), (0.7,), 0.02)), small)
        doc = json.loads(text)
        doc["model"]["data"]["y"][0] += 1.0
        with pytest.raises(ValueError, match="hash"):
            fit_from_json(json.dumps(doc))
        doc = json.loads(text)
        doc["schema"] = "other/9"
        with pytest.raises(ValueError, match="schema"):
            fit_from_json(json.dumps(doc))


class TestPredict:
    def test_fixed_effect_limit(self, small):
        res = fixed_fit(small, HyperParams(1e-8, (1.0,), (0.7,), 0.05))
        pred = predict_points(res, small, [[0.0, 0.0], [0.5, -0.5]], n_samples=200, seed=2)
        assert np.allclose(pred.mean, small.data.y.mean(), atol=0.05)
        assert np.all(pred.sd < 0.05)

    def test_interpolates_with_tiny_nugget(self, small):
        res = fixed_fit(small, HyperParams(1.0, (1.0,), (0.8,), 1e-6))
        pred = predict_points(res, small, small.data.locations[:5], n_samples=200, seed=2)
        np.testing.assert_allclose(pred.mean, small.data.y[:5], atol=1e-2)

    def test_probability_scale(self, rng):
        basis = MultiresBasis.from_counts(SQUARE, [5], buffer_cells=2)
        locs = rng.uniform(-1, 1, (30, 2))
        n = rng.integers(1, 10, 30)
        model = LatentModel(basis, Dataset.binomial(locs, rng.binomial(n, 0.3), n))
        res = fixed_fit(model, HyperParams(4.0, (1.0,), (0.5,), 1.0), n=2)
        pred = predict_points(res, model, rng.uniform(-1, 1, (20, 2)), n_samples=100, scale="probability")
        assert np.all((pred.samples >= 0) & (pred.samples <= 1))
        q = pred.quantiles()
        assert np.all(np.diff(q, axis=1) >= 0)

    def test_outside_support(self, small):
        res = fixed_fit(small, HyperParams(1.0, (1.0,), (0.8,), 0.1))
        with pytest.raises(ValueError):
            predict_points(res, small, [[5.0, 5.0]])
        with pytest.raises(ValueError):
            predict_points(res, small, [[0.0, 0.0]], scale="logit")

    def test_plug_in_mean(self, small):
        h = HyperParams(0.7, (1.0,), (0.8,), 0.05)
        res = fixed_fit(small, h)
        pts = np.array([[0.2, 0.1], [-0.3, 0.6]])
        pred = predict_points(res, small, pts, n_samples=4000, seed=8)
        post = small.posterior(h)
        from elk.geometry import basis_matrix

        exact = basis_matrix(small.basis, pts) @ post.mode[: small.m] + post.mode[small.m]
        assert np.all(np.abs(pred.mean - exact) < 4 * pred.sd / math.sqrt(4000))

    def test_more_data_not_less_certain(self):
        rng = np.random.default_rng(5)
        basis = MultiresBasis.from_counts(SQUARE, [8], buffer_cells=2)
        h = HyperParams(1.0, (1.0,), (0.5,), 0.05)
        locs = rng.uniform(-1, 1, (200, 2))
        _, y = simulate_from_model(basis, h, locs, rng)
        held = rng.uniform(-0.9, 0.9, (30, 2))
        sds = []
        for n in (100, 200):
            model = LatentModel(basis, Dataset.gaussian(locs[:n], y[:n]))
            sds.append(predict_points(fixed_fit(model, h), model, held, n_samples=2000, seed=1).sd.mean())
        assert sds[1] <= sds[0] * (1 + 3 / math.sqrt(2000))


class TestAreal:
    @pytest.fixture
    def setup(self, small):
        g = np.linspace(-0.9, 0.9, 6)
        grid = np.array([(x, y) for y in g for x in g])
        return fixed_fit(small, HyperParams(0.6, (1.0,), (0.8,), 0.05), n=2), grid

    def test_single_cell(self, small, setup):
        res, grid = setup
        areas = np.full(len(grid), 1)
        areas[7] = 0
        pa = predict_areal(res, small, grid, areas, n_samples=50, seed=4)
        pp = predict_points(res, small, grid, n_samples=50, seed=4)
        np.testing.assert_array_equal(pa.samples[0], pp.samples[7])

    def test_whole_domain_mean(self, small, setup):
        res, grid = setup
        pa = predict_areal(res, small, grid, np.zeros(len(grid), dtype=int), n_samples=50, seed=4)
        pp = predict_points(res, small, grid, n_samples=50, seed=4)
        np.testing.assert_allclose(pa.samples[0], pp.samples.mean(axis=0), atol=1e-12)
        assert pa.samples.var(axis=1)[0] <= pp.samples.var(axis=1).max()

    def test_constant_field(self):
        G = aggregation_matrix([0, 0, 1, 1, 1], weights=[1, 3, 1, 1, 2])
        np.testing.assert_allclose(G @ np.full((5, 4), 2.5), 2.5)

    def test_weights_validated(self):
        with pytest.raises(ValueError):
            aggregation_matrix([0, 0, 1], weights=[1, 1, 0])
        with pytest.raises(ValueError):
            aggregation_matrix([0, 2])

    @given(st.lists(st.integers(0, 4), min_size=5, max_size=40), st.integers(0, 2**32 - 1))
    def test_rows_are_weighted_means(self, ids, seed):
        ids = np.array(ids)
        if len(np.unique(ids)) != ids.max() + 1:
            return
        r = np.random.default_rng(seed)
        w = r.uniform(0.1, 2, len(ids))
        G = aggregation_matrix(ids, weights=w).toarray()
        np.testing.assert_allclose(G.sum(axis=1), 1.0)
        v = r.standard_normal(len(ids))
        for a in range(ids.max() + 1):
            sel = ids == a
            assert G[a] @ v == pytest.approx(np.average(v[sel], weights=w[sel]))


class TestImpliedCovariance:
    def test_origin(self, small):
        res = fixed_fit(small, HyperParams(1.7, (1.0,), (0.8,), 0.1), n=2)
        curve = implied_covariance(res, small, [0.0, 0.2, 0.4])
        np.testing.assert_allclose(curve.corr[:, 0], 1.0, atol=1e-14)
        assert curve.cov[0, 0] == pytest.approx(1.7, rel=1e-8)
        assert curve.band().shape == (3, 3)

    def test_spline_normalization(self):
        basis = MultiresBasis.from_counts(SQUARE, [6, 11], buffer_cells=3)
        model = LatentModel(basis, Dataset.gaussian([[0, 0]], [0.0]), splines=build_norm_splines(basis))
        res = fixed_fit(model, HyperParams(2.0, (0.4, 0.6), (0.7, 0.25), 0.1))
        assert implied_covariance(res, model, [0.0]).cov[0, 0] == pytest.approx(2.0, rel=1e-2)

    def test_tracks_matern(self):
        basis = MultiresBasis.from_counts(SQUARE, [41], buffer_cells=5)
        model = LatentModel(basis, Dataset.gaussian([[0, 0]], [0.0]))
        rho = 0.5
        d = np.linspace(basis.deltas[0], rho, 25)
        res = fixed_fit(model, HyperParams(1.0, (1.0,), (rho,), 0.1))
        corr = implied_covariance(res, model, d).median_corr
        assert np.max(np.abs(corr - matern1_corr(d, rho))) < 0.05


def test_prediction_set_summary():
    ps = PredictionSet(np.arange(12.0).reshape(2, 6))
    s = ps.summary()
    np.testing.assert_allclose(s["mean"], [2.5, 8.5])
    assert np.all(s["q10"] <= s["q50"]) and np.all(s["q50"] <= s["q90"])
