import csv
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from elk.geometry import Domain, MultiresBasis
from elk.inference import FitSettings, fit, make_rng, predict_points
from elk.model import Dataset, LatentModel
from elk.precision import HyperParams
from elk.special import CovModel, matern1_corr, mixture_cov
from elk.study import (
    CENTRAL_AREA,
    OUTPUT_FILES,
    MaternGP,
    ModelSpec,
    RegularGrid,
    StudyConfig,
    _joint_covariance,
    area_ids_3x3,
    design_3x3,
    integrated_abs_error,
    run_study,
    simulate_grf,
)
from helpers import fixed_fit

SQUARE = Domain(-1.0, 1.0, -1.0, 1.0)


def smoke_config(**kw):
    base = dict(
        n_obs=60,
        grid_n=10,
        replications=2,
        n_samples=60,
        corr_replicates=1,
        corr_hyper_samples=3,
        corr_distances=tuple(np.linspace(0, 1, 11)),
        spline_knots=8,
        models=(ModelSpec("ELK-T", "elk", (4, 7), buffer=2), ModelSpec("Matern", "matern")),
        fit=FitSettings(max_evals=60, restarts=0, n_hyper_samples=3),
    )
    base.update(kw)
    return StudyConfig(**base)


class TestGrf:
    def test_coincident_points(self, rng):
        v = simulate_grf([[0.2, 0.2], [0.2, 0.2], [0.5, 0.1]], CovModel(), rng)
        assert abs(v[0] - v[1]) < 1e-3

    def test_variance(self):
        rng = np.random.default_rng(1)
        pts = np.array([[0.0, 0.0], [0.3, 0.1], [0.9, -0.4]])
        draws = np.array([simulate_grf(pts, CovModel(), rng)[0] for _ in range(200)])
        se = math.sqrt(2 / 199)
        assert abs(draws.var(ddof=1) - 1.0) < 4 * se

    def test_correlation_at_range(self):
        rng = np.random.default_rng(2)
        pts = np.array([[0.0, 0.0], [0.8, 0.0]])
        draws = np.array([simulate_grf(pts, CovModel(), rng) for _ in range(500)])
        r = np.corrcoef(draws.T)[0, 1]
        target = mixture_cov(CovModel(), 0.8)
        assert abs(r - target) < 4 * (1 - target**2) / math.sqrt(500)

    def test_deterministic(self):
        pts = np.random.default_rng(0).uniform(-1, 1, (20, 2))
        a = simulate_grf(pts, CovModel(), make_rng(4))
        b = simulate_grf(pts, CovModel(), make_rng(4))
        np.testing.assert_array_equal(a, b)

    def test_joint_covariance_table(self, rng):
        grid = RegularGrid(SQUARE, 5)
        obs = rng.uniform(-1, 1, (4, 2))
        S = _joint_covariance(obs, grid, CovModel())
        pts = np.vstack([obs, grid.points()])
        d = np.hypot(*(pts[:, None, :] - pts[None, :, :]).transpose(2, 0, 1))
        np.testing.assert_allclose(S, mixture_cov(CovModel(), d), atol=1e-14)


class TestDesign:
    def test_central_cell_empty(self):
        cfg = StudyConfig(n_obs=800, grid_n=12)
        d = design_3x3(cfg, make_rng(0))
        ids = area_ids_3x3(cfg.domain, d.obs_locations)
        assert CENTRAL_AREA not in ids
        assert len(d.obs_locations) == 800
        counts = np.bincount(ids, minlength=9)[[a for a in range(9) if a != CENTRAL_AREA]]
        chi2 = np.sum((counts - 100) ** 2 / 100)
        assert chi2 < 24.3  # 0.999 quantile with 7 degrees of freedom
        np.testing.assert_allclose(d.areal_truth, [d.grid_values[d.grid_areas == a].mean() for a in range(9)])

    def test_same_seed_same_design(self):
        cfg = StudyConfig(n_obs=50, grid_n=6)
        a, b = design_3x3(cfg, make_rng(3)), design_3x3(cfg, make_rng(3))
        np.testing.assert_array_equal(a.obs_values, b.obs_values)
        np.testing.assert_array_equal(a.grid_values, b.grid_values)

    @given(st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1)), min_size=1, max_size=30))
    def test_area_ids(self, pts):
        ids = area_ids_3x3(SQUARE, np.array(pts))
        for (x, y), a in zip(pts, ids):
            cx, cy = a % 3, a // 3
            assert -1 + cx * 2 / 3 - 1e-12 <= x <= -1 + (cx + 1) * 2 / 3 + 1e-12
            assert -1 + cy * 2 / 3 - 1e-12 <= y <= -1 + (cy + 1) * 2 / 3 + 1e-12

    def test_config_round_trip(self):
        cfg = smoke_config()
        assert StudyConfig.from_dict(cfg.to_dict()) == cfg
        assert cfg.hash() == StudyConfig.from_dict(cfg.to_dict()).hash()
        full = StudyConfig().full_scale()
        assert full.replications == 100 and full.models[0].counts == (14, 126)


class TestMaternBaseline:
    def test_noiseless_single_observation(self):
        gp = MaternGP(Dataset.gaussian([[0.1, 0.1]], [1.7]), SQUARE)
        mean, var = gp.predict(HyperParams(1.0, (1.0,), (0.5,), 1e-10), [[0.1, 0.1]])
        assert mean[0] == pytest.approx(1.7)

    def test_far_field_variance(self, rng):
        locs = rng.uniform(-1, 1, (30, 2))
        gp = MaternGP(Dataset.gaussian(locs, rng.standard_normal(30)), SQUARE)
        h = HyperParams(0.8, (1.0,), (0.2,), 0.1)
        _, var = gp.predict(h, [[60.0, 60.0]], include_nugget=True)
        _, Ci1, s, _, _ = gp._system(h)
        assert var[0] == pytest.approx(0.8 + 0.1 + 1.0 / s, rel=1e-10)
        assert var[0] >= 0.9

    def test_dense_marginal_oracle(self, rng):
        from scipy.stats import multivariate_normal

        locs = rng.uniform(-1, 1, (15, 2))
        y = rng.standard_normal(15)
        gp = MaternGP(Dataset.gaussian(locs, y), SQUARE)
        h = HyperParams(0.8, (1.0,), (0.4,), 0.2)
        d = np.hypot(*(locs[:, None] - locs[None, :]).transpose(2, 0, 1))
        C = 0.8 * matern1_corr(d, 0.4) + 0.2 * np.eye(15)
        # restricted likelihood: large-variance intercept limit with the log tau term removed
        tau = 1e8
        full = multivariate_normal(np.zeros(15), C + tau * np.ones((15, 15))).logpdf(y)
        assert gp.log_marginal(h) == pytest.approx(full + 0.5 * math.log(2 * math.pi * tau), abs=1e-5)

    def test_area_covariance_matches_points(self, rng):
        locs = rng.uniform(-1, 1, (20, 2))
        gp = MaternGP(Dataset.gaussian(locs, rng.standard_normal(20)), SQUARE)
        h = HyperParams(0.8, (1.0,), (0.4,), 0.1)
        grid = RegularGrid(SQUARE, 6)
        from elk.inference import aggregation_matrix

        G = aggregation_matrix(area_ids_3x3(SQUARE, grid.points()), 9).toarray()
        mean, cov = gp.predict_areas(h, grid, G)
        # brute force: joint kriging covariance of all grid points, then aggregate
        pts = grid.points()
        kp = 0.8 * matern1_corr(np.hypot(*(pts[:, None] - locs[None]).transpose(2, 0, 1)), 0.4)
        Kpp = 0.8 * matern1_corr(np.hypot(*(pts[:, None] - pts[None]).transpose(2, 0, 1)), 0.4)
        C = 0.8 * matern1_corr(np.hypot(*(locs[:, None] - locs[None]).transpose(2, 0, 1)), 0.4) + 0.1 * np.eye(20)
        Ci = np.linalg.inv(C)
        one = np.ones(20)
        s = one @ Ci @ one
        r = 1 - kp @ Ci @ one
        Pcov = Kpp - kp @ Ci @ kp.T + np.outer(r, r) / s
        np.testing.assert_allclose(cov, G @ Pcov @ G.T, atol=1e-10)
        pm, _ = gp.predict(h, pts)
        np.testing.assert_allclose(mean, G @ pm, atol=1e-10)

    def test_range_calibration(self):
        rng = np.random.default_rng(21)
        locs = rng.uniform(-1, 1, (300, 2))
        y = simulate_grf(locs, CovModel(((1.0, 0.3),)), rng) + rng.normal(0, 0.1, 300)
        gp = MaternGP(Dataset.gaussian(locs, y), SQUARE)
        res = fit(gp, settings=FitSettings(max_evals=300, restarts=1, n_hyper_samples=2))
        assert abs(res.mode_theta[1] - math.log(0.3)) < 3 * res.posterior_sd()[1]


def test_interpolation_limit():
    rng = np.random.default_rng(6)
    locs = rng.uniform(-0.8, 0.8, (40, 2))
    u = simulate_grf(locs, CovModel(((1.0, 0.8),)), rng)
    basis = MultiresBasis.from_counts(SQUARE, [6, 21], buffer_cells=3)
    model = LatentModel(basis, Dataset.gaussian(locs, u))
    res = fixed_fit(model, HyperParams(1.0, (0.5, 0.5), (0.8, 0.3), 1e-6))
    pred = predict_points(res, model, locs, n_samples=100)
    assert np.sqrt(np.mean((pred.mean - u) ** 2)) < 0.05


def test_integrated_abs_error():
    d = np.linspace(0, 1, 51)
    assert integrated_abs_error(d, np.ones(51), np.zeros(51)) == pytest.approx(1.0)
    assert integrated_abs_error(d, d, d) == 0.0


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = run_study(smoke_config(), out, workers=1)
    return res, out


class TestRunStudy:
    def test_outputs(self, smoke_run):
        res, out = smoke_run
        for f in OUTPUT_FILES:
            assert (out / f).exists()
        assert not res.failures
        assert {r["block"] for r in res.summary} == {"pointwise", "areal", "areal_central", "areal_outer"}
        for r in res.summary:
            assert 0 <= r["coverage"] <= 100

    def test_reaggregation(self, smoke_run):
        res, out = smoke_run
        with open(out / "study_replicates.csv") as fh:
            reps = list(csv.DictReader(fh))
        with open(out / "study_summary.csv") as fh:
            summary = list(csv.DictReader(fh))
        for row in summary:
            sel = [r for r in reps if r["model"] == row["model"] and r["block"] == row["block"]]
            for f in ("rmse", "crps", "coverage", "width"):
                assert float(row[f]) == pytest.approx(np.mean([float(r[f]) for r in sel]), rel=1e-10)

    def test_bins_cover_grid(self, smoke_run):
        res, _ = smoke_run
        for model in ("ELK-T", "Matern"):
            assert sum(b["n"] for b in res.bins if b["model"] == model) == 2 * 100

    def test_one_model_one_replicate(self, tmp_path):
        cfg = smoke_config(replications=1, models=(ModelSpec("Matern", "matern"),))
        run_study(cfg, tmp_path)
        assert (tmp_path / "implied_corr.csv").read_text().count("Matern") == 11
