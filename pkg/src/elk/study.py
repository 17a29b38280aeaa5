"""Simulation study: mixture-covariance fields, 3x3 hold-out design, ELK fits vs a dense Matérn GP."""

from __future__ import annotations

import concurrent.futures as cf
import csv
import dataclasses
import hashlib
import json
import math
import multiprocessing as mp
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from scipy.integrate import trapezoid
from scipy.signal import fftconvolve
from scipy.spatial.distance import cdist, pdist, squareform

from . import __version__
from .geometry import Domain, MultiresBasis
from .inference import FitSettings, aggregation_matrix, fit, implied_covariance, make_rng, predict_points
from .model import Dataset, LatentModel, PriorSpec, log_prior_with_medians, transform, untransform
from .precision import HyperParams, build_norm_splines
from .scoring import bin_by_distance, binned_scores, score_samples
from .sparse_la import NotPositiveDefiniteError, dense_cholesky, jittered_dense_cholesky
from .special import CovModel, matern1_corr_fast, mixture_cov

CENTRAL_AREA = 4
BLOCKS = ("pointwise", "areal", "areal_central", "areal_outer")
SCORE_FIELDS = ("n", "rmse", "crps", "coverage", "width")
BLAS_ENV = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "BLIS_NUM_THREADS")


@dataclass(frozen=True)
class ModelSpec:
    """A roster entry: ``kind`` is ``elk`` (with knot counts per layer) or ``matern``."""

    name: str
    kind: str
    counts: tuple[int, ...] = ()
    scheme: str = "ELK-T"
    buffer: int = 5

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if self.kind not in ("elk", "matern"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "elk" and not self.counts:
            raise ValueError("ELK models need knot counts")


def _default_models(fine: int = 40) -> tuple[ModelSpec, ...]:
    return (ModelSpec("ELK-T", "elk", (14, fine)), ModelSpec("Matern", "matern"))


@dataclass(frozen=True)
class StudyConfig:
    domain: Domain = Domain(-1.0, 1.0, -1.0, 1.0)
    n_obs: int = 800
    nugget_sd: float = 0.1
    cov: CovModel = CovModel()
    grid_n: int = 70
    replications: int = 10
    seed: int = 0
    models: tuple[ModelSpec, ...] = field(default_factory=_default_models)
    bin_edges: tuple[float, ...] = tuple(np.linspace(0.0, 0.4, 9).round(12))
    alpha: float = 0.2
    n_samples: int = 1000
    fit: FitSettings = FitSettings()
    corr_distances: tuple[float, ...] = tuple(np.linspace(0.0, 1.0, 51).round(12))
    corr_replicates: int = 5
    corr_hyper_samples: int = 20
    spline_knots: int = 20

    def __post_init__(self):
        if self.n_obs < 8 or self.grid_n < 3 or self.replications < 1:
            raise ValueError("study needs n_obs >= 8, grid_n >= 3 and at least one replicate")
        if self.nugget_sd <= 0:
            raise ValueError("nugget sd must be positive")
        if not self.models:
            raise ValueError("model roster is empty")
        if len({m.name for m in self.models}) != len(self.models):
            raise ValueError("model names must be unique")

    def full_scale(self) -> "StudyConfig":
        return dataclasses.replace(self, n_obs=800, replications=100, models=_default_models(126))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["domain"] = self.domain.to_dict()
        d["cov"] = {"components": [list(c) for c in self.cov.components], "nugget": self.cov.nugget}
        d["models"] = [dataclasses.asdict(m) for m in self.models]
        d["fit"] = self.fit.to_dict()
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        d = dict(d)
        if "domain" in d:
            d["domain"] = Domain(**d["domain"])
        if "cov" in d:
            c = d["cov"]
            d["cov"] = CovModel(tuple(tuple(x) for x in c["components"]), c.get("nugget", 0.0))
        if "models" in d:
            d["models"] = tuple(ModelSpec(**m) for m in d["models"])
        if "fit" in d:
            d["fit"] = FitSettings(**d["fit"])
        for k in ("bin_edges", "corr_distances"):
            if k in d:
                d[k] = tuple(float(v) for v in d[k])
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class RegularGrid:
    """Cell-centre grid with ``n`` points per axis; points are ordered x fastest."""

    domain: Domain
    n: int

    @property
    def spacing(self) -> tuple[float, float]:
        ex, ey = self.domain.extent
        return ex / self.n, ey / self.n

    def axis_coords(self) -> tuple[np.ndarray, np.ndarray]:
        hx, hy = self.spacing
        xs = self.domain.x_min + hx * (np.arange(self.n) + 0.5)
        ys = self.domain.y_min + hy * (np.arange(self.n) + 0.5)
        return xs, ys

    def points(self) -> np.ndarray:
        xs, ys = self.axis_coords()
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])

    def offset_distances(self) -> np.ndarray:
        """Distances for index offsets (|di_y|, |di_x|), shape (n, n)."""
        hx, hy = self.spacing
        k = np.arange(self.n)
        return np.hypot(k[None, :] * hx, k[:, None] * hy)

    def signed_offset_distances(self) -> np.ndarray:
        hx, hy = self.spacing
        k = np.arange(-(self.n - 1), self.n)
        return np.hypot(k[None, :] * hx, k[:, None] * hy)


def area_ids_3x3(domain: Domain, points) -> np.ndarray:
    """Index 0..8 of the 3x3 subdivision cell holding each point (row-major from the lower left)."""
    pts = np.atleast_2d(points)
    ex, ey = domain.extent
    ix = np.clip(np.floor((pts[:, 0] - domain.x_min) / (ex / 3.0)), 0, 2).astype(int)
    iy = np.clip(np.floor((pts[:, 1] - domain.y_min) / (ey / 3.0)), 0, 2).astype(int)
    return iy * 3 + ix


def _grf_draw(Sigma: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    L = jittered_dense_cholesky(Sigma, rel_jitter=1e-8, attempts=3)
    return L @ rng.standard_normal(Sigma.shape[0])


def simulate_grf(locations, cov: CovModel, rng: np.random.Generator) -> np.ndarray:
    """One draw of a zero-mean field with covariance ``mixture_cov`` at ``locations``."""
    pts = np.atleast_2d(np.asarray(locations, dtype=float))
    Sigma = mixture_cov(cov, squareform(pdist(pts))) if len(pts) > 1 else np.array([[mixture_cov(cov, 0.0)]])
    return _grf_draw(np.atleast_2d(Sigma), rng)


def _joint_covariance(obs: np.ndarray, grid: RegularGrid, cov: CovModel) -> np.ndarray:
    """Covariance of [observations; grid], with the grid block from an offset table."""
    g = grid.points()
    n, m = len(obs), len(g)
    S = np.empty((n + m, n + m))
    S[:n, :n] = mixture_cov(cov, squareform(pdist(obs)))
    S[:n, n:] = mixture_cov(cov, cdist(obs, g))
    S[n:, :n] = S[:n, n:].T
    table = mixture_cov(cov, grid.offset_distances())
    idx = np.arange(m)
    ix, iy = idx % grid.n, idx // grid.n
    S[n:, n:] = table[np.abs(iy[:, None] - iy[None, :]), np.abs(ix[:, None] - ix[None, :])]
    return S


@dataclass
class Design:
    obs_locations: np.ndarray
    obs_values: np.ndarray
    grid_points: np.ndarray
    grid_values: np.ndarray
    grid_areas: np.ndarray
    areal_truth: np.ndarray


def design_3x3(config: StudyConfig, rng: np.random.Generator) -> Design:
    """Observations in the 8 outer cells; Y = u + noise at observations and grid points."""
    dom = config.domain
    ex, ey = dom.extent
    outer = np.array([a for a in range(9) if a != CENTRAL_AREA])
    cells = outer[rng.integers(0, 8, size=config.n_obs)]
    u = rng.uniform(size=(config.n_obs, 2))
    obs = np.column_stack(
        [dom.x_min + ex / 3.0 * (cells % 3 + u[:, 0]), dom.y_min + ey / 3.0 * (cells // 3 + u[:, 1])]
    )
    grid = RegularGrid(dom, config.grid_n)
    field_ = _grf_draw(_joint_covariance(obs, grid, config.cov), rng)
    noise = rng.normal(0.0, config.nugget_sd, size=field_.shape)
    y = field_ + noise
    gp = grid.points()
    areas = area_ids_3x3(dom, gp)
    grid_y = y[config.n_obs :]
    truth = np.bincount(areas, weights=grid_y, minlength=9) / np.bincount(areas, minlength=9)
    return Design(obs, y[: config.n_obs], gp, grid_y, areas, truth)


class MaternGP:
    """Dense GP with Matérn(nu=1) covariance, nugget and a flat intercept.

    Hyperparameters reuse the single-layer layout [log sigma2_S, log rho,
    log sigma2_N]; the intercept is integrated out (restricted likelihood).
    """

    scheme = "ELK-T"
    L = 1

    def __init__(self, data: Dataset, domain: Domain, priors: PriorSpec | None = None):
        if data.family != "gaussian":
            raise ValueError("the Matérn baseline handles Gaussian data only")
        self.data = data
        self.domain = domain
        self.priors = priors or PriorSpec()
        self.obs = data.locations
        self.y = data.y
        self.D = squareform(pdist(self.obs))
        rho0 = self.priors.range_median if self.priors.range_median is not None else domain.diameter / 5.0
        self.medians = np.array([rho0])

    def theta_to_hyper(self, theta) -> HyperParams:
        return untransform(theta, 1)

    def hyper_to_theta(self, hyper: HyperParams) -> np.ndarray:
        return transform(hyper)

    def default_init(self) -> HyperParams:
        v = float(np.var(self.y)) or 1.0
        return HyperParams(0.8 * v, (1.0,), (float(self.medians[0]),), 0.2 * v)

    def _system(self, hyper: HyperParams):
        C = hyper.sigma2_S * matern1_corr_fast(self.D, hyper.rho[0])
        C[np.diag_indices_from(C)] += hyper.sigma2_N
        L = dense_cholesky(C)
        ones = np.ones(len(self.y))
        Ci1 = sla.cho_solve((L, True), ones)
        Ciy = sla.cho_solve((L, True), self.y)
        s = float(ones @ Ci1)
        beta = float(ones @ Ciy) / s
        return L, Ci1, s, beta, Ciy - beta * Ci1

    def log_marginal(self, hyper: HyperParams) -> float:
        L, Ci1, s, beta, alpha = self._system(hyper)
        n = len(self.y)
        r = self.y - beta
        return float(-0.5 * (n - 1) * math.log(2 * math.pi) - np.sum(np.log(np.diag(L))) - 0.5 * math.log(s) - 0.5 * r @ alpha)

    def log_posterior(self, theta) -> float:
        try:
            hyper = self.theta_to_hyper(theta)
            lm = self.log_marginal(hyper)
        except (ValueError, NotPositiveDefiniteError, FloatingPointError, OverflowError):
            return -math.inf
        out = lm + log_prior_with_medians(hyper, self.priors, self.medians, transformed=True)
        return out if math.isfinite(out) else -math.inf

    def implied_cov(self, hyper: HyperParams, distances, center=None, direction=None):
        r = matern1_corr_fast(np.asarray(distances, dtype=float), hyper.rho[0])
        return hyper.sigma2_S * r, r

    def predict(self, hyper: HyperParams, locations, include_nugget: bool = False):
        """Universal-kriging mean and variance at points."""
        L, Ci1, s, beta, alpha = self._system(hyper)
        k = hyper.sigma2_S * matern1_corr_fast(cdist(np.atleast_2d(locations), self.obs), hyper.rho[0])
        V = sla.solve_triangular(L, k.T, lower=True)
        mean = beta + k @ alpha
        var = hyper.sigma2_S - np.sum(V * V, axis=0) + (1.0 - k @ Ci1) ** 2 / s
        if include_nugget:
            var = var + hyper.sigma2_N
        return mean, np.maximum(var, 0.0)

    def predict_areas(self, hyper: HyperParams, grid: RegularGrid, G, include_nugget: bool = False):
        """Joint mean and covariance of weighted grid averages (rows of ``G``)."""
        L, Ci1, s, beta, alpha = self._system(hyper)
        G = np.asarray(G.todense() if hasattr(G, "todense") else G)
        pts = grid.points()
        k = hyper.sigma2_S * matern1_corr_fast(cdist(pts, self.obs), hyper.rho[0])
        KA = G @ k
        kernel = matern1_corr_fast(grid.signed_offset_distances(), hyper.rho[0])
        imgs = G.reshape(len(G), grid.n, grid.n)
        conv = np.array([fftconvolve(im, kernel, mode="same") for im in imgs])
        KAA = hyper.sigma2_S * np.einsum("aij,bij->ab", imgs, conv)
        if include_nugget:
            KAA = KAA + hyper.sigma2_N * (G @ G.T)
        V = sla.solve_triangular(L, KA.T, lower=True)
        r = 1.0 - KA @ Ci1
        covA = KAA - V.T @ V + np.outer(r, r) / s
        return beta + KA @ alpha, 0.5 * (covA + covA.T)


def _split(n_samples: int, k: int) -> np.ndarray:
    out = np.full(k, n_samples // k)
    out[: n_samples % k] += 1
    return out


def gp_point_samples(gp: MaternGP, hypers, locations, n_samples, rng, include_nugget=True) -> np.ndarray:
    blocks = []
    for h, c in zip(hypers, _split(n_samples, len(hypers))):
        if c == 0:
            continue
        mu, var = gp.predict(h, locations, include_nugget)
        blocks.append(mu[:, None] + np.sqrt(var)[:, None] * rng.standard_normal((len(mu), int(c))))
    return np.hstack(blocks)


def gp_area_samples(gp: MaternGP, hypers, grid, G, n_samples, rng, include_nugget=True) -> np.ndarray:
    blocks = []
    for h, c in zip(hypers, _split(n_samples, len(hypers))):
        if c == 0:
            continue
        mu, covA = gp.predict_areas(h, grid, G, include_nugget)
        L = jittered_dense_cholesky(covA, rel_jitter=1e-10, attempts=4)
        blocks.append(mu[:, None] + L @ rng.standard_normal((len(mu), int(c))))
    return np.hstack(blocks)


def integrated_abs_error(distances, est, truth) -> float:
    return float(trapezoid(np.abs(np.asarray(est) - np.asarray(truth)), np.asarray(distances)))


_SPLINE_CACHE: dict = {}


def _splines_for(basis: MultiresBasis, n_knots: int):
    key = (json.dumps(basis.to_dict(), sort_keys=True), n_knots)
    if key not in _SPLINE_CACHE:
        _SPLINE_CACHE[key] = build_norm_splines(basis, n_knots)
    return _SPLINE_CACHE[key]


def _score_rows(model_name: str, grid_y, point_samples, design: Design, area_samples, alpha) -> list[dict]:
    rows = []
    rep = score_samples(grid_y, point_samples, alpha)
    rows.append({"model": model_name, "block": "pointwise", **rep.row()})
    rep = score_samples(design.areal_truth, area_samples, alpha)
    rows.append({"model": model_name, "block": "areal", **rep.row()})
    c = CENTRAL_AREA
    rep = score_samples(design.areal_truth[[c]], area_samples[[c]], alpha)
    rows.append({"model": model_name, "block": "areal_central", **rep.row()})
    outer = [a for a in range(9) if a != c]
    rep = score_samples(design.areal_truth[outer], area_samples[outer], alpha)
    rows.append({"model": model_name, "block": "areal_outer", **rep.row()})
    return rows


def run_replicate(config: StudyConfig, index: int) -> dict:
    """Simulate, fit every roster model, predict and score one replicate."""
    seq = np.random.SeedSequence(config.seed).spawn(config.replications)[index]
    design_seq, *model_seqs = seq.spawn(1 + len(config.models))
    design = design_3x3(config, make_rng(design_seq))
    data = Dataset.gaussian(design.obs_locations, design.obs_values)
    grid = RegularGrid(config.domain, config.grid_n)
    G = aggregation_matrix(design.grid_areas, 9)
    edges = np.asarray(config.bin_edges)
    bin_idx, _ = bin_by_distance(design.grid_points, design.obs_locations, edges)
    dists = np.asarray(config.corr_distances)
    score_corr = index < config.corr_replicates
    rows, bins, curves = [], [], []
    for spec, mseq in zip(config.models, model_seqs):
        fit_seed, pred_seq = mseq.spawn(2)
        settings = dataclasses.replace(config.fit, seed=int(fit_seed.generate_state(1)[0]))
        rng = make_rng(pred_seq)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            if spec.kind == "elk":
                basis = MultiresBasis.from_counts(config.domain, spec.counts, spec.buffer)
                model = LatentModel(basis, data, PriorSpec(), spec.scheme, _splines_for(basis, config.spline_knots))
                fr = fit(model, settings=settings)
                pts = predict_points(fr, model, design.grid_points, config.n_samples, scale="response", seed=pred_seq)
                point_samples = pts.samples
                area_samples = G @ point_samples
            else:
                model = MaternGP(data, config.domain)
                fr = fit(model, settings=settings)
                hypers = fr.hyper_samples
                point_samples = gp_point_samples(model, hypers, design.grid_points, config.n_samples, rng)
                area_samples = gp_area_samples(model, hypers, grid, G, config.n_samples, rng)
            if score_corr:
                curve = implied_covariance(fr, model, dists, config.corr_hyper_samples)
        rows.extend(_score_rows(spec.name, design.grid_values, point_samples, design, area_samples, config.alpha))
        for b in binned_scores(design.grid_values, point_samples, bin_idx, len(edges) - 1, config.alpha, edges):
            bins.append({"model": spec.name, **b})
        if score_corr:
            band = curve.band("corr")
            truth = config.cov.correlation(dists)
            curves.append(
                {
                    "model": spec.name,
                    "median": band[1],
                    "q10": band[0],
                    "q90": band[2],
                    "iae": integrated_abs_error(dists, band[1], truth),
                }
            )
    return {"index": index, "rows": rows, "bins": bins, "curves": curves}


def _safe_replicate(args) -> dict:
    config, index = args
    try:
        return run_replicate(config, index)
    except Exception as exc:  # recorded and excluded by the caller
        return {"index": index, "error": f"{type(exc).__name__}: {exc}"}


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else format(float(v), ".12g")
    return str(v)


def _write_csv(path: Path, header: list[str], rows: list[dict]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) for h in header])


@dataclass
class StudyResult:
    summary: list[dict]
    replicates: list[dict]
    bins: list[dict]
    corr: list[dict]
    corr_errors: list[dict]
    failures: list[dict]

    def lookup(self, model: str, block: str) -> dict:
        for r in self.summary:
            if r["model"] == model and r["block"] == block:
                return r
        raise KeyError((model, block))


def _mean(vals) -> float:
    vals = [v for v in vals if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def aggregate(config: StudyConfig, results: list[dict]) -> StudyResult:
    ok = [r for r in results if "error" not in r]
    failures = [{"replicate": r["index"], "error": r["error"]} for r in results if "error" in r]
    reps = [{"replicate": r["index"], **row} for r in ok for row in r["rows"]]
    summary = []
    for spec in config.models:
        for block in BLOCKS:
            sel = [r for r in reps if r["model"] == spec.name and r["block"] == block]
            row = {"model": spec.name, "block": block, "n_replicates": len(sel)}
            for f in SCORE_FIELDS[1:]:
                row[f] = _mean([r[f] for r in sel])
            row["n"] = int(sum(r["n"] for r in sel))
            summary.append(row)
    bins = []
    all_bins = [b for r in ok for b in r["bins"]]
    for spec in config.models:
        for b in sorted({x["bin"] for x in all_bins if x["model"] == spec.name}):
            sel = [x for x in all_bins if x["model"] == spec.name and x["bin"] == b]
            row = {"model": spec.name, "bin": b, "lower": sel[0]["lower"], "upper": sel[0]["upper"]}
            row["n"] = int(sum(x["n"] for x in sel))
            for f in SCORE_FIELDS[1:]:
                row[f] = _mean([x[f] for x in sel])
            bins.append(row)
    dists = np.asarray(config.corr_distances)
    truth = config.cov.correlation(dists)
    corr, corr_errors = [], []
    for spec in config.models:
        cs = [(r["index"], c) for r in ok for c in r["curves"] if c["model"] == spec.name]
        for idx, c in cs:
            corr_errors.append({"replicate": idx, "model": spec.name, "iae": c["iae"]})
        if not cs:
            continue
        med = np.mean([c["median"] for _, c in cs], axis=0)
        q10 = np.mean([c["q10"] for _, c in cs], axis=0)
        q90 = np.mean([c["q90"] for _, c in cs], axis=0)
        for k, d in enumerate(dists):
            corr.append({"model": spec.name, "distance": float(d), "true_corr": float(truth[k]), "median": med[k], "q10": q10[k], "q90": q90[k]})
    return StudyResult(summary, reps, bins, corr, corr_errors, failures)


def _run_pool(config: StudyConfig, workers: int) -> list[dict]:
    """Replicates in spawned single-threaded-BLAS workers, merged by index."""
    saved = {k: os.environ.get(k) for k in BLAS_ENV}
    for k in BLAS_ENV:
        os.environ[k] = "1"
    try:
        ctx = mp.get_context("spawn")
        with cf.ProcessPoolExecutor(max_workers=max(1, workers), mp_context=ctx) as pool:
            results = list(pool.map(_safe_replicate, [(config, i) for i in range(config.replications)]))
    finally:
        for k, v in saved.items():
            if v is None:
                os.environ.pop(k, None)
            else:
                os.environ[k] = v
    return sorted(results, key=lambda r: r["index"])


OUTPUT_FILES = ("study_summary.csv", "study_bins.csv", "implied_corr.csv", "study_replicates.csv", "study_corr_error.csv", "study_manifest.json")


def write_outputs(config: StudyConfig, result: StudyResult, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    score_cols = list(SCORE_FIELDS[1:])
    _write_csv(out / "study_summary.csv", ["model", "block", "n_replicates", "n"] + score_cols, result.summary)
    _write_csv(out / "study_replicates.csv", ["replicate", "model", "block", "n"] + score_cols, result.replicates)
    _write_csv(out / "study_bins.csv", ["model", "bin", "lower", "upper", "n"] + score_cols, result.bins)
    _write_csv(out / "implied_corr.csv", ["model", "distance", "true_corr", "median", "q10", "q90"], result.corr)
    _write_csv(out / "study_corr_error.csv", ["replicate", "model", "iae"], result.corr_errors)
    seeds = np.random.SeedSequence(config.seed).spawn(config.replications)
    manifest = {
        "version": __version__,
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "replicate_seeds": [{"replicate": i, "entropy": str(s.entropy), "spawn_key": list(s.spawn_key)} for i, s in enumerate(seeds)],
        "failures": result.failures,
        "files": list(OUTPUT_FILES[:-1]),
    }
    (out / "study_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return [out / f for f in OUTPUT_FILES]


def run_study(config: StudyConfig, out_dir=None, workers: int = 1) -> StudyResult:
    """Run all replicates, drop failures (at most 10%), aggregate and optionally write files."""
    results = _run_pool(config, workers)
    result = aggregate(config, results)
    for f in result.failures:
        warnings.warn(f"replicate {f['replicate']} failed and was excluded: {f['error']}", RuntimeWarning)
    if len(result.failures) > 0.1 * config.replications:
        raise RuntimeError(f"{len(result.failures)} of {config.replications} replicates failed: {result.failures[0]['error']}")
    if out_dir is not None:
        write_outputs(config, result, out_dir)
    return result
