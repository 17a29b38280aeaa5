"""Hyperparameter fitting, latent sampling, point/areal prediction and implied covariances."""

from __future__ import annotations

import hashlib
import json
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize
from scipy.special import expit

from .geometry import MultiresBasis, basis_matrix
from .model import Dataset, LatentModel, PriorSpec
from .precision import HyperParams, NormalizationSpline
from .sparse_la import sample_gmrf

SCHEMA = "elk.fit/1"
SCALES = ("eta", "response", "probability")


class FitError(RuntimeError):
    pass


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator; ``seed`` may be an int or a SeedSequence."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class FitSettings:
    max_evals: int = 2000
    xatol: float = 1e-5
    initial_step: float = 0.5
    restarts: int = 3
    restart_jitter: float = 0.2
    restart_step: float = 0.2
    hessian_step: float = 1e-3
    n_hyper_samples: int = 20
    init_attempts: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.max_evals < 1 or self.n_hyper_samples < 1 or self.restarts < 0:
            raise ValueError("invalid fit settings")
        if not (self.xatol > 0 and self.hessian_step > 0 and self.initial_step > 0):
            raise ValueError("tolerances and steps must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class FitResult:
    """Posterior mode and Gaussian approximation on the transformed hyperparameter scale."""

    mode_theta: np.ndarray
    hessian: np.ndarray
    theta_samples: np.ndarray
    log_post_mode: float
    log_post_init: float
    n_evals: int
    converged: bool
    ridge_degenerate: bool
    scheme: str
    L: int
    settings: FitSettings = field(default_factory=FitSettings)
    timing: dict = field(default_factory=dict)

    def hyper_at(self, theta) -> HyperParams:
        from .model import untransform

        return untransform(theta, self.L, self.scheme)

    @property
    def mode(self) -> HyperParams:
        return self.hyper_at(self.mode_theta)

    @property
    def hyper_samples(self) -> list[HyperParams]:
        return [self.hyper_at(t) for t in self.theta_samples]

    def posterior_sd(self) -> np.ndarray:
        return np.sqrt(np.diag(np.linalg.inv(self.hessian)))

    def to_dict(self) -> dict:
        return {
            "mode_theta": self.mode_theta.tolist(),
            "hessian": self.hessian.tolist(),
            "theta_samples": self.theta_samples.tolist(),
            "log_post_mode": self.log_post_mode,
            "log_post_init": self.log_post_init,
            "n_evals": self.n_evals,
            "converged": self.converged,
            "ridge_degenerate": self.ridge_degenerate,
            "scheme": self.scheme,
            "L": self.L,
            "settings": self.settings.to_dict(),
            "timing": self.timing,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        return cls(
            np.array(d["mode_theta"], dtype=float),
            np.array(d["hessian"], dtype=float),
            np.array(d["theta_samples"], dtype=float).reshape(-1, len(d["mode_theta"])),
            d["log_post_mode"],
            d["log_post_init"],
            d["n_evals"],
            d["converged"],
            d["ridge_degenerate"],
            d["scheme"],
            d["L"],
            FitSettings(**d["settings"]),
            d.get("timing", {}),
        )


def _simplex(x0: np.ndarray, step: float) -> np.ndarray:
    return np.vstack([x0, x0 + step * np.eye(len(x0))])


def _nelder_mead(neg, x0, step, settings, budget):
    res = minimize(
        neg,
        x0,
        method="Nelder-Mead",
        options={
            "initial_simplex": _simplex(x0, step),
            "xatol": settings.xatol,
            "fatol": math.inf,
            "maxfev": max(budget, len(x0) + 2),
            "adaptive": False,
        },
    )
    return res


def finite_hessian(f, x, h: float) -> np.ndarray:
    """Central-difference Hessian of ``f`` at ``x``."""
    x = np.asarray(x, dtype=float)
    k = len(x)
    H = np.empty((k, k))
    f0 = f(x)
    E = np.eye(k) * h
    for i in range(k):
        H[i, i] = (f(x + E[i]) - 2.0 * f0 + f(x - E[i])) / (h * h)
        for j in range(i):
            v = (f(x + E[i] + E[j]) - f(x + E[i] - E[j]) - f(x - E[i] + E[j]) + f(x - E[i] - E[j])) / (4.0 * h * h)
            H[i, j] = H[j, i] = v
    return H


def _regularize(H: np.ndarray) -> tuple[np.ndarray, bool]:
    H = 0.5 * (H + H.T)
    if np.all(np.isfinite(H)):
        try:
            np.linalg.cholesky(H)
            return H, False
        except np.linalg.LinAlgError:
            pass
    else:
        H = np.where(np.isfinite(H), H, 0.0)
    w, V = np.linalg.eigh(H)
    floor = max(1e-6, 1e-6 * float(np.max(np.abs(w))))
    return (V * np.maximum(w, floor)) @ V.T, True


def fit(model, init: HyperParams | None = None, settings: FitSettings | None = None) -> FitResult:
    """Maximize the transformed-scale log posterior of ``model``.

    ``model`` needs ``log_posterior(theta)``, ``hyper_to_theta``,
    ``theta_to_hyper``, ``default_init()`` and ``scheme``/``L`` attributes.
    """
    settings = settings or FitSettings()
    rng = make_rng(settings.seed)
    t0 = time.perf_counter()
    init = init or model.default_init()
    theta0 = np.asarray(model.hyper_to_theta(init), dtype=float)
    n_evals = 0

    def neg(theta):
        nonlocal n_evals
        n_evals += 1
        v = model.log_posterior(theta)
        return -v if math.isfinite(v) else math.inf

    f_init = -neg(theta0)
    start = theta0
    if not math.isfinite(f_init):
        for _ in range(settings.init_attempts):
            cand = theta0 + rng.normal(0.0, 1.0, size=theta0.shape)
            if math.isfinite(neg(cand)):
                start = cand
                break
        else:
            raise FitError(f"no finite log posterior found in {settings.init_attempts} attempts")

    res = _nelder_mead(neg, start, settings.initial_step, settings, settings.max_evals)
    best_x, best_f = res.x, res.fun
    converged = bool(res.status == 0)
    for _ in range(settings.restarts):
        x0 = best_x + rng.normal(0.0, settings.restart_jitter, size=best_x.shape)
        if not math.isfinite(neg(x0)):
            continue
        r = _nelder_mead(neg, x0, settings.restart_step, settings, settings.max_evals)
        if r.fun < best_f:
            best_x, best_f, converged = r.x, r.fun, bool(r.status == 0)
    t_opt = time.perf_counter() - t0

    H = finite_hessian(neg, best_x, settings.hessian_step)
    H, degenerate = _regularize(H)
    if degenerate:
        warnings.warn("hyperparameter Hessian not positive definite; fit flagged ridge-degenerate", RuntimeWarning)
    if settings.n_hyper_samples == 1:
        samples = best_x[None, :].copy()
    else:
        cov = np.linalg.inv(H)
        samples = rng.multivariate_normal(best_x, 0.5 * (cov + cov.T), size=settings.n_hyper_samples, method="cholesky")
    return FitResult(
        mode_theta=np.asarray(best_x, dtype=float),
        hessian=H,
        theta_samples=samples,
        log_post_mode=float(-best_f),
        log_post_init=float(f_init),
        n_evals=n_evals,
        converged=converged,
        ridge_degenerate=degenerate,
        scheme=model.scheme,
        L=model.L,
        settings=settings,
        timing={"optimize_s": t_opt, "total_s": time.perf_counter() - t0},
    )


@dataclass
class PredictionSet:
    """Predictive draws (targets x samples) with summaries."""

    samples: np.ndarray
    targets: np.ndarray | None = None
    scale: str = "eta"

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))

    @property
    def n_targets(self) -> int:
        return self.samples.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=1)

    @property
    def sd(self) -> np.ndarray:
        return self.samples.std(axis=1, ddof=1) if self.samples.shape[1] > 1 else np.zeros(self.n_targets)

    def quantiles(self, probs=(0.1, 0.5, 0.9)) -> np.ndarray:
        return np.quantile(self.samples, probs, axis=1).T

    def summary(self) -> dict[str, np.ndarray]:
        q = self.quantiles()
        return {"mean": self.mean, "sd": self.sd, "q10": q[:, 0], "q50": q[:, 1], "q90": q[:, 2]}


def _allocation(n_samples: int, n_hyper: int) -> np.ndarray:
    base = np.full(n_hyper, n_samples // n_hyper)
    base[: n_samples % n_hyper] += 1
    return base


def _target_design(model: LatentModel, n: int, covariates) -> np.ndarray:
    if covariates is None:
        Z = np.zeros((n, model.p))
        Z[:, 0] = 1.0
        return Z
    cov = np.asarray(covariates, dtype=float).reshape(n, -1)
    if cov.shape[1] == model.p - 1:
        return np.hstack([np.ones((n, 1)), cov])
    if cov.shape[1] != model.p:
        raise ValueError(f"expected {model.p - 1} covariate columns")
    return cov


def predict_points(
    fit_result: FitResult,
    model: LatentModel,
    locations,
    n_samples: int = 1000,
    include_nugget: bool = False,
    scale: str = "eta",
    seed=0,
    covariates=None,
) -> PredictionSet:
    """Posterior predictive draws at point locations, pooled over hyperparameter samples.

    Cluster effects are set to zero. ``include_nugget`` adds observation-level
    noise (nugget or cluster effect) on the linear predictor scale; the
    ``response`` scale always includes it.
    """
    if scale not in SCALES:
        raise ValueError(f"scale must be one of {SCALES}")
    locs = np.atleast_2d(np.asarray(locations, dtype=float))
    if not np.all(model.basis.covers(locs)):
        raise ValueError("prediction locations must lie within the buffered lattice")
    A = basis_matrix(model.basis, locs)
    Z = _target_design(model, len(locs), covariates)
    rng = make_rng(seed)
    hypers = fit_result.hyper_samples
    counts = _allocation(n_samples, len(hypers))
    noisy = include_nugget or scale == "response"
    blocks = []
    for hyper, cnt in zip(hypers, counts):
        if cnt == 0:
            continue
        post = model.posterior(hyper)
        x = sample_gmrf(post.factor, post.mode, rng, size=int(cnt))
        eta = A @ x[: model.m] + Z @ x[model.m : model.m + model.p]
        if noisy:
            eta = eta + rng.normal(0.0, math.sqrt(hyper.sigma2_N), size=eta.shape)
        blocks.append(eta)
    S = np.hstack(blocks)
    if scale == "probability" or (scale == "response" and model.family == "binomial"):
        S = expit(S)
    return PredictionSet(S, locs, scale)


def aggregation_matrix(areas, n_areas: int | None = None, weights=None) -> sp.csr_matrix:
    """Rows of normalized weights mapping cells to areas; negative ids are unassigned."""
    ids = np.asarray(areas, dtype=np.int64).ravel()
    n_cells = ids.size
    w = np.ones(n_cells) if weights is None else np.asarray(weights, dtype=float).ravel()
    if w.shape != ids.shape:
        raise ValueError("one weight per cell required")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    n_areas = int(ids.max()) + 1 if n_areas is None else n_areas
    keep = ids >= 0
    G = sp.csr_matrix((w[keep], (ids[keep], np.nonzero(keep)[0])), shape=(n_areas, n_cells))
    counts = np.bincount(ids[keep], minlength=n_areas)
    if np.any(counts == 0):
        raise ValueError(f"area {int(np.argmin(counts))} has no cells")
    totals = np.asarray(G.sum(axis=1)).ravel()
    if np.any(totals <= 0):
        raise ValueError(f"weights sum to zero in area {int(np.argmin(totals))}")
    return sp.diags(1.0 / totals) @ G


def predict_areal(
    fit_result: FitResult,
    model: LatentModel,
    grid,
    areas,
    weights=None,
    n_samples: int = 1000,
    include_nugget: bool = False,
    scale: str = "eta",
    seed=0,
    n_areas: int | None = None,
    covariates=None,
) -> PredictionSet:
    """Weighted area means of joint grid draws (same draws as :func:`predict_points`)."""
    G = aggregation_matrix(areas, n_areas, weights)
    pts = predict_points(fit_result, model, grid, n_samples, include_nugget, scale, seed, covariates)
    return PredictionSet(G @ pts.samples, None, scale)


@dataclass
class CovarianceCurve:
    distances: np.ndarray
    cov: np.ndarray  # hyper samples x distances
    corr: np.ndarray

    def band(self, which: str = "corr", probs=(0.1, 0.5, 0.9)) -> np.ndarray:
        return np.quantile(getattr(self, which), probs, axis=0)

    @property
    def median_corr(self) -> np.ndarray:
        return np.median(self.corr, axis=0)


def implied_covariance(fit_result: FitResult, model, distances, n_hyper_samples: int | None = None) -> CovarianceCurve:
    """Model-implied covariance/correlation curves for each hyperparameter sample."""
    d = np.asarray(distances, dtype=float).ravel()
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    hypers = fit_result.hyper_samples
    if n_hyper_samples is not None:
        hypers = hypers[:n_hyper_samples]
    covs, cors = [], []
    for h in hypers:
        c, r = model.implied_cov(h, d)
        covs.append(c)
        cors.append(r)
    return CovarianceCurve(d, np.array(covs), np.array(cors))


def model_spec(model: LatentModel) -> dict:
    return {
        "basis": model.basis.to_dict(),
        "scheme": model.scheme,
        "priors": model.priors.to_dict(),
        "splines": None if model.splines is None else [s.to_dict() for s in model.splines],
        "data": model.data.to_dict(),
    }


def model_hash(spec: dict) -> str:
    blob = json.dumps(spec, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def model_from_spec(spec: dict) -> LatentModel:
    splines = spec.get("splines")
    return LatentModel(
        MultiresBasis.from_dict(spec["basis"]),
        Dataset.from_dict(spec["data"]),
        PriorSpec.from_dict(spec["priors"]),
        spec["scheme"],
        None if splines is None else [NormalizationSpline.from_dict(s) for s in splines],
    )


def fit_to_json(fit_result: FitResult, model: LatentModel, include_timing: bool = True) -> str:
    spec = model_spec(model)
    fr = fit_result.to_dict()
    if not include_timing:
        fr["timing"] = {}
    doc = {"schema": SCHEMA, "model_hash": model_hash(spec), "model": spec, "fit": fr}
    return json.dumps(doc, indent=1, sort_keys=True)


def fit_from_json(text: str) -> tuple[FitResult, LatentModel]:
    doc = json.loads(text)
    if doc.get("schema") != SCHEMA:
        raise ValueError(f"unsupported fit document schema {doc.get('schema')!r}")
    if model_hash(doc["model"]) != doc["model_hash"]:
        raise ValueError("model hash mismatch: fit document was modified")
    return FitResult.from_dict(doc["fit"]), model_from_spec(doc["model"])
