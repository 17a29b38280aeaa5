"""Command-line entry point: simulate, fit, predict, score, covfn, study."""

from __future__ import annotations

import argparse
import dataclasses
import math
import sys
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist, squareform
from scipy.special import expit

from . import __version__
from .geometry import Domain, MultiresBasis, basis_matrix
from .inference import (
    FitError,
    fit,
    fit_from_json,
    fit_to_json,
    implied_covariance,
    make_rng,
    predict_areal,
    predict_points,
)
from .io import (
    DataError,
    load_config,
    numeric_column,
    read_dataset,
    read_table,
    write_dataset,
    write_manifest,
    write_table,
)
from .model import Dataset, LaplaceConvergenceError, LatentModel
from .precision import build_norm_splines, joint_precision
from .scoring import ScoreReport, bin_by_distance, crps_gaussian, rmse, score_samples
from .sparse_la import NotPositiveDefiniteError, cholesky, sample_gmrf
from .study import OUTPUT_FILES, _grf_draw, run_study
from .special import CovModel, mixture_cov


class CliError(Exception):
    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(message)


class Outputs:
    """Tracks files written by a command so a failure can remove them."""

    def __init__(self):
        self.paths: list[Path] = []

    def add(self, path) -> Path:
        p = Path(path)
        self.paths.append(p)
        return p

    def cleanup(self):
        for p in self.paths:
            if p.is_file():
                p.unlink()


def _domain_for(data: Dataset, cfg) -> Domain:
    if cfg.model.domain is not None:
        return Domain(*cfg.model.domain)
    lo = data.locations.min(axis=0)
    hi = data.locations.max(axis=0)
    pad = 1e-9 * max(1.0, float(np.max(hi - lo)))
    return Domain(lo[0] - pad, hi[0] + pad, lo[1] - pad, hi[1] + pad)


def build_model(data: Dataset, cfg) -> LatentModel:
    m = cfg.model
    dom = _domain_for(data, cfg)
    if m.deltas is not None:
        basis = MultiresBasis.from_deltas(dom, m.deltas, m.buffer)
    else:
        basis = MultiresBasis.from_counts(dom, m.counts, m.buffer)
    splines = None if m.exact_normalization else build_norm_splines(basis, m.spline_knots)
    return LatentModel(basis, data, cfg.priors, m.scheme, splines)


def cmd_simulate(args, cfg, out: Outputs):
    s = cfg.simulate
    rng = make_rng(cfg.seed)
    dom = Domain(*s.domain)
    locs = np.column_stack([rng.uniform(dom.x_min, dom.x_max, s.n), rng.uniform(dom.y_min, dom.y_max, s.n)])
    if args.fit:
        fr, fitted = fit_from_json(Path(args.fit).read_text(encoding="utf-8"))
        if not np.all(fitted.basis.covers(locs)):
            raise CliError("E_INPUT", "simulation domain exceeds the fitted lattice")
        hyper = fr.mode
        f = cholesky(joint_precision(fitted.basis, hyper, fitted.splines))
        c = sample_gmrf(f, np.zeros(fitted.m), rng)
        u = basis_matrix(fitted.basis, locs) @ c
        noise_sd = math.sqrt(hyper.sigma2_N)
    else:
        u = _grf_draw(mixture_cov(CovModel(s.components), _pairwise(locs)), rng)
        noise_sd = s.nugget_sd if s.family == "gaussian" else s.cluster_sd
    if s.family == "gaussian":
        data = Dataset.gaussian(locs, s.intercept + u + rng.normal(0.0, noise_sd, s.n))
    elif s.family == "binomial":
        urban = (rng.uniform(size=s.n) < s.urban_fraction).astype(float)
        eta = s.intercept + s.urban_effect * urban + u + rng.normal(0.0, noise_sd, s.n)
        k = rng.binomial(s.trials, expit(eta))
        data = Dataset.binomial(locs, k, np.full(s.n, s.trials), urban=urban if s.urban_fraction > 0 else None)
    else:
        raise CliError("E_CONFIG", f"unknown family {s.family!r}")
    path = out.add(args.out)
    write_dataset(path, data)
    out.add(write_manifest(path, "simulate", cfg))


def _pairwise(locs):
    return squareform(pdist(locs))


def cmd_fit(args, cfg, out: Outputs):
    data = read_dataset(args.data, cfg.model.family)
    model = build_model(data, cfg)
    fr = fit(model, settings=cfg.fit)
    path = out.add(args.out)
    path.write_text(fit_to_json(fr, model, include_timing=not args.no_timing) + "\n", encoding="utf-8")
    out.add(write_manifest(path, "fit", cfg, {"data": str(args.data)}))


def cmd_predict(args, cfg, out: Outputs):
    fr, model = fit_from_json(Path(args.fit).read_text(encoding="utf-8"))
    cols = read_table(args.targets)
    locs = np.column_stack([numeric_column(cols, "x", args.targets), numeric_column(cols, "y", args.targets)])
    p = cfg.predict
    covariates = None
    extra = [c for c in model.data.covariate_names[1:]]
    if extra:
        covariates = np.column_stack([numeric_column(cols, c, args.targets) if c in cols else np.zeros(len(locs)) for c in extra])
    if "area" in cols:
        area = numeric_column(cols, "area", args.targets).astype(np.int64)
        weights = numeric_column(cols, "weight", args.targets) if "weight" in cols else None
        ps = predict_areal(fr, model, locs, area, weights, p.n_samples, p.include_nugget, p.scale, cfg.seed, covariates=covariates)
        ids = np.arange(ps.n_targets)
    else:
        ps = predict_points(fr, model, locs, p.n_samples, p.include_nugget, p.scale, cfg.seed, covariates)
        ids = np.arange(ps.n_targets)
    summ = ps.summary()
    path = out.add(args.out)
    write_table(
        path,
        ["target", "mean", "sd", "q10", "q50", "q90"],
        [[int(i), summ["mean"][i], summ["sd"][i], summ["q10"][i], summ["q50"][i], summ["q90"][i]] for i in ids],
    )
    out.add(write_manifest(path, "predict", cfg, {"fit": str(args.fit), "targets": str(args.targets)}))
    if args.samples:
        sp_path = out.add(args.samples)
        write_table(sp_path, ["target"] + [f"s{j}" for j in range(ps.samples.shape[1])], [[int(i), *ps.samples[i]] for i in ids])


def cmd_score(args, cfg, out: Outputs):
    pred = read_table(args.pred)
    truth_cols = read_table(args.truth)
    col = args.truth_column
    y = numeric_column(truth_cols, col, args.truth)
    mean = numeric_column(pred, "mean", args.pred)
    if len(y) != len(mean):
        raise CliError("E_INPUT", f"{len(mean)} predictions but {len(y)} truth rows")
    if args.samples:
        s = read_table(args.samples)
        S = np.column_stack([numeric_column(s, k, args.samples) for k in s if k != "target"])
        rep = score_samples(y, S)
        crps_each = None
    else:
        sd = numeric_column(pred, "sd", args.pred)
        lo, hi = numeric_column(pred, "q10", args.pred), numeric_column(pred, "q90", args.pred)
        crps_each = crps_gaussian(mean, np.maximum(sd, 1e-300), y)
        rep = ScoreReport(
            rmse(y, mean),
            float(np.mean(crps_each)),
            100.0 * float(np.mean((y >= lo) & (y <= hi))),
            float(np.mean(hi - lo)),
            len(y),
        )
    rows = [["overall", "", "", rep.n, rep.rmse, rep.crps, rep.coverage, rep.width]]
    if args.obs:
        if "x" not in truth_cols or "y" not in truth_cols:
            raise CliError("E_INPUT", "binned scores need x,y columns in the truth file")
        obs = read_table(args.obs)
        edges = np.array([float(v) for v in args.bins.split(",")]) if args.bins else np.linspace(0.0, 0.4, 9)
        tgt = np.column_stack([numeric_column(truth_cols, "x"), numeric_column(truth_cols, "y")])
        olocs = np.column_stack([numeric_column(obs, "x"), numeric_column(obs, "y")])
        idx, _ = bin_by_distance(tgt, olocs, edges)
        for b in range(len(edges)):
            sel = idx == b
            if not sel.any():
                continue
            lo_e = edges[b]
            hi_e = edges[b + 1] if b + 1 < len(edges) else math.inf
            if args.samples:
                r = score_samples(y[sel], S[sel])
                rows.append([f"bin{b}", lo_e, hi_e, r.n, r.rmse, r.crps, r.coverage, r.width])
            else:
                cov = 100.0 * float(np.mean((y[sel] >= lo[sel]) & (y[sel] <= hi[sel])))
                rmse_b = float(np.sqrt(np.mean((y[sel] - mean[sel]) ** 2)))
                rows.append([f"bin{b}", lo_e, hi_e, int(sel.sum()), rmse_b, float(np.mean(crps_each[sel])), cov, float(np.mean(hi[sel] - lo[sel]))])
    path = out.add(args.out)
    write_table(path, ["scope", "lower", "upper", "n", "rmse", "crps", "coverage", "width"], rows)
    out.add(write_manifest(path, "score", cfg, {"pred": str(args.pred), "truth": str(args.truth)}))


def cmd_covfn(args, cfg, out: Outputs):
    fr, model = fit_from_json(Path(args.fit).read_text(encoding="utf-8"))
    c = cfg.covfn
    dmax = c.max_distance if c.max_distance is not None else 0.5 * min(model.basis.domain.extent)
    d = np.linspace(0.0, dmax, c.n_distances)
    curve = implied_covariance(fr, model, d, c.n_hyper_samples)
    cb = curve.band("cov")
    rb = curve.band("corr")
    path = out.add(args.out)
    write_table(
        path,
        ["distance", "cov_median", "cov_q10", "cov_q90", "corr_median", "corr_q10", "corr_q90"],
        [[d[k], cb[1, k], cb[0, k], cb[2, k], rb[1, k], rb[0, k], rb[2, k]] for k in range(len(d))],
    )
    out.add(write_manifest(path, "covfn", cfg, {"fit": str(args.fit)}))


def cmd_study(args, cfg, out: Outputs):
    study = cfg.study.full_scale() if args.full_scale else cfg.study
    study = dataclasses.replace(study, seed=cfg.seed)
    od = Path(args.out)
    for f in OUTPUT_FILES:
        out.add(od / f)
    run_study(study, od, workers=args.threads)


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "score": cmd_score,
    "covfn": cmd_covfn,
    "study": cmd_study,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="unsigned 64-bit seed (overrides the config)")
    common.add_argument("--threads", type=int, default=1, help="worker processes for parallel stages")

    p = argparse.ArgumentParser(prog="elk", description="Bayesian multiresolution lattice kriging")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write a synthetic dataset CSV")
    s.add_argument("--out", required=True)
    s.add_argument("--fit", help="simulate from a fitted model instead of the configured covariance")

    s = sub.add_parser("fit", parents=[common], help="fit a model to a dataset CSV")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-timing", action="store_true", help="omit timing metadata (byte-stable output)")

    s = sub.add_parser("predict", parents=[common], help="predict at points or areas")
    s.add_argument("--fit", required=True)
    s.add_argument("--targets", required=True, help="CSV with x,y[,area][,weight] and covariate columns")
    s.add_argument("--out", required=True)
    s.add_argument("--samples", help="also write the predictive draws here")

    s = sub.add_parser("score", parents=[common], help="score predictions against the truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--truth-column", default="value")
    s.add_argument("--samples", help="draws CSV from predict --samples (sample-based CRPS)")
    s.add_argument("--obs", help="observation CSV for distance-binned scores")
    s.add_argument("--bins", help="comma-separated bin edges")
    s.add_argument("--out", required=True)

    s = sub.add_parser("covfn", parents=[common], help="implied covariance/correlation curves")
    s.add_argument("--fit", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("study", parents=[common], help="run the simulation study")
    s.add_argument("--out", required=True)
    s.add_argument("--full-scale", action="store_true")
    return p


def _error_code(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, (DataError, FileNotFoundError, IsADirectoryError)):
        return "E_INPUT"
    if isinstance(exc, (NotPositiveDefiniteError, LaplaceConvergenceError, FitError, FloatingPointError)):
        return "E_NUMERIC"
    if isinstance(exc, (ValueError, KeyError, TypeError)):
        return "E_CONFIG"
    return "E_INTERNAL"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Outputs()
    try:
        if args.threads < 1:
            raise CliError("E_CONFIG", "--threads must be at least 1")
        cfg = load_config(args.config, args.seed)
        COMMANDS[args.command](args, cfg, out)
    except Exception as exc:
        out.cleanup()
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error {_error_code(exc)}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
