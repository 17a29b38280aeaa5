"""Dataset CSV ingestion, TOML run configuration and small output helpers."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .inference import FitSettings
from .model import Dataset, PriorSpec
from .study import ModelSpec, StudyConfig
from .geometry import Domain
from .special import CovModel

SCHEMAS = {
    "gaussian": (("x", "y", "value"), ()),
    "binomial": (("x", "y", "successes", "trials"), ("urban", "cluster_id")),
}


class DataError(ValueError):
    pass


def _number(text: str, row: int, col: str) -> float:
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise DataError(f"row {row}: column {col!r} is not a number: {text!r}") from None
    if not math.isfinite(v):
        raise DataError(f"row {row}: column {col!r} is not finite")
    return v


def read_dataset(path, schema: str = "gaussian") -> Dataset:
    """Parse a UTF-8 CSV with a header; row numbers in errors count data rows from 1."""
    if schema not in SCHEMAS:
        raise DataError(f"unknown schema {schema!r}")
    required, optional = SCHEMAS[schema]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if not header:
            raise DataError(f"{path}: missing header")
        header = [h.strip() for h in header]
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        unknown = [c for c in header if c not in required + optional]
        if unknown:
            raise DataError(f"{path}: unexpected columns {unknown}")
        reader.fieldnames = header
        cols = {c: [] for c in header}
        for i, rec in enumerate(reader, start=1):
            if None in rec or any(rec.get(c) is None for c in header):
                raise DataError(f"row {i}: wrong number of fields")
            for c in header:
                cols[c].append(_number(rec[c].strip(), i, c))
            if schema == "binomial":
                k, n = cols["successes"][-1], cols["trials"][-1]
                if n < 1 or n != round(n):
                    raise DataError(f"row {i}: trials must be a positive integer, got {rec['trials']}")
                if k < 0 or k > n or k != round(k):
                    raise DataError(f"row {i}: successes must be an integer in [0, trials], got {rec['successes']}")
                if "urban" in cols and cols["urban"][-1] not in (0.0, 1.0):
                    raise DataError(f"row {i}: urban must be 0 or 1")
    if not cols["x"]:
        raise DataError(f"{path}: no data rows")
    locs = np.column_stack([cols["x"], cols["y"]])
    if schema == "gaussian":
        return Dataset.gaussian(locs, cols["value"])
    return Dataset.binomial(
        locs,
        cols["successes"],
        cols["trials"],
        urban=cols.get("urban"),
        cluster=None if "cluster_id" not in cols else np.asarray(cols["cluster_id"], dtype=np.int64),
    )


def write_dataset(path, data: Dataset):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if data.family == "gaussian":
            w.writerow(["x", "y", "value"])
            for (x, y), v in zip(data.locations, data.y):
                w.writerow([fmt(x), fmt(y), fmt(v)])
            return
        has_urban = "urban" in data.covariate_names
        header = ["x", "y", "successes", "trials"] + (["urban"] if has_urban else [])
        header += ["cluster_id"] if data.cluster is not None else []
        w.writerow(header)
        uidx = data.covariate_names.index("urban") if has_urban else None
        for i in range(data.n):
            row = [fmt(data.locations[i, 0]), fmt(data.locations[i, 1]), int(data.y[i]), int(data.trials[i])]
            if has_urban:
                row.append(int(data.Z[i, uidx]))
            if data.cluster is not None:
                row.append(int(data.cluster[i]))
            w.writerow(row)


def fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "nan" if math.isnan(v) else format(v, ".12g")


def write_table(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) if isinstance(v, (float, int, np.floating, np.integer)) else v for v in r])


def read_table(path) -> dict[str, list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames:
            raise DataError(f"{path}: missing header")
        cols = {c.strip(): [] for c in reader.fieldnames}
        for i, rec in enumerate(reader, start=1):
            if None in rec:
                raise DataError(f"{path} row {i}: wrong number of fields")
            for k, v in rec.items():
                cols[k.strip()].append(v)
    return cols


def numeric_column(cols: dict, name: str, path="") -> np.ndarray:
    if name not in cols:
        raise DataError(f"{path}: missing column {name!r}")
    return np.array([_number(v, i + 1, name) for i, v in enumerate(cols[name])])


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class ModelSection:
    counts: tuple[int, ...] = (14, 40)
    deltas: tuple[float, ...] | None = None
    buffer: int = 5
    scheme: str = "ELK-T"
    family: str = "gaussian"
    spline_knots: int = 20
    exact_normalization: bool = False
    domain: tuple[float, float, float, float] | None = None


@dataclass(frozen=True)
class PredictSection:
    n_samples: int = 1000
    scale: str = "response"
    include_nugget: bool = False


@dataclass(frozen=True)
class CovfnSection:
    max_distance: float | None = None
    n_distances: int = 51
    n_hyper_samples: int = 100


@dataclass(frozen=True)
class SimulateSection:
    n: int = 400
    family: str = "gaussian"
    domain: tuple[float, float, float, float] = (-1.0, 1.0, -1.0, 1.0)
    components: tuple[tuple[float, float], ...] = ((0.5, 0.08), (0.5, 0.8))
    nugget_sd: float = 0.1
    intercept: float = 0.0
    trials: int = 20
    urban_fraction: float = 0.0
    urban_effect: float = 0.0
    cluster_sd: float = 0.0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: ModelSection = ModelSection()
    priors: PriorSpec = PriorSpec()
    fit: FitSettings = FitSettings()
    predict: PredictSection = PredictSection()
    covfn: CovfnSection = CovfnSection()
    simulate: SimulateSection = SimulateSection()
    study: StudyConfig = StudyConfig()

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "model": dataclasses.asdict(self.model),
            "priors": self.priors.to_dict(),
            "fit": self.fit.to_dict(),
            "predict": dataclasses.asdict(self.predict),
            "covfn": dataclasses.asdict(self.covfn),
            "simulate": dataclasses.asdict(self.simulate),
            "study": self.study.to_dict(),
        }
        return json.loads(json.dumps(d))

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _section(cls, raw: dict, name: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ValueError(f"unknown keys in [{name}]: {unknown}")
    return cls(**{k: _tuplify(v) for k, v in raw.items()})


_STUDY_KEYS = {
    "n_obs", "nugget_sd", "grid_n", "replications", "alpha", "n_samples", "corr_replicates",
    "corr_hyper_samples", "spline_knots", "bin_edges", "corr_distances", "domain", "components", "models",
}


def _study_section(raw: dict, fit: FitSettings, seed: int) -> StudyConfig:
    unknown = sorted(set(raw) - _STUDY_KEYS)
    if unknown:
        raise ValueError(f"unknown keys in [study]: {unknown}")
    kw = {k: _tuplify(v) for k, v in raw.items() if k not in ("domain", "components", "models")}
    if "domain" in raw:
        kw["domain"] = Domain(*raw["domain"])
    if "components" in raw:
        kw["cov"] = CovModel(_tuplify(raw["components"]))
    if "models" in raw:
        kw["models"] = tuple(_section(ModelSpec, m, "study.models") for m in raw["models"])
    return StudyConfig(seed=seed, fit=fit, **kw)


def parse_config(raw: dict, seed: int | None = None) -> RunConfig:
    """Build a RunConfig from a parsed TOML document; unknown keys are errors."""
    sections = {"seed", "model", "priors", "fit", "predict", "covfn", "simulate", "study"}
    unknown = sorted(set(raw) - sections)
    if unknown:
        raise ValueError(f"unknown config sections/keys: {unknown}")
    s = int(raw.get("seed", 0)) if seed is None else int(seed)
    if s < 0 or s >= 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    fit_raw = dict(raw.get("fit", {}))
    if "seed" in fit_raw:
        raise ValueError("set the seed at top level or with --seed, not in [fit]")
    fit = _section(FitSettings, {**fit_raw, "seed": s}, "fit")
    return RunConfig(
        seed=s,
        model=_section(ModelSection, raw.get("model", {}), "model"),
        priors=_section(PriorSpec, raw.get("priors", {}), "priors"),
        fit=fit,
        predict=_section(PredictSection, raw.get("predict", {}), "predict"),
        covfn=_section(CovfnSection, raw.get("covfn", {}), "covfn"),
        simulate=_section(SimulateSection, raw.get("simulate", {}), "simulate"),
        study=_study_section(raw.get("study", {}), fit, s),
    )


def load_config(path=None, seed: int | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    return parse_config(raw, seed)


def write_manifest(path, command: str, config: RunConfig, extra: dict | None = None) -> Path:
    """Sibling ``<file>.manifest.json`` with version, seed and the full materialized config."""
    p = Path(str(path) + ".manifest.json")
    doc = {
        "command": command,
        "version": __version__,
        "seed": config.seed,
        "config_hash": config.hash(),
        "config": config.to_dict(),
    }
    if extra:
        doc.update(extra)
    p.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return p
