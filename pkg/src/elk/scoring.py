"""Predictive scores: RMSE, CRPS, interval coverage (plain and fuzzy)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import ndtr
from scipy.stats import binom

_SQRT_PI = math.sqrt(math.pi)


def rmse(truth, central) -> float:
    t = np.asarray(truth, dtype=float).ravel()
    c = np.asarray(central, dtype=float).ravel()
    if t.size == 0:
        raise ValueError("rmse of an empty set")
    if t.shape != c.shape:
        raise ValueError("truth and estimates differ in length")
    return float(np.sqrt(np.mean((t - c) ** 2)))


def crps_gaussian(mu, sigma, y):
    """Closed-form CRPS of N(mu, sigma^2) at y (vectorized)."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    z = (np.asarray(y, dtype=float) - np.asarray(mu, dtype=float)) / sigma
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    out = sigma * (z * (2.0 * ndtr(z) - 1.0) + 2.0 * pdf - 1.0 / _SQRT_PI)
    return float(out) if out.ndim == 0 else out


def crps_samples(draws, y):
    """Energy-form CRPS, E|X - y| - E|X - X'|/2, over all ordered draw pairs.

    ``draws`` may be 1-d (one target) or (n_targets, n_draws) with ``y`` of
    length n_targets.
    """
    x = np.asarray(draws, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    n = x.shape[1]
    if n < 2:
        raise ValueError("need at least 2 draws")
    yy = np.asarray(y, dtype=float).reshape(-1, 1)
    xs = np.sort(x, axis=1)
    term1 = np.mean(np.abs(xs - yy), axis=1)
    weights = (2.0 * np.arange(1, n + 1) - n - 1) / (n * n)
    mean_pair = 2.0 * xs @ weights
    out = term1 - 0.5 * mean_pair
    return float(out[0]) if single else out


def crps_discrete_proportion(cdf_on_grid, y: float) -> float:
    """CRPS of a predictive on {0, 1/N, ..., 1} at an observed proportion.

    The integrand is constant on each grid cell, so the integral is the sum
    (1/N) sum_j (1{y <= j/N} - F(j/N))^2.
    """
    F = np.asarray(cdf_on_grid, dtype=float)
    N = F.size - 1
    if N < 1:
        raise ValueError("grid needs at least two points")
    if np.any(np.diff(F) < -1e-12) or F[0] < -1e-12 or abs(F[-1] - 1.0) > 1e-9:
        raise ValueError("cdf must be non-decreasing in [0, 1] with F(1) = 1")
    grid = np.arange(N + 1) / N
    ind = (y <= grid + 1e-12).astype(float)
    return float(np.sum((ind - F) ** 2) / N)


@dataclass(frozen=True)
class FuzzyInterval:
    """Discrete quantiles with boundary rejection probabilities.

    Quantiles are stored as grid indices on {0, 1/N, ..., 1}.
    """

    N: int
    lower_index: int
    upper_index: int
    p_reject_lower: float
    p_reject_upper: float

    @property
    def Ql(self) -> float:
        return self.lower_index / self.N

    @property
    def Qu(self) -> float:
        return self.upper_index / self.N


def fuzzy_interval(pmf, alpha: float = 0.2) -> FuzzyInterval:
    p = np.asarray(pmf, dtype=float)
    if p.ndim != 1 or p.size < 2 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
        raise ValueError("pmf must be a non-negative vector on {0,..,N} summing to 1")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    N = p.size - 1
    half = 0.5 * alpha
    below = np.concatenate([[0.0], np.cumsum(p)[:-1]])  # P(y < j/N)
    above = np.concatenate([np.cumsum(p[::-1])[::-1][1:], [0.0]])  # P(y > j/N)
    lo = int(np.nonzero(below <= half)[0].max())
    hi = int(np.nonzero(above <= half)[0].min())
    r_lo = _reject_prob(half, below[lo], p[lo])
    r_hi = _reject_prob(half, above[hi], p[hi])
    return FuzzyInterval(N, lo, hi, r_lo, r_hi)


def _reject_prob(half: float, tail: float, mass: float) -> float:
    if mass <= 0:
        return 0.0
    return float(min(1.0, max(0.0, (half - tail) / mass)))


def fuzzy_coverage(interval: FuzzyInterval, y: float) -> float:
    """Membership of an observed proportion in the fuzzy interval."""
    j = int(round(y * interval.N))
    if abs(j - y * interval.N) > 1e-8:
        raise ValueError(f"observation {y} is not on the 1/{interval.N} grid")
    lo, hi = interval.lower_index, interval.upper_index
    if lo < j < hi:
        return 1.0
    if j == lo == hi:
        return max(0.0, 1.0 - interval.p_reject_lower - interval.p_reject_upper)
    if j == lo:
        return 1.0 - interval.p_reject_lower
    if j == hi:
        return 1.0 - interval.p_reject_upper
    return 0.0


def fuzzy_width(interval: FuzzyInterval, N: int | None = None) -> float:
    N = interval.N if N is None else N
    if N < 1:
        raise ValueError("N must be at least 1")
    w = interval.Qu - interval.Ql - (interval.p_reject_lower + interval.p_reject_upper) / N
    return max(0.0, w)


def binomial_mixture_pmf(p_draws, trials: int) -> np.ndarray:
    """Predictive pmf of successes/trials averaged over probability draws."""
    k = np.arange(trials + 1)
    pmf = binom.pmf(k[None, :], trials, np.asarray(p_draws, dtype=float)[:, None]).mean(axis=0)
    return pmf / pmf.sum()


def bin_by_distance(targets, observations, bin_edges):
    """Bin targets by distance to the nearest observation.

    Bins are [e_k, e_{k+1}) except the last, which is closed; distances past
    the final edge land in an overflow bin with index ``len(bin_edges) - 1``.
    Returns (bin index per target, nearest distances).
    """
    obs = np.atleast_2d(np.asarray(observations, dtype=float))
    if obs.size == 0:
        raise ValueError("need at least one observation")
    edges = np.asarray(bin_edges, dtype=float)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing with >= 2 entries")
    dist, _ = cKDTree(obs).query(np.atleast_2d(np.asarray(targets, dtype=float)))
    if np.any(dist < edges[0]):
        raise ValueError("a target is closer than the first bin edge")
    nb = edges.size - 1
    idx = np.searchsorted(edges, dist, side="right") - 1
    idx[dist == edges[-1]] = nb - 1
    idx[dist > edges[-1]] = nb
    return idx, dist


@dataclass
class ScoreReport:
    rmse: float
    crps: float
    coverage: float
    width: float
    n: int
    bins: list[dict] = field(default_factory=list)

    def __post_init__(self):
        for name in ("rmse", "crps", "coverage", "width"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite {name}")
        if not 0.0 <= self.coverage <= 100.0:
            raise ValueError("coverage must be a percentage")

    def row(self) -> dict:
        return {"n": self.n, "rmse": self.rmse, "crps": self.crps, "coverage": self.coverage, "width": self.width}


def _interval(samples: np.ndarray, alpha: float):
    q = np.quantile(samples, [alpha / 2, 1 - alpha / 2], axis=1)
    return q[0], q[1]


def score_samples(truth, samples, alpha: float = 0.2, crps=None) -> ScoreReport:
    """Scores for continuous targets from predictive draws (targets x draws)."""
    S = np.atleast_2d(np.asarray(samples, dtype=float))
    y = np.asarray(truth, dtype=float).ravel()
    if S.shape[0] != y.size:
        raise ValueError("one row of samples per target required")
    crps_vals = crps_samples(S, y) if crps is None else np.asarray(crps)
    lo, hi = _interval(S, alpha)
    cover = (y >= lo) & (y <= hi)
    return ScoreReport(
        rmse=rmse(y, S.mean(axis=1)),
        crps=float(np.mean(crps_vals)),
        coverage=100.0 * float(np.mean(cover)),
        width=float(np.mean(hi - lo)),
        n=y.size,
    )


def score_gaussian(truth, mean, sd, alpha: float = 0.2) -> ScoreReport:
    from scipy.stats import norm

    y = np.asarray(truth, dtype=float).ravel()
    mu = np.asarray(mean, dtype=float).ravel()
    sd = np.asarray(sd, dtype=float).ravel()
    z = norm.ppf(1 - alpha / 2)
    lo, hi = mu - z * sd, mu + z * sd
    return ScoreReport(
        rmse=rmse(y, mu),
        crps=float(np.mean(crps_gaussian(mu, sd, y))),
        coverage=100.0 * float(np.mean((y >= lo) & (y <= hi))),
        width=float(np.mean(hi - lo)),
        n=y.size,
    )


def score_binomial(successes, trials, p_samples, alpha: float = 0.2) -> ScoreReport:
    """Scores on the empirical-proportion scale with fuzzy coverage and width."""
    ys = np.asarray(successes, dtype=int).ravel()
    Ns = np.asarray(trials, dtype=int).ravel()
    P = np.atleast_2d(np.asarray(p_samples, dtype=float))
    crps_v, cov_v, wid_v, central = [], [], [], []
    for i, (k, N) in enumerate(zip(ys, Ns)):
        pmf = binomial_mixture_pmf(P[i], int(N))
        grid = np.arange(N + 1) / N
        central.append(float(pmf @ grid))
        y = k / N
        crps_v.append(crps_discrete_proportion(np.minimum(np.cumsum(pmf), 1.0), y))
        fi = fuzzy_interval(pmf, alpha)
        cov_v.append(fuzzy_coverage(fi, y))
        wid_v.append(fuzzy_width(fi, int(N)))
    return ScoreReport(
        rmse=rmse(ys / Ns, central),
        crps=float(np.mean(crps_v)),
        coverage=100.0 * float(np.mean(cov_v)),
        width=float(np.mean(wid_v)),
        n=ys.size,
    )


def binned_scores(truth, samples, bin_index, n_bins: int, alpha: float = 0.2, edges=None) -> list[dict]:
    """Per-bin rows (including the overflow bin when populated)."""
    S = np.atleast_2d(np.asarray(samples, dtype=float))
    y = np.asarray(truth, dtype=float).ravel()
    crps_all = crps_samples(S, y)
    rows = []
    for b in range(n_bins + 1):
        sel = np.asarray(bin_index) == b
        if b == n_bins and not sel.any():
            continue
        row = {"bin": b}
        if edges is not None:
            row["lower"] = float(edges[b]) if b < n_bins else float(edges[-1])
            row["upper"] = float(edges[b + 1]) if b < n_bins else math.inf
        if sel.any():
            rep = score_samples(y[sel], S[sel], alpha, crps=crps_all[sel])
            row.update(rep.row())
        else:
            row.update({"n": 0, "rmse": math.nan, "crps": math.nan, "coverage": math.nan, "width": math.nan})
        rows.append(row)
    return rows
