"""Bessel K1, Matérn (nu = 1) correlation, monotone interpolation, disk distances."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.interpolate import CubicHermiteSpline, CubicSpline

SQRT8 = math.sqrt(8.0)
_EULER = 0.5772156649015329
_SERIES_MAX_X = 2.0
_SERIES_TERMS = 30
_CF_EPS = 1e-16
_CF_MAX_ITER = 10_000
_ASYMPTOTIC_MIN_X = 18.0


def _series_parts(x: np.ndarray):
    """Return (I1(x), S(x)) with K1 = 1/x + ln(x/2) I1 - (x/4) S, for small x."""
    q = 0.25 * x * x
    term = np.ones_like(x)  # q^k / (k! (k+1)!)
    psi_k1 = -_EULER  # psi(k + 1)
    psi_k2 = 1.0 - _EULER  # psi(k + 2)
    i_sum = np.zeros_like(x)
    s_sum = np.zeros_like(x)
    for k in range(_SERIES_TERMS):
        i_sum += term
        s_sum += (psi_k1 + psi_k2) * term
        term = term * q / ((k + 1) * (k + 2))
        psi_k1 += 1.0 / (k + 1)
        psi_k2 += 1.0 / (k + 2)
    return 0.5 * x * i_sum, s_sum


def _series_xk1(x: np.ndarray) -> np.ndarray:
    """x K1(x) by the ascending series, written to avoid cancellation near 0."""
    i1, s = _series_parts(x)
    return 1.0 + x * (np.log(0.5 * x) * i1 - 0.25 * x * s)


def _steed_k1(x: np.ndarray) -> np.ndarray:
    """K1(x) for x >= 2 by Steed's continued fraction (Temme/Thompson-Barnett)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    b = 2.0 * (1.0 + x)
    d = 1.0 / b
    h = d.copy()
    delh = d.copy()
    q1 = np.zeros(n)
    q2 = np.ones(n)
    a1 = 0.25
    q = np.full(n, a1)
    c = np.full(n, a1)
    s = 1.0 + q * delh
    h_out = np.empty(n)
    s_out = np.empty(n)
    idx = np.arange(n)
    a = -a1
    for i in range(2, _CF_MAX_ITER):
        a -= 2 * (i - 1)
        c = -a * c / i
        qnew = (q1 - b * q2) / a
        q1, q2 = q2, qnew
        q = q + c * qnew
        b = b + 2.0
        d = 1.0 / (b + a * d)
        delh = (b * d - 1.0) * delh
        h = h + delh
        dels = q * delh
        s = s + dels
        done = np.abs(dels / s) < _CF_EPS
        if done.any():
            h_out[idx[done]] = h[done]
            s_out[idx[done]] = s[done]
            keep = ~done
            if not keep.any():
                break
            idx, b, d, h, delh, q1, q2, q, c, s = (
                v[keep] for v in (idx, b, d, h, delh, q1, q2, q, c, s)
            )
    else:  # pragma: no cover - the fraction converges for all x >= 2
        raise RuntimeError("Bessel K1 continued fraction did not converge")
    h_out *= a1
    with np.errstate(under="ignore"):
        k0 = np.sqrt(np.pi / (2.0 * x)) * np.exp(-x) / s_out
    return k0 * (x + 0.5 - h_out) / x


def _asymptotic_k1(x: np.ndarray) -> np.ndarray:
    """Large-argument expansion; truncation error is below 1e-16 for x >= 18."""
    mu = 4.0
    total = np.ones_like(x)
    term = np.ones_like(x)
    for k in range(1, 40):
        term = term * (mu - (2 * k - 1) ** 2) / (k * 8.0 * x)
        total += term
        if np.all(np.abs(term) < 1e-17 * total):
            break
    with np.errstate(under="ignore"):
        return np.sqrt(np.pi / (2.0 * x)) * np.exp(-x) * total


def _large_k1(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    asym = x >= _ASYMPTOTIC_MIN_X
    if asym.any():
        out[asym] = _asymptotic_k1(x[asym])
    if (~asym).any():
        out[~asym] = _steed_k1(x[~asym])
    return out


def bessel_k1(x):
    """Modified Bessel function of the second kind, order one."""
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0)):
        raise ValueError("bessel_k1 requires x > 0")
    flat = arr.ravel()
    out = np.empty_like(flat)
    small = flat <= _SERIES_MAX_X
    if small.any():
        out[small] = _series_xk1(flat[small]) / flat[small]
    big = ~small
    if big.any():
        out[big] = _large_k1(flat[big])
    out = out.reshape(arr.shape)
    return float(out) if out.ndim == 0 else out


def _xk1(x: np.ndarray) -> np.ndarray:
    """x K1(x) with the x = 0 limit of 1; large arguments underflow to 0."""
    out = np.ones_like(x)
    small = (x > 0) & (x <= _SERIES_MAX_X)
    if small.any():
        out[small] = _series_xk1(x[small])
    mid = (x > _SERIES_MAX_X) & (x < 740.0)
    if mid.any():
        out[mid] = x[mid] * _large_k1(x[mid])
    out[x >= 740.0] = 0.0
    return out


def matern1_corr(d, rho):
    """Matérn correlation with smoothness 1 and effective range ``rho``."""
    if np.any(np.asarray(rho) <= 0):
        raise ValueError("rho must be positive")
    dd = np.asarray(d, dtype=float)
    if np.any(dd < 0):
        raise ValueError("distances must be non-negative")
    x = np.asarray(SQRT8 * dd / np.asarray(rho, dtype=float), dtype=float)
    out = _xk1(np.atleast_1d(x).ravel()).reshape(x.shape)
    return float(out) if out.ndim == 0 else out


_TABLE_MAX_X = 45.0  # x K1(x) < 1e-17 beyond
_TABLE_KNOTS = 20001


@lru_cache(maxsize=1)
def _xk1_table() -> CubicSpline:
    # Tabulated in s = sqrt(x): the x^2 log x term at the origin becomes smooth.
    s = np.linspace(0.0, math.sqrt(_TABLE_MAX_X), _TABLE_KNOTS)
    return CubicSpline(s, _xk1(s * s))


def matern1_corr_fast(d, rho):
    """Spline-tabulated :func:`matern1_corr`; absolute error below 1e-13."""
    x = SQRT8 * np.asarray(d, dtype=float) / rho
    out = np.where(x < _TABLE_MAX_X, _xk1_table()(np.sqrt(np.minimum(x, _TABLE_MAX_X))), 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CovModel:
    """Weighted sum of Matérn(nu=1) correlations, plus an optional nugget."""

    components: tuple[tuple[float, float], ...] = ((0.5, 0.08), (0.5, 0.8))
    nugget: float = 0.0

    def __post_init__(self):
        comps = tuple((float(w), float(r)) for w, r in self.components)
        if not comps:
            raise ValueError("covariance model needs a component")
        for w, r in comps:
            if w <= 0 or r <= 0:
                raise ValueError(f"component weights and ranges must be positive, got {(w, r)}")
        if self.nugget < 0:
            raise ValueError("nugget must be non-negative")
        object.__setattr__(self, "components", comps)

    @property
    def variance(self) -> float:
        return sum(w for w, _ in self.components)

    def correlation(self, d):
        return mixture_cov(self, d) / (self.variance + self.nugget)


def mixture_cov(model: CovModel, d):
    dd = np.asarray(d, dtype=float)
    out = np.zeros(dd.shape)
    for w, rho in model.components:
        out = out + w * np.asarray(matern1_corr(dd, rho))
    if model.nugget:
        out = out + model.nugget * (dd == 0)
    return float(out) if out.ndim == 0 else out


@dataclass
class MonotoneCubic:
    """C1 cubic Hermite interpolant with Hyman-filtered slopes.

    Outside the knot range it continues linearly with the end slopes.
    """

    xs: np.ndarray
    ys: np.ndarray
    slopes: np.ndarray = field(default=None)

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=float)
        self.ys = np.asarray(self.ys, dtype=float)
        if self.slopes is None:
            self.slopes = hyman_slopes(self.xs, self.ys)
        self.slopes = np.asarray(self.slopes, dtype=float)
        self._herm = CubicHermiteSpline(self.xs, self.ys, self.slopes, extrapolate=False)

    def __call__(self, x):
        xv = np.asarray(x, dtype=float)
        out = np.asarray(self._herm(xv), dtype=float)
        lo = xv < self.xs[0]
        hi = xv > self.xs[-1]
        out = np.where(lo, self.ys[0] + self.slopes[0] * (xv - self.xs[0]), out)
        out = np.where(hi, self.ys[-1] + self.slopes[-1] * (xv - self.xs[-1]), out)
        return float(out) if out.ndim == 0 else out


def hyman_slopes(xs, ys) -> np.ndarray:
    """Cubic-spline knot slopes passed through Hyman's monotonicity filter."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.ndim != 1 or xs.shape != ys.shape or len(xs) < 2:
        raise ValueError("need matching 1-d knot arrays of length >= 2")
    if np.any(np.diff(xs) <= 0):
        raise ValueError("xs must be strictly increasing")
    secants = np.diff(ys) / np.diff(xs)
    if np.any(secants > 0) and np.any(secants < 0):
        raise ValueError("ys must be monotone")
    sign = 1.0 if np.all(secants >= 0) else -1.0
    if len(xs) == 2:
        return np.array([secants[0], secants[0]])
    bc = "not-a-knot" if len(xs) >= 4 else "natural"
    s = CubicSpline(xs, ys, bc_type=bc)(xs, 1)
    # Work on increasing data; the filter is symmetric.
    s = sign * s
    a = sign * secants
    left = np.concatenate([[a[0]], a])
    right = np.concatenate([a, [a[-1]]])
    bound = 3.0 * np.minimum(left, right)
    s = np.clip(s, 0.0, None)
    s = np.minimum(s, bound)
    s[(left == 0) | (right == 0)] = 0.0
    return sign * s


def monotone_spline(xs, ys) -> MonotoneCubic:
    return MonotoneCubic(xs, ys)


def disk_distance_density(d, R: float):
    """Density of the distance between two uniform points in a disk of radius R."""
    if R <= 0:
        raise ValueError("R must be positive")
    dd = np.asarray(d, dtype=float)
    t = np.clip(dd / (2.0 * R), 0.0, 1.0)
    val = 4.0 * dd / (np.pi * R * R) * (np.arccos(t) - t * np.sqrt(1.0 - t * t))
    out = np.where((dd >= 0) & (dd <= 2.0 * R), val, 0.0)
    return float(out) if out.ndim == 0 else out
