"""Per-layer SAR precision matrices and variance normalization."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .geometry import LatticeLayer, MultiresBasis, center_row
from .sparse_la import cholesky, solve
from .special import MonotoneCubic

SQRT8 = math.sqrt(8.0)
SCHEMES = ("ELK-T", "ELK-F")
DEFAULT_SPLINE_KNOTS = 20


class ExtrapolationWarning(UserWarning):
    """A normalization spline was evaluated outside its fitted kappa range."""


def kappa_from_range(rho, delta):
    return SQRT8 * np.asarray(delta, dtype=float) / np.asarray(rho, dtype=float) if np.ndim(rho) else SQRT8 * delta / rho


def range_from_kappa(kappa, delta):
    return SQRT8 * np.asarray(delta, dtype=float) / np.asarray(kappa, dtype=float) if np.ndim(kappa) else SQRT8 * delta / kappa


@dataclass(frozen=True)
class HyperParams:
    """Covariance and nugget parameters on their natural scale.

    For ``ELK-F`` the single ``rho`` is the effective range of the coarsest
    layer; all layers share its kappa.
    """

    sigma2_S: float
    alpha: tuple[float, ...]
    rho: tuple[float, ...]
    sigma2_N: float
    scheme: str = "ELK-T"

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in np.atleast_1d(self.alpha)))
        object.__setattr__(self, "rho", tuple(float(r) for r in np.atleast_1d(self.rho)))
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not (self.sigma2_S > 0 and self.sigma2_N > 0):
            raise ValueError("variances must be positive")
        if any(not (a > 0) for a in self.alpha) or abs(sum(self.alpha) - 1.0) > 1e-12:
            raise ValueError(f"alpha must be a positive simplex vector, got {self.alpha}")
        if any(not (r > 0) for r in self.rho):
            raise ValueError("effective ranges must be positive")
        if self.scheme == "ELK-F" and len(self.rho) != 1:
            raise ValueError("ELK-F carries exactly one range value")
        if self.scheme == "ELK-T" and len(self.rho) != len(self.alpha):
            raise ValueError("ELK-T needs one range per layer")

    @property
    def L(self) -> int:
        return len(self.alpha)

    def kappas(self, basis: MultiresBasis) -> np.ndarray:
        deltas = np.array(basis.deltas)
        if self.scheme == "ELK-F":
            return np.full(basis.L, SQRT8 * deltas[0] / self.rho[0])
        return SQRT8 * deltas / np.array(self.rho)

    def layer_ranges(self, basis: MultiresBasis) -> np.ndarray:
        return SQRT8 * np.array(basis.deltas) / self.kappas(basis)

    def to_dict(self) -> dict:
        return {
            "sigma2_S": self.sigma2_S,
            "alpha": list(self.alpha),
            "rho": list(self.rho),
            "sigma2_N": self.sigma2_N,
            "scheme": self.scheme,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        return cls(d["sigma2_S"], tuple(d["alpha"]), tuple(d["rho"]), d["sigma2_N"], d.get("scheme", "ELK-T"))


def sar_matrix(layer: LatticeLayer, kappa: float) -> sp.csc_matrix:
    """SAR matrix: 4 + kappa^2 on the diagonal, -1 for each 4-neighbour."""
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    nx, ny = layer.knots_x, layer.knots_y
    adj_x = sp.diags([np.ones(nx - 1), np.ones(nx - 1)], [-1, 1], shape=(nx, nx))
    adj_y = sp.diags([np.ones(ny - 1), np.ones(ny - 1)], [-1, 1], shape=(ny, ny))
    adj = sp.kron(sp.identity(ny), adj_x) + sp.kron(adj_y, sp.identity(nx))
    return ((4.0 + kappa**2) * sp.identity(nx * ny) - adj).tocsc()


def second_difference(m: int) -> sp.csr_matrix:
    """1-d stencil: -2 on the diagonal (kept at the edges), +1 off-diagonal."""
    if m == 1:
        return sp.csr_matrix(np.array([[-2.0]]))
    return sp.diags([np.ones(m - 1), -2.0 * np.ones(m), np.ones(m - 1)], [-1, 0, 1], format="csr")


@lru_cache(maxsize=64)
def _structure(nx: int, ny: int):
    D = sp.kron(sp.identity(ny), second_difference(nx)) + sp.kron(second_difference(ny), sp.identity(nx))
    D = D.tocsc()
    S1 = (D + D.T).tocsc()
    S2 = (D.T @ D).tocsc()
    S1.sort_indices()
    S2.sort_indices()
    return D, S1, S2


def structure_matrices(layer: LatticeLayer) -> tuple[sp.csc_matrix, sp.csc_matrix]:
    """Cached (D + D^T, D^T D) for the Kronecker-sum Laplacian D of a layer."""
    _, S1, S2 = _structure(layer.knots_x, layer.knots_y)
    return S1, S2


def laplacian(layer: LatticeLayer) -> sp.csc_matrix:
    return _structure(layer.knots_x, layer.knots_y)[0]


def sar_logdet(layer: LatticeLayer, kappa: float) -> float:
    """log det B from the closed-form eigenvalues of the Dirichlet lattice Laplacian."""
    ex = 2.0 - 2.0 * np.cos(np.pi * np.arange(1, layer.knots_x + 1) / (layer.knots_x + 1))
    ey = 2.0 - 2.0 * np.cos(np.pi * np.arange(1, layer.knots_y + 1) / (layer.knots_y + 1))
    return float(np.sum(np.log(kappa * kappa + ex[None, :] + ey[:, None])))


def layer_precision(layer: LatticeLayer, kappa: float, alpha_l: float, sigma2_S: float, omega_l: float) -> sp.csc_matrix:
    for name, v in (("kappa", kappa), ("alpha_l", alpha_l), ("sigma2_S", sigma2_S), ("omega_l", omega_l)):
        if not (v > 0 and math.isfinite(v)):
            raise ValueError(f"{name} must be positive and finite, got {v}")
    S1, S2 = structure_matrices(layer)
    scale = omega_l / (alpha_l * sigma2_S)
    k2 = kappa * kappa
    Q = scale * (k2 * k2 * sp.identity(layer.m, format="csc") - k2 * S1 + S2)
    if not np.all(np.isfinite(Q.data)):
        raise FloatingPointError(f"non-finite precision entries for kappa={kappa}")
    return Q.tocsc()


def center_variance_unnormalized(layer: LatticeLayer, kappa: float, basis: MultiresBasis) -> float:
    """a* (B^T B)^{-1} a*^T for the layer's centre row a*."""
    a = center_row(basis, layer.index).toarray().ravel()
    f = cholesky(sar_matrix(layer, kappa))
    w = solve(f, a)  # B is symmetric, so B^{-T} a = B^{-1} a
    return float(w @ w)


def normalization_exact(layer: LatticeLayer, kappa: float, basis: MultiresBasis) -> float:
    """Reciprocal of the unnormalized centre variance, a* (B^T B)^{-1} a*^T.

    The layer variance at the centre is alpha_l sigma2_S when the precision is
    B^T B / (omega alpha_l sigma2_S); see :func:`joint_precision`.
    """
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    return 1.0 / center_variance_unnormalized(layer, kappa, basis)


def spline_range_interval(basis: MultiresBasis, l: int) -> tuple[float, float]:
    """Effective-range interval used to fit the kappa -> omega map of layer ``l``.

    Lower end delta_l / 5; the upper end covers both (delta_1/delta_l) w/5 and
    the domain diameter scaled by delta_l/delta_1.
    """
    d1 = basis.deltas[0]
    dl = basis.deltas[l - 1]
    w = basis.domain.diameter
    upper = max(d1 / dl * w / 5.0, w * dl / d1)
    return dl / 5.0, upper


@dataclass
class NormalizationSpline:
    """Monotone log-log interpolant of kappa -> omega for one layer."""

    layer: int
    log_kappa_knots: np.ndarray
    log_omega_knots: np.ndarray
    valid_range: tuple[float, float]
    slopes: np.ndarray | None = None
    _interp: MonotoneCubic = field(init=False, repr=False)

    def __post_init__(self):
        self.log_kappa_knots = np.asarray(self.log_kappa_knots, dtype=float)
        self.log_omega_knots = np.asarray(self.log_omega_knots, dtype=float)
        self._interp = MonotoneCubic(self.log_kappa_knots, self.log_omega_knots, self.slopes)
        self.slopes = self._interp.slopes
        self.valid_range = (float(self.valid_range[0]), float(self.valid_range[1]))

    def in_range(self, kappa) -> np.ndarray:
        k = np.asarray(kappa)
        lo, hi = self.valid_range
        return (k >= lo * (1 - 1e-12)) & (k <= hi * (1 + 1e-12))

    def __call__(self, kappa, warn: bool = True):
        k = np.asarray(kappa, dtype=float)
        if warn and not np.all(self.in_range(k)):
            warnings.warn(
                f"layer {self.layer}: kappa outside normalization fit range {self.valid_range}; extrapolating",
                ExtrapolationWarning,
                stacklevel=2,
            )
        out = np.exp(self._interp(np.log(k)))
        return float(out) if np.ndim(out) == 0 else out

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "log_kappa_knots": self.log_kappa_knots.tolist(),
            "log_omega_knots": self.log_omega_knots.tolist(),
            "slopes": self.slopes.tolist(),
            "valid_range": list(self.valid_range),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationSpline":
        return cls(d["layer"], d["log_kappa_knots"], d["log_omega_knots"], tuple(d["valid_range"]), d.get("slopes"))


def build_norm_spline(layer: LatticeLayer, basis: MultiresBasis, n_knots: int = DEFAULT_SPLINE_KNOTS, range_interval=None) -> NormalizationSpline:
    if n_knots < 4:
        raise ValueError("need at least 4 spline knots")
    rho_lo, rho_hi = range_interval or spline_range_interval(basis, layer.index)
    k_lo = SQRT8 * layer.delta / rho_hi
    k_hi = SQRT8 * layer.delta / rho_lo
    log_k = np.linspace(math.log(k_lo), math.log(k_hi), n_knots)
    log_w = np.array([math.log(normalization_exact(layer, math.exp(lk), basis)) for lk in log_k])
    return NormalizationSpline(layer.index, log_k, log_w, (k_lo, k_hi))


def build_norm_splines(basis: MultiresBasis, n_knots: int = DEFAULT_SPLINE_KNOTS) -> list[NormalizationSpline]:
    return [build_norm_spline(layer, basis, n_knots) for layer in basis.layers]


def layer_omegas(basis: MultiresBasis, hyper: HyperParams, splines=None) -> np.ndarray:
    """Normalizers per layer: spline values, or exact when ``splines`` is None."""
    kappas = hyper.kappas(basis)
    if splines is None:
        return np.array([normalization_exact(layer, k, basis) for layer, k in zip(basis.layers, kappas)])
    return np.array([s(k) for s, k in zip(splines, kappas)])


def joint_precision(basis: MultiresBasis, hyper: HyperParams, splines=None) -> sp.csc_matrix:
    """Block-diagonal precision of all basis coefficients.

    Each layer gets ``layer_precision`` with scale factor 1/omega_l, so that
    its variance at the domain centre is alpha_l sigma2_S.
    """
    if hyper.L != basis.L:
        raise ValueError(f"hyperparameters have {hyper.L} layers, basis has {basis.L}")
    kappas = hyper.kappas(basis)
    omegas = layer_omegas(basis, hyper, splines)
    blocks = [
        layer_precision(layer, k, a, hyper.sigma2_S, 1.0 / w)
        for layer, k, a, w in zip(basis.layers, kappas, hyper.alpha, omegas)
    ]
    return sp.block_diag(blocks, format="csc")
