"""Buffered multiresolution lattices and Wendland basis evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

# Basis support radius in units of the layer cell width.
SUPPORT_FACTOR = 2.5
DEFAULT_BUFFER = 5
_COVER_TOL = 1e-9


@dataclass(frozen=True)
class Domain:
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.x_max, self.y_min, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("domain bounds must be finite")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"degenerate domain {vals}")

    @property
    def center(self) -> np.ndarray:
        return np.array([0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max)])

    @property
    def diameter(self) -> float:
        """Euclidean diagonal of the bounding rectangle."""
        return math.hypot(self.x_max - self.x_min, self.y_max - self.y_min)

    @property
    def extent(self) -> tuple[float, float]:
        return (self.x_max - self.x_min, self.y_max - self.y_min)

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return (
            (pts[:, 0] >= self.x_min - tol)
            & (pts[:, 0] <= self.x_max + tol)
            & (pts[:, 1] >= self.y_min - tol)
            & (pts[:, 1] <= self.y_max + tol)
        )

    def to_dict(self) -> dict:
        return {"x_min": self.x_min, "x_max": self.x_max, "y_min": self.y_min, "y_max": self.y_max}


@dataclass(frozen=True)
class LatticeLayer:
    """One regular knot lattice; knots are indexed ``iy * knots_x + ix``."""

    index: int
    delta: float
    buffer_cells: int
    knots_x: int
    knots_y: int
    origin: tuple[float, float]

    @property
    def m(self) -> int:
        return self.knots_x * self.knots_y

    @property
    def radius(self) -> float:
        return SUPPORT_FACTOR * self.delta

    def knots(self) -> np.ndarray:
        xs = self.origin[0] + self.delta * np.arange(self.knots_x)
        ys = self.origin[1] + self.delta * np.arange(self.knots_y)
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])

    def bounds(self) -> tuple[float, float, float, float]:
        x1 = self.origin[0] + self.delta * (self.knots_x - 1)
        y1 = self.origin[1] + self.delta * (self.knots_y - 1)
        return (self.origin[0], x1, self.origin[1], y1)


def _knot_count(extent: float, delta: float) -> int:
    return int(math.ceil(extent / delta - _COVER_TOL)) + 1


def build_layer(domain: Domain, delta: float, buffer_cells: int = DEFAULT_BUFFER, index: int = 1) -> LatticeLayer:
    """Lattice with a knot on the lower-left domain corner, padded by ``buffer_cells``."""
    if not (delta > 0 and math.isfinite(delta)):
        raise ValueError(f"delta must be positive, got {delta}")
    if buffer_cells < 0 or int(buffer_cells) != buffer_cells:
        raise ValueError(f"buffer_cells must be a non-negative integer, got {buffer_cells}")
    ex, ey = domain.extent
    if delta > max(ex, ey) * (1 + _COVER_TOL):
        raise ValueError(f"delta {delta} exceeds the domain extent {max(ex, ey)}")
    b = int(buffer_cells)
    nx = _knot_count(ex, delta) + 2 * b
    ny = _knot_count(ey, delta) + 2 * b
    if nx * ny < 4:
        raise ValueError("lattice needs at least 4 knots")
    origin = (domain.x_min - b * delta, domain.y_min - b * delta)
    return LatticeLayer(index, float(delta), b, nx, ny, origin)


def delta_from_count(domain: Domain, n_knots: int) -> float:
    """Cell width giving ``n_knots`` in-domain knots along the x extent."""
    if n_knots < 2:
        raise ValueError("need at least 2 in-domain knots")
    return domain.extent[0] / (n_knots - 1)


def fixed_resolutions(delta1: float, L: int) -> list[float]:
    """Halving resolutions used by the fixed-kappa scheme."""
    if L < 1 or delta1 <= 0:
        raise ValueError("need L >= 1 and delta1 > 0")
    return [delta1 / 2**l for l in range(L)]


@dataclass(frozen=True)
class MultiresBasis:
    domain: Domain
    layers: tuple[LatticeLayer, ...]
    offsets: tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("basis needs at least one layer")
        deltas = [layer.delta for layer in self.layers]
        if any(b >= a for a, b in zip(deltas, deltas[1:])):
            raise ValueError(f"layer deltas must strictly decrease, got {deltas}")
        offs = np.concatenate([[0], np.cumsum([layer.m for layer in self.layers])])
        object.__setattr__(self, "offsets", tuple(int(o) for o in offs))

    @classmethod
    def from_deltas(cls, domain: Domain, deltas, buffer_cells=DEFAULT_BUFFER) -> "MultiresBasis":
        deltas = list(deltas)
        if np.isscalar(buffer_cells):
            buffer_cells = [buffer_cells] * len(deltas)
        layers = tuple(
            build_layer(domain, d, b, index=i + 1) for i, (d, b) in enumerate(zip(deltas, buffer_cells))
        )
        return cls(domain, layers)

    @classmethod
    def from_counts(cls, domain: Domain, counts, buffer_cells=DEFAULT_BUFFER) -> "MultiresBasis":
        return cls.from_deltas(domain, [delta_from_count(domain, n) for n in counts], buffer_cells)

    @property
    def L(self) -> int:
        return len(self.layers)

    @property
    def total_m(self) -> int:
        return self.offsets[-1]

    @property
    def deltas(self) -> list[float]:
        return [layer.delta for layer in self.layers]

    def layer_slice(self, l: int) -> slice:
        """Column range of 1-based layer ``l``."""
        return slice(self.offsets[l - 1], self.offsets[l])

    def covers(self, points) -> np.ndarray:
        """True where a point lies inside every buffered lattice."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        ok = np.ones(len(pts), dtype=bool)
        for layer in self.layers:
            x0, x1, y0, y1 = layer.bounds()
            ok &= (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1)
        return ok

    def to_dict(self) -> dict:
        return {
            "domain": self.domain.to_dict(),
            "deltas": self.deltas,
            "buffer_cells": [layer.buffer_cells for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MultiresBasis":
        return cls.from_deltas(Domain(**d["domain"]), d["deltas"], d["buffer_cells"])


def wendland(t):
    """Wendland function (1-t)^6 (35t^2 + 18t + 3)/3 on [0, 1], zero beyond."""
    arr = np.asarray(t, dtype=float)
    if np.any(arr < 0):
        raise ValueError("wendland is defined for non-negative distances only")
    s = np.clip(1.0 - arr, 0.0, None)
    out = s**6 * (35.0 * arr**2 + 18.0 * arr + 3.0) / 3.0
    out = np.where(arr < 1.0, out, 0.0)
    return float(out) if out.ndim == 0 else out


def _layer_triplets(layer: LatticeLayer, pts: np.ndarray):
    fx = (pts[:, 0] - layer.origin[0]) / layer.delta
    fy = (pts[:, 1] - layer.origin[1]) / layer.delta
    offs = np.arange(-2, 4)
    ix = np.floor(fx)[:, None, None] + offs[None, None, :]
    iy = np.floor(fy)[:, None, None] + offs[None, :, None]
    ix, iy = np.broadcast_arrays(ix, iy)
    dist = np.hypot(fx[:, None, None] - ix, fy[:, None, None] - iy) / SUPPORT_FACTOR
    keep = (dist < 1.0) & (ix >= 0) & (ix < layer.knots_x) & (iy >= 0) & (iy < layer.knots_y)
    rows = np.broadcast_to(np.arange(len(pts))[:, None, None], ix.shape)[keep]
    cols = (iy[keep] * layer.knots_x + ix[keep]).astype(np.int64)
    vals = wendland(dist[keep])
    return rows, cols, vals


def layer_matrix(layer: LatticeLayer, locations) -> sp.csr_matrix:
    pts = _as_points(locations)
    rows, cols, vals = _layer_triplets(layer, pts)
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(pts), layer.m))


def basis_matrix(basis: MultiresBasis, locations) -> sp.csr_matrix:
    """Sparse n x total_m matrix of basis function values at ``locations``."""
    pts = _as_points(locations)
    rows, cols, vals = [], [], []
    for layer, off in zip(basis.layers, basis.offsets):
        r, c, v = _layer_triplets(layer, pts)
        rows.append(r)
        cols.append(c + off)
        vals.append(v)
    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(pts), basis.total_m),
    )
    A.eliminate_zeros()
    return A


def center_row(basis: MultiresBasis, l: int) -> sp.csr_matrix:
    """1 x m(l) row of layer ``l`` basis values at the domain centroid."""
    if not 1 <= l <= basis.L:
        raise ValueError(f"layer index {l} out of range 1..{basis.L}")
    A = layer_matrix(basis.layers[l - 1], basis.domain.center[None, :])
    A.eliminate_zeros()
    return A


def _as_points(locations) -> np.ndarray:
    pts = np.asarray(locations, dtype=float)
    if pts.size == 0:
        return np.zeros((0, 2))
    pts = np.atleast_2d(pts)
    if pts.shape[1] != 2:
        raise ValueError(f"locations must have shape (n, 2), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("locations must be finite")
    return pts
