"""Sparse and dense Cholesky factorizations, solves and GMRF sampling.

The sparse path wraps CHOLMOD (through cvxopt) with an explicit approximate
minimum degree ordering, so the permutation is known and deterministic.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from cvxopt import amd, cholmod, matrix, spmatrix

cholmod.options["supernodal"] = 2  # always L L^T so the diagonal is available
cholmod.options["postorder"] = True


class NotPositiveDefiniteError(ValueError):
    def __init__(self, pivot: int, message: str = ""):
        self.pivot = pivot
        super().__init__(message or f"matrix is not positive definite (pivot {pivot})")


def _lower_csc(Q) -> sp.csc_matrix:
    Q = sp.csc_matrix(Q)
    if Q.shape[0] != Q.shape[1]:
        raise ValueError(f"matrix must be square, got {Q.shape}")
    low = sp.tril(Q, format="csc")
    low.sum_duplicates()
    low.sort_indices()
    return low


def _index_arrays(low: sp.csc_matrix) -> tuple[matrix, matrix]:
    n = low.shape[0]
    cols = np.repeat(np.arange(n, dtype=np.int64), np.diff(low.indptr))
    return matrix(low.indices.astype(np.int64)), matrix(cols)


def _to_cvx(low: sp.csc_matrix, index=None) -> spmatrix:
    I, J = index or _index_arrays(low)
    n = low.shape[0]
    return spmatrix(matrix(np.ascontiguousarray(low.data, dtype=float)), I, J, (n, n))


class SymbolicFactor:
    """Ordering and sparsity analysis, reusable for matrices with one pattern."""

    def __init__(self, Q):
        low = _lower_csc(Q)
        self.n = low.shape[0]
        self.indptr = low.indptr.copy()
        self.indices = low.indices.copy()
        self._index = _index_arrays(low)
        X = _to_cvx(low, self._index)
        self.permutation = np.array(list(amd.order(X)), dtype=np.int64)
        self._X = X
        self._perm_cvx = matrix(self.permutation)
        self._work = None

    def matches(self, low: sp.csc_matrix) -> bool:
        return (
            low.shape[0] == self.n
            and np.array_equal(low.indptr, self.indptr)
            and np.array_equal(low.indices, self.indices)
        )


class CholFactor:
    """P Q P^T = L L^T for a sparse symmetric positive definite Q."""

    def __init__(self, F, X, symbolic: SymbolicFactor):
        self._F = F
        self._X = X
        self.symbolic = symbolic
        self.n = symbolic.n
        diag = np.array(cholmod.diag(F)).ravel()
        self.logdet = float(2.0 * np.sum(np.log(diag)))
        self._diag = diag

    @property
    def permutation(self) -> np.ndarray:
        return self.symbolic.permutation

    @property
    def L(self) -> sp.csc_matrix:
        """Explicit lower factor of the permuted matrix (refactors a copy)."""
        F = cholmod.symbolic(self._X, p=self.symbolic._perm_cvx)
        cholmod.numeric(self._X, F)
        Lc = cholmod.getfactor(F)
        I = np.array(Lc.I).ravel()
        J = np.array(Lc.J).ravel()
        V = np.array(Lc.V).ravel()
        return sp.csc_matrix((V, (I, J)), shape=(self.n, self.n))

    def diag(self) -> np.ndarray:
        return self._diag.copy()


def analyze(Q) -> SymbolicFactor:
    return SymbolicFactor(Q)


def cholesky(Q, symbolic: SymbolicFactor | None = None) -> CholFactor:
    """Factor a sparse SPD matrix; only the lower triangle of ``Q`` is read.

    Passing ``symbolic`` from an earlier matrix with the same lower-triangle
    pattern skips the ordering and symbolic analysis.
    """
    low = _lower_csc(Q)
    if symbolic is None or not symbolic.matches(low):
        symbolic = SymbolicFactor(low)
    if low.shape[0] == 0:
        raise ValueError("cannot factor an empty matrix")
    return _factor(_to_cvx(low, symbolic._index), symbolic)


def cholesky_values(symbolic: SymbolicFactor, data, reuse: bool = False) -> CholFactor:
    """Factor the matrix whose lower-triangle CSC data, in ``symbolic``'s pattern, is ``data``.

    With ``reuse`` the numeric factorization overwrites a workspace owned by
    ``symbolic``: cheaper, but the returned factor is only valid until the next
    reusing call on the same symbolic object.
    """
    data = np.ascontiguousarray(data, dtype=float)
    if data.shape != symbolic.indices.shape:
        raise ValueError("data does not match the symbolic pattern")
    X = symbolic._X * 1.0  # copy keeps the pattern; assigning V avoids re-sorting triplets
    X.V = matrix(data)
    if reuse:
        if symbolic._work is None:
            symbolic._work = cholmod.symbolic(X, p=symbolic._perm_cvx)
        return _factor(X, symbolic, symbolic._work)
    return _factor(X, symbolic)


def _factor(X: spmatrix, symbolic: SymbolicFactor, F=None) -> CholFactor:
    if F is None:
        F = cholmod.symbolic(X, p=symbolic._perm_cvx)
    try:
        cholmod.numeric(X, F)
    except ArithmeticError as exc:
        if F is symbolic._work:
            symbolic._work = None  # a failed refactor leaves the workspace unusable
        pivot = int(exc.args[0]) if exc.args else -1
        raise NotPositiveDefiniteError(pivot) from None
    return CholFactor(F, X, symbolic)


def _as_rhs(f: CholFactor, b) -> tuple[matrix, bool]:
    arr = np.asarray(b, dtype=float)
    vec = arr.ndim == 1
    arr2 = arr.reshape(arr.shape[0], -1) if arr.ndim else arr.reshape(1, 1)
    if arr2.shape[0] != f.n:
        raise ValueError(f"dimension mismatch: factor is {f.n}, right-hand side has {arr2.shape[0]} rows")
    return matrix(np.asfortranarray(arr2)), vec


def _from_cvx(m: matrix, vec: bool) -> np.ndarray:
    out = np.array(m)
    return out.ravel() if vec else out


def solve(f: CholFactor, b) -> np.ndarray:
    """Q^{-1} b for a vector or a matrix of right-hand sides."""
    B, vec = _as_rhs(f, b)
    cholmod.solve(f._F, B, sys=0)
    return _from_cvx(B, vec)


def solve_Lt(f: CholFactor, z) -> np.ndarray:
    """P^T L^{-T} z, whose covariance is Q^{-1} when z is white noise."""
    B, vec = _as_rhs(f, z)
    cholmod.solve(f._F, B, sys=5)
    cholmod.solve(f._F, B, sys=8)
    return _from_cvx(B, vec)


def sample_gmrf(f: CholFactor, mean, rng: np.random.Generator, size: int | None = None, z=None) -> np.ndarray:
    """Draw from N(mean, Q^{-1}); ``size`` draws come back as columns."""
    mean = np.asarray(mean, dtype=float)
    if z is None:
        shape = (f.n,) if size is None else (f.n, size)
        z = rng.standard_normal(shape)
    x = solve_Lt(f, z)
    return x + (mean if x.ndim == 1 else mean[:, None])


def dense_cholesky(C) -> np.ndarray:
    """Lower factor of a dense SPD matrix via LAPACK potrf."""
    C = np.array(C, dtype=float, order="F", copy=True)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError("matrix must be square")
    c, info = sla.lapack.dpotrf(C, lower=1, clean=1, overwrite_a=1)
    if info > 0:
        raise NotPositiveDefiniteError(info - 1)
    if info < 0:
        raise ValueError(f"potrf argument error {info}")
    return c


def jittered_dense_cholesky(C, rel_jitter: float = 1e-8, attempts: int = 3) -> np.ndarray:
    """Factor ``C + j I`` with j = rel_jitter * max diag, growing j by 10x on failure."""
    C = np.asarray(C, dtype=float)
    base = rel_jitter * float(np.max(np.diag(C)))
    last = None
    for k in range(attempts):
        try:
            Cj = C.copy()
            Cj[np.diag_indices_from(Cj)] += base * 10**k
            return dense_cholesky(Cj)
        except NotPositiveDefiniteError as exc:
            last = exc
    raise last


def dense_logdet(Lfac: np.ndarray) -> float:
    return float(2.0 * np.sum(np.log(np.diag(Lfac))))
