"""Latent Gaussian model: data, priors, hyperparameter transforms and latent posteriors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln, log_expit, expit

from .geometry import MultiresBasis, basis_matrix
from .precision import HyperParams, joint_precision, layer_omegas, sar_logdet, structure_matrices
from .sparse_la import CholFactor, NotPositiveDefiniteError, SymbolicFactor, cholesky, cholesky_values, solve

LOG_2PI = math.log(2.0 * math.pi)
NEWTON_MAX_ITER = 50
NEWTON_GRAD_TOL = 1e-8
NEWTON_MAX_HALVINGS = 10


class LaplaceConvergenceError(RuntimeError):
    def __init__(self, grad_norm: float):
        self.grad_norm = grad_norm
        super().__init__(f"Newton iterations did not converge (max |gradient| = {grad_norm:.3g})")


@dataclass
class Dataset:
    """Observations at planar locations.

    ``y`` holds real responses (Gaussian) or success counts (binomial, with
    ``trials``). ``Z`` always starts with the intercept column.
    """

    locations: np.ndarray
    y: np.ndarray
    Z: np.ndarray
    trials: np.ndarray | None = None
    cluster: np.ndarray | None = None
    covariate_names: tuple[str, ...] = ("intercept",)

    def __post_init__(self):
        self.locations = np.atleast_2d(np.asarray(self.locations, dtype=float))
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.Z = np.asarray(self.Z, dtype=float).reshape(len(self.y), -1)
        n = len(self.y)
        if self.locations.shape != (n, 2):
            raise ValueError("locations must be an (n, 2) array matching the responses")
        if not np.all(np.isfinite(self.locations)) or not np.all(np.isfinite(self.y)):
            raise ValueError("locations and responses must be finite")
        if len(self.covariate_names) != self.Z.shape[1]:
            raise ValueError("one name per covariate column required")
        if self.trials is not None:
            self.trials = np.asarray(self.trials, dtype=float).ravel()
            if self.trials.shape != (n,):
                raise ValueError("trials must match the responses")
            if np.any(self.trials < 1) or np.any(self.trials != np.round(self.trials)):
                raise ValueError("trials must be positive integers")
            if np.any(self.y < 0) or np.any(self.y > self.trials) or np.any(self.y != np.round(self.y)):
                raise ValueError("successes must be integers in [0, trials]")
        if self.cluster is not None:
            self.cluster = np.asarray(self.cluster, dtype=np.int64).ravel()
            if self.cluster.shape != (n,):
                raise ValueError("cluster ids must match the responses")

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def family(self) -> str:
        return "gaussian" if self.trials is None else "binomial"

    @classmethod
    def gaussian(cls, locations, values, covariates=None, names=()) -> "Dataset":
        values = np.asarray(values, dtype=float).ravel()
        Z, names = _design(len(values), covariates, names)
        return cls(locations, values, Z, covariate_names=names)

    @classmethod
    def binomial(cls, locations, successes, trials, urban=None, cluster=None) -> "Dataset":
        successes = np.asarray(successes, dtype=float).ravel()
        cov, names = (None, ()) if urban is None else (np.asarray(urban, dtype=float).reshape(-1, 1), ("urban",))
        if cov is not None and not np.all(np.isin(cov, (0.0, 1.0))):
            raise ValueError("urban indicator must be 0/1")
        Z, names = _design(len(successes), cov, names)
        return cls(locations, successes, Z, trials=trials, cluster=cluster, covariate_names=names)

    def cluster_codes(self) -> tuple[np.ndarray, int]:
        """Dense 0..K-1 cluster codes; each observation is its own cluster by default."""
        if self.cluster is None:
            return np.arange(self.n), self.n
        _, codes = np.unique(self.cluster, return_inverse=True)
        return codes, int(codes.max()) + 1

    def to_dict(self) -> dict:
        d = {
            "locations": self.locations.tolist(),
            "y": self.y.tolist(),
            "Z": self.Z.tolist(),
            "covariate_names": list(self.covariate_names),
        }
        if self.trials is not None:
            d["trials"] = self.trials.tolist()
        if self.cluster is not None:
            d["cluster"] = self.cluster.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Dataset":
        return cls(
            np.array(d["locations"]),
            np.array(d["y"]),
            np.array(d["Z"]),
            trials=None if d.get("trials") is None else np.array(d["trials"]),
            cluster=None if d.get("cluster") is None else np.array(d["cluster"]),
            covariate_names=tuple(d["covariate_names"]),
        )


def _design(n: int, covariates, names) -> tuple[np.ndarray, tuple[str, ...]]:
    cols = [np.ones((n, 1))]
    names = tuple(names)
    if covariates is not None:
        cov = np.asarray(covariates, dtype=float).reshape(n, -1)
        if len(names) != cov.shape[1]:
            names = tuple(f"x{j + 1}" for j in range(cov.shape[1]))
        cols.append(cov)
    else:
        names = ()
    return np.hstack(cols), ("intercept",) + names


@dataclass(frozen=True)
class PriorSpec:
    """Hyperparameter priors.

    ``range_median`` is the prior median of the coarsest-layer range; None
    means a fifth of the domain diameter. Finer layers scale it by
    delta_l / delta_1.
    """

    U_spatial: float = 1.0
    alpha_spatial: float = 0.01
    U_nugget: float = 1.0
    alpha_nugget: float = 0.01
    dirichlet_a: tuple[float, ...] | None = None
    range_median: float | None = None
    beta_precision: float = 1e-3
    intercept_precision: float = 1e-10

    def __post_init__(self):
        for name in ("U_spatial", "U_nugget", "beta_precision", "intercept_precision"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("alpha_spatial", "alpha_nugget"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.range_median is not None and not self.range_median > 0:
            raise ValueError("range_median must be positive")

    @property
    def rate_spatial(self) -> float:
        return -math.log(self.alpha_spatial) / self.U_spatial

    @property
    def rate_nugget(self) -> float:
        return -math.log(self.alpha_nugget) / self.U_nugget

    def concentration(self, L: int) -> np.ndarray:
        if self.dirichlet_a is None:
            return np.full(L, 1.5 / L)
        a = np.asarray(self.dirichlet_a, dtype=float)
        if a.shape != (L,):
            raise ValueError(f"need {L} Dirichlet concentrations")
        return a

    def range_medians(self, basis: MultiresBasis, scheme: str) -> np.ndarray:
        rho0 = self.range_median if self.range_median is not None else basis.domain.diameter / 5.0
        if scheme == "ELK-F":
            return np.array([rho0])
        d = np.array(basis.deltas)
        return rho0 * d / d[0]

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if d["dirichlet_a"] is not None:
            d["dirichlet_a"] = list(d["dirichlet_a"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PriorSpec":
        d = dict(d)
        if d.get("dirichlet_a") is not None:
            d["dirichlet_a"] = tuple(d["dirichlet_a"])
        return cls(**d)


def inv_exp_logpdf(rho, median: float):
    """log density of rho when 1/rho is exponential with the given median for rho."""
    lam = np.asarray(median, dtype=float) * math.log(2.0)
    rho = np.asarray(rho, dtype=float)
    return np.log(lam) - 2.0 * np.log(rho) - lam / rho


def inv_exp_cdf(rho, median: float):
    return np.exp(-median * math.log(2.0) / np.asarray(rho, dtype=float))


def log_prior(hyper: HyperParams, priors: PriorSpec, basis: MultiresBasis, transformed: bool = False) -> float:
    """Sum of hyperparameter log prior densities.

    With ``transformed`` the density is that of the unconstrained coordinates
    from :func:`transform`, i.e. Jacobian terms are included.
    """
    return log_prior_with_medians(hyper, priors, priors.range_medians(basis, hyper.scheme), transformed)


def log_prior_with_medians(hyper: HyperParams, priors: PriorSpec, medians, transformed: bool = False) -> float:
    sS = math.sqrt(hyper.sigma2_S)
    sN = math.sqrt(hyper.sigma2_N)
    lp = math.log(priors.rate_spatial) - priors.rate_spatial * sS
    lp += math.log(priors.rate_nugget) - priors.rate_nugget * sN
    alpha = np.array(hyper.alpha)
    if hyper.L > 1:
        a = priors.concentration(hyper.L)
        lp += gammaln(a.sum()) - gammaln(a).sum() + float(np.sum((a - 1.0) * np.log(alpha)))
    rho = np.array(hyper.rho)
    lp += float(np.sum(inv_exp_logpdf(rho, medians)))
    if transformed:
        lp += math.log(sS / 2.0) + math.log(sN / 2.0)
        if hyper.L > 1:
            lp += float(np.sum(np.log(alpha)))
        lp += float(np.sum(np.log(rho)))
    return float(lp)


def transform(hyper: HyperParams) -> np.ndarray:
    """[log sigma2_S, multilogit(alpha), log rho, log sigma2_N]."""
    a = np.array(hyper.alpha)
    z = np.log(a[:-1] / a[-1])
    return np.concatenate([[math.log(hyper.sigma2_S)], z, np.log(hyper.rho), [math.log(hyper.sigma2_N)]])


def untransform(theta, L: int, scheme: str = "ELK-T") -> HyperParams:
    theta = np.asarray(theta, dtype=float)
    n_rho = 1 if scheme == "ELK-F" else L
    if theta.shape != (1 + (L - 1) + n_rho + 1,):
        raise ValueError(f"expected {L + n_rho + 1} transformed coordinates, got {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("transformed hyperparameters must be finite")
    z = np.concatenate([theta[1:L], [0.0]])
    z -= z.max()
    alpha = np.exp(z) / np.exp(z).sum()
    rho = np.exp(theta[L : L + n_rho])
    return HyperParams(math.exp(theta[0]), tuple(alpha / alpha.sum()), tuple(rho), math.exp(theta[-1]), scheme)


class GaussianLik:
    def __init__(self, y):
        self.y = np.asarray(y, dtype=float)

    def terms(self, eta, sigma2):
        r = self.y - eta
        ll = -0.5 * len(r) * (LOG_2PI + math.log(sigma2)) - 0.5 * float(r @ r) / sigma2
        return ll, r / sigma2, np.full(len(r), 1.0 / sigma2)


class BinomialLogitLik:
    """log Binomial(y; N, expit(eta)) with gradient y - N p and curvature N p (1 - p)."""

    def __init__(self, successes, trials):
        self.y = np.asarray(successes, dtype=float)
        self.N = np.asarray(trials, dtype=float)
        self.log_choose = float(np.sum(gammaln(self.N + 1) - gammaln(self.y + 1) - gammaln(self.N - self.y + 1)))

    def loglik(self, eta) -> float:
        eta = np.asarray(eta, dtype=float)
        return self.log_choose + float(np.sum(self.y * log_expit(eta) + (self.N - self.y) * log_expit(-eta)))

    def gradient(self, eta) -> np.ndarray:
        return self.y - self.N * expit(eta)

    def curvature(self, eta) -> np.ndarray:
        p = expit(eta)
        return self.N * p * (1.0 - p)

    def terms(self, eta, sigma2=None):
        return self.loglik(eta), self.gradient(eta), self.curvature(eta)


class _Pattern:
    """Fixed lower-triangle CSC pattern with value alignment helpers."""

    def __init__(self, low: sp.csc_matrix):
        self.n = low.shape[0]
        self.low = low
        cols = np.repeat(np.arange(self.n, dtype=np.int64), np.diff(low.indptr))
        self.keys = cols * self.n + low.indices.astype(np.int64)
        self.nnz = len(self.keys)

    def positions(self, rows, cols) -> np.ndarray:
        r = np.maximum(rows, cols).astype(np.int64)
        c = np.minimum(rows, cols).astype(np.int64)
        key = c * self.n + r
        pos = np.searchsorted(self.keys, key)
        if np.any(pos >= self.nnz) or np.any(self.keys[np.minimum(pos, self.nnz - 1)] != key):
            raise ValueError("entry outside the assembled pattern")
        return pos

    def align(self, M, offset: int = 0) -> np.ndarray:
        coo = sp.tril(sp.coo_matrix(M)).tocoo()
        pos = self.positions(coo.row + offset, coo.col + offset)
        return np.bincount(pos, weights=coo.data, minlength=self.nnz)


class _PairPlan:
    """Scatter plan for W^T diag(d) W into a pattern."""

    def __init__(self, W: sp.csr_matrix, pattern: _Pattern):
        W = sp.csr_matrix(W)
        W.sort_indices()
        counts = np.diff(W.indptr)
        r = int(counts.max()) if len(counts) else 0
        n = W.shape[0]
        cols = np.zeros((n, r), dtype=np.int64)
        vals = np.zeros((n, r))
        valid = np.arange(r)[None, :] < counts[:, None]
        cols[valid] = W.indices
        vals[valid] = W.data
        jj, kk = np.tril_indices(r)
        keep = valid[:, jj] & valid[:, kk]
        rows = np.broadcast_to(np.arange(n)[:, None], keep.shape)[keep]
        cj = cols[:, jj][keep]
        ck = cols[:, kk][keep]
        self.rows = rows
        self.prod = (vals[:, jj] * vals[:, kk])[keep]
        self.pos = pattern.positions(cj, ck)
        self.nnz = pattern.nnz

    def values(self, d) -> np.ndarray:
        return np.bincount(self.pos, weights=self.prod * np.asarray(d)[self.rows], minlength=self.nnz)


@dataclass
class GaussianApprox:
    mode: np.ndarray
    factor: CholFactor
    log_marginal: float
    iterations: int = 0

    def latent_sd(self) -> np.ndarray:  # pragma: no cover - convenience
        return np.sqrt(np.diag(solve(self.factor, np.eye(len(self.mode)))))


@dataclass
class LatentModel:
    """Latent Gaussian model with latent vector ordered [c, beta, eps].

    ``eps`` (cluster effects) exists only for binomial data; their variance
    uses the nugget hyperparameter. ``splines`` of None means exact
    normalization at every evaluation.
    """

    basis: MultiresBasis
    data: Dataset
    priors: PriorSpec = field(default_factory=PriorSpec)
    scheme: str = "ELK-T"
    splines: list | None = None

    def __post_init__(self):
        b, d = self.basis, self.data
        if not np.all(b.covers(d.locations)):
            raise ValueError("observation locations fall outside the buffered lattice")
        self.A = basis_matrix(b, d.locations)
        self.m = b.total_m
        self.p = d.Z.shape[1]
        blocks = [self.A, sp.csr_matrix(d.Z)]
        if d.family == "binomial":
            codes, self.k = d.cluster_codes()
            blocks.append(sp.csr_matrix((np.ones(d.n), (np.arange(d.n), codes)), shape=(d.n, self.k)))
            self.lik = BinomialLogitLik(d.y, d.trials)
        else:
            self.k = 0
            self.lik = GaussianLik(d.y)
        self.W = sp.hstack(blocks, format="csr")
        self.dim = self.m + self.p + self.k
        self._build_pattern()

    @property
    def family(self) -> str:
        return self.data.family

    @property
    def L(self) -> int:
        return self.basis.L

    @property
    def n_theta(self) -> int:
        return 1 + (self.L - 1) + (1 if self.scheme == "ELK-F" else self.L) + 1

    def _build_pattern(self):
        pieces = []
        self._layer_parts = []
        for layer, off in zip(self.basis.layers, self.basis.offsets):
            S1, S2 = structure_matrices(layer)
            I = sp.identity(layer.m, format="csc")
            pieces.append((off, I, S1, S2))
        diag = sp.identity(self.dim, format="csc")
        WtW = (self.W.T @ self.W).tocsc()
        blocks = sp.block_diag([(abs(S1) + abs(S2) + I) for _, I, S1, S2 in pieces], format="csc")
        full = diag + abs(WtW) + sp.block_diag([blocks, sp.csc_matrix((self.p + self.k, self.p + self.k))], format="csc")
        low = sp.tril(full, format="csc")
        low.data[:] = 1.0
        low.sort_indices()
        self.pattern = _Pattern(low)
        for off, I, S1, S2 in pieces:
            self._layer_parts.append(
                (self.pattern.align(I, off), self.pattern.align(S1, off), self.pattern.align(S2, off))
            )
        self._pos_beta = self.pattern.positions(np.arange(self.m, self.m + self.p), np.arange(self.m, self.m + self.p))
        self._pos_eps = self.pattern.positions(np.arange(self.m + self.p, self.dim), np.arange(self.m + self.p, self.dim))
        self._pairs = _PairPlan(self.W, self.pattern)
        self._wtw = self._pairs.values(np.ones(self.data.n))
        self.symbolic = SymbolicFactor(self.pattern.low)
        self._beta_prec = np.array([self.priors.intercept_precision] + [self.priors.beta_precision] * (self.p - 1))

    def theta_to_hyper(self, theta) -> HyperParams:
        return untransform(theta, self.L, self.scheme)

    def hyper_to_theta(self, hyper: HyperParams) -> np.ndarray:
        return transform(hyper)

    def prior_values(self, hyper: HyperParams) -> tuple[np.ndarray, float]:
        """Pattern-aligned prior precision values and log det of the prior precision."""
        if hyper.L != self.L or hyper.scheme != self.scheme:
            raise ValueError("hyperparameters do not match the model layers or scheme")
        kappas = hyper.kappas(self.basis)
        if self.splines is None:
            omegas = layer_omegas(self.basis, hyper)
        else:
            omegas = np.array([s(k, warn=False) for s, k in zip(self.splines, kappas)])
        vals = np.zeros(self.pattern.nnz)
        logdet = 0.0
        for layer, (vI, v1, v2), k, a, w in zip(self.basis.layers, self._layer_parts, kappas, hyper.alpha, omegas):
            s = 1.0 / (w * a * hyper.sigma2_S)
            k2 = k * k
            vals += s * (k2 * k2 * vI - k2 * v1 + v2)
            logdet += layer.m * math.log(s) + 2.0 * sar_logdet(layer, k)
        vals[self._pos_beta] += self._beta_prec
        logdet += float(np.sum(np.log(self._beta_prec)))
        if self.k:
            vals[self._pos_eps] += 1.0 / hyper.sigma2_N
            logdet -= self.k * math.log(hyper.sigma2_N)
        return vals, logdet

    def prior_precision(self, hyper: HyperParams) -> sp.csc_matrix:
        vals, _ = self.prior_values(hyper)
        return self._symmetric(vals)

    def _symmetric(self, vals) -> sp.csc_matrix:
        low = self.pattern.low.copy()
        low.data = np.asarray(vals, dtype=float).copy()
        return (low + sp.tril(low, k=-1, format="csc").T).tocsc()

    def posterior(self, hyper: HyperParams, reuse: bool = False) -> GaussianApprox:
        """Exact (Gaussian) or Laplace latent posterior.

        ``reuse`` shares one numeric factor workspace across calls; the
        returned factor then goes stale at the next reusing call.
        """
        if self.family == "gaussian":
            return self.gaussian_posterior(hyper, reuse)
        return self.laplace_posterior(hyper, reuse=reuse)

    def gaussian_posterior(self, hyper: HyperParams, reuse: bool = False) -> GaussianApprox:
        if self.family != "gaussian":
            raise ValueError("closed-form posterior needs a Gaussian likelihood")
        prior_vals, prior_logdet = self.prior_values(hyper)
        s2 = hyper.sigma2_N
        f = cholesky_values(self.symbolic, prior_vals + self._wtw / s2, reuse)
        y = self.data.y
        mode = solve(f, self.W.T @ y / s2)
        r = y - self.W @ mode
        quad = float(mode @ (self._symmetric(prior_vals) @ mode))
        loglik = -0.5 * self.data.n * (LOG_2PI + math.log(s2)) - 0.5 * float(r @ r) / s2
        logm = loglik - 0.5 * quad + 0.5 * prior_logdet - 0.5 * f.logdet
        return GaussianApprox(mode, f, float(logm), 1)

    def laplace_posterior(self, hyper: HyperParams, x0=None, reuse: bool = False) -> GaussianApprox:
        """Newton iterations to the latent mode, then the Laplace marginal."""
        prior_vals, prior_logdet = self.prior_values(hyper)
        Qp = self._symmetric(prior_vals)
        s2 = hyper.sigma2_N
        x = np.zeros(self.dim) if x0 is None else np.asarray(x0, dtype=float).copy()

        def objective(x):
            ll, g, c = self.lik.terms(self.W @ x, s2)
            Qx = Qp @ x
            return ll - 0.5 * float(x @ Qx), self.W.T @ g - Qx, c

        val, grad, curv = objective(x)
        for it in range(1, NEWTON_MAX_ITER + 1):
            f = cholesky_values(self.symbolic, prior_vals + self._pairs.values(curv), reuse)
            step = solve(f, grad)
            t = 1.0
            for _ in range(NEWTON_MAX_HALVINGS + 1):
                cand = x + t * step
                cval, cgrad, ccurv = objective(cand)
                if math.isfinite(cval) and cval >= val - 1e-12 * abs(val):
                    break
                t *= 0.5
            else:
                raise LaplaceConvergenceError(float(np.max(np.abs(grad))))
            x, val, grad, curv = cand, cval, cgrad, ccurv
            if np.max(np.abs(grad)) < NEWTON_GRAD_TOL:
                break
        else:
            raise LaplaceConvergenceError(float(np.max(np.abs(grad))))
        f = cholesky_values(self.symbolic, prior_vals + self._pairs.values(curv), reuse)
        logm = val + 0.5 * prior_logdet - 0.5 * f.logdet
        return GaussianApprox(x, f, float(logm), it)

    def log_posterior(self, theta) -> float:
        """Transformed-scale log posterior (up to a constant); -inf on numerical failure."""
        try:
            hyper = self.theta_to_hyper(theta)
            post = self.posterior(hyper, reuse=True)
        except (ValueError, NotPositiveDefiniteError, LaplaceConvergenceError, FloatingPointError, OverflowError):
            return -math.inf
        out = post.log_marginal + log_prior(hyper, self.priors, self.basis, transformed=True)
        return out if math.isfinite(out) else -math.inf

    def implied_cov(self, hyper: HyperParams, distances, center=None, direction=(1.0, 0.0)):
        """Covariance and correlation of the spatial field between ``center`` and
        ``center + d * direction`` for each distance d."""
        c0 = self.basis.domain.center if center is None else np.asarray(center, dtype=float)
        e = np.asarray(direction, dtype=float)
        e = e / np.linalg.norm(e)
        d = np.asarray(distances, dtype=float).ravel()
        pts = np.vstack([c0[None, :], c0[None, :] + d[:, None] * e[None, :]])
        if not np.all(self.basis.covers(pts)):
            raise ValueError("distances reach outside the buffered lattice")
        f = cholesky(joint_precision(self.basis, hyper, self.splines))
        Arows = basis_matrix(self.basis, pts)
        X = solve(f, Arows.T.toarray())
        K = Arows @ X
        cov = K[0, 1:]
        var = np.diag(K)[1:]
        return cov, cov / np.sqrt(K[0, 0] * var)

    def default_init(self) -> HyperParams:
        """Data-driven starting values."""
        L = self.L
        medians = self.priors.range_medians(self.basis, self.scheme)
        if self.family == "gaussian":
            v = float(np.var(self.data.y)) or 1.0
            return HyperParams(0.8 * v, tuple([1.0 / L] * L), tuple(medians), 0.2 * v, self.scheme)
        return HyperParams(1.0, tuple([1.0 / L] * L), tuple(medians), 0.1, self.scheme)
