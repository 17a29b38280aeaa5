"""Shared builders for the test modules."""

import numpy as np

from elk.inference import FitResult, FitSettings
from elk.model import transform
from elk.precision import joint_precision
from elk.sparse_la import cholesky, sample_gmrf


def fixed_fit(model, hyper, n=1):
    """A FitResult pinned at ``hyper`` (every hyper sample equal to it)."""
    theta = transform(hyper)
    return FitResult(
        mode_theta=theta,
        hessian=np.eye(len(theta)),
        theta_samples=np.tile(theta, (n, 1)),
        log_post_mode=0.0,
        log_post_init=0.0,
        n_evals=0,
        converged=True,
        ridge_degenerate=False,
        scheme=hyper.scheme,
        L=hyper.L,
        settings=FitSettings(n_hyper_samples=n),
    )


def simulate_from_model(basis, hyper, locs, rng, intercept=0.0):
    """Field and noisy responses drawn from the lattice prior itself."""
    from elk.geometry import basis_matrix

    f = cholesky(joint_precision(basis, hyper))
    c = sample_gmrf(f, np.zeros(basis.total_m), rng)
    u = basis_matrix(basis, locs) @ c + intercept
    return u, u + rng.normal(0, np.sqrt(hyper.sigma2_N), len(u))
