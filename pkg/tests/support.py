"""Shared builders for the chained-model tests.

The collapse construction turns a homoscedastic exact-GPR posterior into
an equivalent chained model: the mean latent carries the exact posterior
at Z = X and the variance latent is pinned to the constant log noise
variance with a vanishing kernel, so the bound should sit just below the
exact log marginal likelihood.
"""

import math

import numpy as np

from hetgp.chained import KZZ_JITTER_REL, ChainedGpModel, LatentSparseGp
from hetgp.kernels import KernelParams, kernel_matrix, stable_cholesky


def collapse_model(X, y, params, noise_variance, mean_const=0.0):
    """Chained model equivalent to an exact GPR posterior on (X, y)."""
    n = X.shape[0]
    K = kernel_matrix(params, X, X)
    Kj = K + KZZ_JITTER_REL * params.signal_variance * np.eye(n)
    Ky = K + noise_variance * np.eye(n)
    sol = np.linalg.solve(Ky, K)
    mu = mean_const + K @ np.linalg.solve(Ky, y - mean_const)
    S = Kj - K @ sol
    S = 0.5 * (S + S.T)
    latent_f = LatentSparseGp(params, mean_const, X.copy(), mu, stable_cholesky(S, 0.0))

    log_noise = math.log(noise_variance)
    params_g = KernelParams(np.ones(X.shape[1]), 1e-12)
    Kg = kernel_matrix(params_g, X, X)
    Kg += KZZ_JITTER_REL * params_g.signal_variance * np.eye(n)
    latent_g = LatentSparseGp(
        params_g, log_noise, X.copy(), np.full(n, log_noise), stable_cholesky(Kg, 0.0)
    )
    return ChainedGpModel(latent_f, latent_g)
