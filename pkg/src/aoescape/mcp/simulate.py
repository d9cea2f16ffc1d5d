"""Correlated-Gaussian sparse regression benchmark (SparseNet model M1)."""

from __future__ import annotations

import numpy as np

from ..data import standardize


def ar1_covariance(d, rho=0.7):
    idx = np.arange(d)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def ar1_design(n, d, rho, rng):
    """Rows drawn from N(0, Sigma) with ``Sigma_jk = rho^|j-k|``."""
    L = np.linalg.cholesky(ar1_covariance(d, rho))
    return rng.standard_normal((n, d)) @ L.T


def m1_coefficients(d=200):
    beta = np.zeros(d)
    beta[0:181:20] = 1.0
    return beta


def m1_noise_sd(beta, rho=0.7, snr=3.0):
    sigma = ar1_covariance(beta.size, rho)
    return float(np.sqrt(beta @ sigma @ beta) / snr)


def simulate_M1(n=100, d=200, seed=0, rho=0.7, snr=3.0):
    """Draw one M1 data set and standardize it.

    Ten unit coefficients sit at 0-based positions 0, 20, ..., 180 and the
    noise level gives signal-to-noise ratio ``snr``. Returns
    ``(problem, beta_true)``.
    """
    if d < 181:
        raise ValueError("M1 needs d >= 181")
    rng = np.random.default_rng(seed)
    X = ar1_design(n, d, rho, rng)
    beta = m1_coefficients(d)
    sigma = m1_noise_sd(beta, rho, snr)
    y = X @ beta + sigma * rng.standard_normal(n)
    return standardize(y, X), beta
