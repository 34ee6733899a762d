"""Exact Kalman-filter likelihoods for linear Gaussian reference models.

Used as the ground truth the particle filters are benchmarked against.
Supports a Gaussian initial law and, for globally non-Gaussian models whose
only non-Gaussianity is a finite mixture at t = 0, the exact mixture
likelihood obtained by one Kalman pass per initial component.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .gauss import gaussian_logpdf


@dataclass(frozen=True)
class LinearGaussianSSM:
    """x_t = A x_{t-1} + w_t, w_t ~ N(0, Q);  y_t = M x_t + e_t, e_t ~ N(0, R)."""

    trans_matrix: np.ndarray
    trans_cov: np.ndarray
    meas_matrix: np.ndarray
    obs_cov: np.ndarray
    init_mean: np.ndarray
    init_cov: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.trans_matrix, dtype=float))
        d = A.shape[0]
        object.__setattr__(self, "trans_matrix", A)
        object.__setattr__(self, "trans_cov", np.atleast_2d(np.asarray(self.trans_cov, dtype=float)))
        object.__setattr__(self, "meas_matrix", np.atleast_2d(np.asarray(self.meas_matrix, dtype=float)))
        object.__setattr__(self, "obs_cov", np.atleast_2d(np.asarray(self.obs_cov, dtype=float)))
        object.__setattr__(self, "init_mean", np.atleast_1d(np.asarray(self.init_mean, dtype=float)))
        object.__setattr__(self, "init_cov", np.atleast_2d(np.asarray(self.init_cov, dtype=float)))
        dy = self.meas_matrix.shape[0]
        if A.shape != (d, d) or self.trans_cov.shape != (d, d):
            raise ValueError("transition matrices must be square and consistent")
        if self.meas_matrix.shape[1] != d:
            raise ValueError(
                f"meas_matrix shape {self.meas_matrix.shape} inconsistent with state dim {d}"
            )
        if self.obs_cov.shape != (dy, dy):
            raise ValueError(f"obs_cov shape {self.obs_cov.shape} != ({dy}, {dy})")
        if self.init_mean.shape != (d,) or self.init_cov.shape != (d, d):
            raise ValueError("initial law dimensions inconsistent with state dim")

    @property
    def dim_state(self) -> int:
        return self.trans_matrix.shape[0]

    @property
    def dim_obs(self) -> int:
        return self.meas_matrix.shape[0]


@dataclass(frozen=True)
class InitialMixture:
    """Finite Gaussian mixture initial law: weights (k,), means (k, d), covs (k, d, d)."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        object.__setattr__(self, "means", np.atleast_2d(np.asarray(self.means, dtype=float)))
        object.__setattr__(self, "covs", np.asarray(self.covs, dtype=float))
        k = self.weights.size
        if self.means.shape[0] != k or self.covs.shape[0] != k:
            raise ValueError("mixture component counts disagree")
        if abs(self.weights.sum() - 1.0) > 1e-12 * max(1.0, k):
            raise ValueError("initial mixture weights must sum to 1")


def kalman_loglik(model: LinearGaussianSSM, obs: np.ndarray) -> float:
    """Exact log p(Y_T) from the standard Kalman recursion."""
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    if obs.shape[1] != model.dim_obs:
        raise ValueError(f"obs has {obs.shape[1]} columns, model expects {model.dim_obs}")
    A, Q = model.trans_matrix, model.trans_cov
    M, R = model.meas_matrix, model.obs_cov
    mean, cov = model.init_mean, model.init_cov
    loglik = 0.0
    for y in obs:
        mean = A @ mean
        cov = A @ cov @ A.T + Q
        cov = 0.5 * (cov + cov.T)
        innov_cov = M @ cov @ M.T + R
        innov_cov = 0.5 * (innov_cov + innov_cov.T)
        resid = y - M @ mean
        loglik += gaussian_logpdf(y, M @ mean, innov_cov, name="innovation cov")
        gain = np.linalg.solve(innov_cov, M @ cov).T
        mean = mean + gain @ resid
        cov = cov - gain @ M @ cov
        cov = 0.5 * (cov + cov.T)
    return float(loglik)


def kalman_mixture_loglik(
    model: LinearGaussianSSM, init_mixture: InitialMixture, obs: np.ndarray
) -> float:
    """Exact log p(Y_T) when the t=0 law is a finite Gaussian mixture.

    Runs one Kalman pass conditioned on each initial component and combines
    log q_k + log p(Y_T | component k) with log-sum-exp.
    """
    parts = []
    for q, m0, c0 in zip(init_mixture.weights, init_mixture.means, init_mixture.covs):
        sub = LinearGaussianSSM(
            trans_matrix=model.trans_matrix,
            trans_cov=model.trans_cov,
            meas_matrix=model.meas_matrix,
            obs_cov=model.obs_cov,
            init_mean=m0,
            init_cov=c0,
        )
        parts.append(np.log(q) + kalman_loglik(sub, obs) if q > 0 else -np.inf)
    return float(logsumexp(parts))
