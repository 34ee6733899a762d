"""Dense Gaussian primitives: SPD factorizations, log-densities, mixtures.

All covariance handling funnels through :func:`chol_lower`, which applies a
single jitter retry (1e-10 * trace/dim added to the diagonal) before raising
:class:`SingularCovarianceError`.  Mixture log-density accumulation always
goes through log-sum-exp; raw component weights can underflow far below the
double-precision floor in high signal-to-noise settings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .exceptions import SingularCovarianceError

LOG_2PI = float(np.log(2.0 * np.pi))

_JITTER_REL = 1e-10


def chol_lower(cov: np.ndarray, name: str = "cov") -> np.ndarray:
    """Lower Cholesky factor of an SPD matrix, with one jitter retry."""
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise SingularCovarianceError(name, f"expected square matrix, got shape {cov.shape}")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    d = cov.shape[0]
    jitter = _JITTER_REL * np.trace(cov) / d
    try:
        return np.linalg.cholesky(cov + jitter * np.eye(d))
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError(name, str(exc)) from exc


def psd_factor(cov: np.ndarray, name: str = "cov") -> np.ndarray:
    """Matrix A with A @ A.T = cov, valid for merely PSD input.

    Cholesky when possible, otherwise an eigenvalue factorization with
    negative eigenvalues clipped at zero (needed for the zero-covariance
    point-mass limit of the shrunk kernel).
    """
    cov = np.asarray(cov, dtype=float)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
        if vals.size and vals.min() < -1e-8 * max(vals.max(), 1.0):
            raise SingularCovarianceError(name, f"eigenvalue {vals.min():g} too negative")
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def _solve_lower(lo: np.ndarray, b: np.ndarray) -> np.ndarray:
    from scipy.linalg import solve_triangular

    return solve_triangular(lo, b, lower=True)


def chol_solve(lo: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve (lo @ lo.T) x = b given the lower Cholesky factor."""
    from scipy.linalg import solve_triangular

    y = solve_triangular(lo, b, lower=True)
    return solve_triangular(lo.T, y, lower=False)


def gaussian_logpdf(x, mean, cov, name: str = "cov") -> float:
    """log N(x | mean, cov) via Cholesky, exact up to floating point."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if x.shape != mean.shape or cov.shape != (x.size, x.size):
        raise ValueError(
            f"shape mismatch: x {x.shape}, mean {mean.shape}, cov {cov.shape}"
        )
    lo = chol_lower(cov, name=name)
    w = _solve_lower(lo, x - mean)
    return float(-0.5 * (x.size * LOG_2PI + w @ w) - np.log(np.diag(lo)).sum())


def gaussian_logpdf_rows(points: np.ndarray, mean, cov, name: str = "cov") -> np.ndarray:
    """log N(row | mean, cov) for each row of ``points`` under one shared cov.

    By symmetry in (x - mean) this also evaluates one observation against
    many component means: pass the means as ``points`` and the observation
    as ``mean``.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    d = points.shape[1]
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if mean.size != d or cov.shape != (d, d):
        raise ValueError(f"shape mismatch: points {points.shape}, mean {mean.shape}, cov {cov.shape}")
    if d == 1:
        v = float(cov[0, 0])
        if v <= 0.0:
            # the relative jitter of chol_lower cannot rescue a scalar
            raise SingularCovarianceError(name, f"variance {v:g} not positive")
        r = points[:, 0] - mean[0]
        return -0.5 * (LOG_2PI + np.log(v) + r * r / v)
    lo = chol_lower(cov, name=name)
    resid = points - mean
    w = _solve_lower(lo, resid.T)
    quad = np.einsum("ij,ij->j", w, w)
    return -0.5 * (d * LOG_2PI + quad) - np.log(np.diag(lo)).sum()


def log_mean_exp(logs: np.ndarray, weights=None) -> float:
    """log of the (weighted) mean of exp(logs), stable against underflow."""
    logs = np.asarray(logs, dtype=float)
    if weights is None:
        return float(logsumexp(logs) - np.log(logs.size))
    return float(logsumexp(logs, b=np.asarray(weights, dtype=float)))


@dataclass(frozen=True)
class GaussianComponent:
    weight: float
    mean: np.ndarray


class HomoskedasticGaussianMixture:
    """A weighted Gaussian mixture whose components share one covariance.

    Parameters
    ----------
    means : (n, d) array
        Component means.
    weights : (n,) array
        Nonnegative weights summing to 1 (validated to 1e-12).
    common_cov : (d, d) array
        Shared component covariance; symmetric PSD (eigenvalues may dip to
        -1e-12 * trace to allow for floating-point noise).
    """

    def __init__(self, means, weights, common_cov):
        means = np.atleast_2d(np.asarray(means, dtype=float))
        weights = np.asarray(weights, dtype=float)
        cov = np.atleast_2d(np.asarray(common_cov, dtype=float))
        n, d = means.shape
        if weights.shape != (n,):
            raise ValueError(f"weights shape {weights.shape} != ({n},)")
        if cov.shape != (d, d):
            raise ValueError(f"common_cov shape {cov.shape} != ({d}, {d})")
        if np.any(weights < 0.0):
            raise ValueError("mixture weights must be nonnegative")
        total = weights.sum()
        if abs(total - 1.0) > 1e-12 * max(1.0, n):
            raise ValueError(f"mixture weights sum to {total!r}, expected 1")
        if not np.allclose(cov, cov.T, atol=1e-12 * max(1.0, abs(np.trace(cov)))):
            raise ValueError("common_cov must be symmetric")
        eigs = np.linalg.eigvalsh(cov)
        if eigs.min() < -1e-12 * max(np.trace(cov), 1.0):
            raise SingularCovarianceError("common_cov", f"eigenvalue {eigs.min():g} < 0")
        self.means = means
        self.weights = weights
        self.common_cov = 0.5 * (cov + cov.T)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def components(self) -> list[GaussianComponent]:
        return [GaussianComponent(float(w), m.copy()) for w, m in zip(self.weights, self.means)]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def cov(self) -> np.ndarray:
        mu = self.mean()
        dev = self.means - mu
        return self.common_cov + (dev.T * self.weights) @ dev

    def marginal(self, coords) -> "HomoskedasticGaussianMixture":
        coords = np.atleast_1d(np.asarray(coords, dtype=int))
        return HomoskedasticGaussianMixture(
            self.means[:, coords],
            self.weights,
            self.common_cov[np.ix_(coords, coords)],
        )

    def logpdf(self, points: np.ndarray) -> np.ndarray:
        """Mixture log-density at each row of ``points`` (log-sum-exp over components)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        lo = chol_lower(self.common_cov, name="common_cov")
        logdet = 2.0 * np.log(np.diag(lo)).sum()
        d = self.dim
        # (m, n) residual tensor is fine at the sizes used here (n <= 1e4 on grids)
        diff = points[:, None, :] - self.means[None, :, :]
        w = _solve_lower(lo, diff.reshape(-1, d).T).T.reshape(diff.shape)
        quad = np.einsum("mnd,mnd->mn", w, w)
        comp_log = -0.5 * (d * LOG_2PI + logdet + quad)
        return logsumexp(comp_log, axis=1, b=self.weights[None, :])

    def pdf(self, points: np.ndarray) -> np.ndarray:
        return np.exp(self.logpdf(points))
