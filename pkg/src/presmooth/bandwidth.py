"""Adaptive selection of the smoothing parameter for the pre-smoothed update.

For each update the smoothing parameter b is chosen to minimize a computable
proxy for the mean squared error of the marginal-likelihood estimate p(y):

    Cbar(b) = (rho_B_hat(b) - rho_B)^2 + rho_V1(b) + rho_V2(b).

The proxy treats the swarm moments entering the shrunk kernel as independent
random quantities distributed as moments of an n-sample from a Gaussian
(mean ~ N(mu, S/n), covariance ~ Wishart(S, n-1)/n), and evaluates the
resulting mean and variance of p(y) under two pilot densities fitted to the
swarm: a Gaussian variance pilot N(mu, S) and a two-component Gaussian
mixture bias pilot (a Gaussian bias pilot would make the bias proxy vanish
asymptotically for every b, hence the mixture).

The building blocks are four closed-form functionals of a covariance slot
Sigma (always the swarm covariance in production; the slot stays explicit so
oracle tests can evaluate them at Wishart draws).  With a = 1 - b,
g' = 1 - b^2, S_* = M Sigma_* M^T and W denoting the random update weight
N(y | M(a*mean + b*x), obs_cov + g' M Sigma M^T):

    mean_weight_bias   E[W],   x ~ bias pilot
    mean_weight        E[W],   x ~ variance pilot
    mean_square_weight E[W^2], x ~ variance pilot
    square_mean_weight E[(E[W | mean draw])^2], x ~ variance pilot

All four are Gaussian densities in y (mean_square_weight and
square_mean_weight carry an extra determinant factor from squaring), so a
criterion evaluation is O(1) after the pilots are fitted.  The variance of
mean_weight over the Wishart covariance draw is handled by a delta rule
through the scaled gradient

    weight_grad_matrix = (M' F^-1 ybar)(M' F^-1 ybar)' - M' F^-1 M,
    F = obs_cov + (1 + a^2/n) M S M^T,  ybar = y - M mu.

Everything is computed in log space and combined under a fixed per-context
rescaling, so selection stays well conditioned when a tail observation
pushes all densities below the double-precision floor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize_scalar

from .exceptions import InsufficientSampleError, SingularCovarianceError
from .gauss import LOG_2PI, chol_lower, chol_solve, _solve_lower
from .rng import RngStream
from .ssm import Swarm, swarm_moments

LOG_4PI = math.log(4.0 * math.pi)


@dataclass(frozen=True)
class VariancePilot:
    """Gaussian pilot with the swarm's mean and covariance."""

    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class BiasPilot:
    """Two-component Gaussian mixture pilot fitted by a few EM iterations."""

    weights: np.ndarray   # (2,)
    means: np.ndarray     # (2, d)
    covs: np.ndarray      # (2, d, d)
    fallback: bool = False

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (2,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("bias pilot weights must be two nonnegative values summing to 1")


@dataclass
class BandwidthOptions:
    """Knobs of the selection procedure; defaults follow the filter defaults.

    em_subsample bounds the EM cost for large swarms; None fits on all
    particles.  tol_b and max_evals control the bounded scalar search.
    """

    em_iters: int = 4
    em_subsample: Optional[int] = 2000
    tol_b: float = 1e-3
    max_evals: int = 100


# ---------------------------------------------------------------------------
# pilot fitting


def _kmeanspp_pair(points: np.ndarray, gen: np.random.Generator) -> tuple[int, int]:
    m = points.shape[0]
    i0 = int(gen.integers(m))
    d2 = np.sum((points - points[i0]) ** 2, axis=1)
    total = d2.sum()
    if total <= 0.0:
        i1 = int(gen.integers(m))
    else:
        i1 = int(gen.choice(m, p=d2 / total))
    return i0, i1


def fit_bias_pilot(
    swarm: Swarm,
    em_iters: int = 4,
    subsample: Optional[int] = 2000,
    rng: Optional[RngStream] = None,
) -> BiasPilot:
    """Fit the two-component mixture pilot with a few EM iterations.

    No convergence is required or checked; the point of the pilot is a rough
    non-Gaussian summary, not a maximum-likelihood fit.  A component whose
    covariance loses positive definiteness is re-seeded from the swarm
    moments with inflated covariance; a second collapse returns the
    single-component fallback (weight 1 on the variance pilot).
    """
    if em_iters < 1:
        raise ValueError(f"em_iters must be >= 1, got {em_iters}")
    if swarm.n < 4:
        raise InsufficientSampleError(f"pilot fit needs n >= 4, got {swarm.n}")
    gen = (rng or RngStream(0)).generator()
    pts = swarm.particles
    if subsample is not None and subsample < swarm.n:
        idx = gen.choice(swarm.n, size=subsample, replace=False)
        pts = pts[idx]
    m, d = pts.shape
    mu = pts.mean(axis=0)
    dev = pts - mu
    sigma = dev.T @ dev / m
    sigma = 0.5 * (sigma + sigma.T)

    def fallback() -> BiasPilot:
        return BiasPilot(
            weights=np.array([1.0, 0.0]),
            means=np.stack([mu, mu]),
            covs=np.stack([sigma, sigma]),
            fallback=True,
        )

    i0, i1 = _kmeanspp_pair(pts, gen)
    means = np.stack([pts[i0], pts[i1]])
    covs = np.stack([sigma.copy(), sigma.copy()])
    weights = np.array([0.5, 0.5])
    collapses = 0

    for _ in range(em_iters):
        log_resp = np.empty((m, 2))
        retry = True
        while retry:
            retry = False
            for l in range(2):
                try:
                    lo = chol_lower(covs[l], name=f"bias pilot component {l}")
                except SingularCovarianceError:
                    collapses += 1
                    if collapses >= 2:
                        return fallback()
                    means[l] = mu
                    covs[l] = 2.0 * sigma
                    retry = True
                    break
                z = _solve_lower(lo, (pts - means[l]).T)
                quad = np.einsum("ij,ij->j", z, z)
                with np.errstate(divide="ignore"):
                    log_resp[:, l] = (
                        math.log(weights[l]) if weights[l] > 0 else -math.inf
                    ) - 0.5 * (d * LOG_2PI + quad) - np.log(np.diag(lo)).sum()
        shift = log_resp.max(axis=1, keepdims=True)
        resp = np.exp(log_resp - shift)
        resp /= resp.sum(axis=1, keepdims=True)
        counts = resp.sum(axis=0)
        if counts.min() < 1e-10 * m:
            collapses += 1
            if collapses >= 2:
                return fallback()
            l = int(counts.argmin())
            means[l] = mu
            covs[l] = 2.0 * sigma
            weights = np.array([0.5, 0.5])
            continue
        weights = counts / m
        for l in range(2):
            means[l] = resp[:, l] @ pts / counts[l]
            dv = pts - means[l]
            covs[l] = (dv.T * resp[:, l]) @ dv / counts[l]
            covs[l] = 0.5 * (covs[l] + covs[l].T)

    return BiasPilot(weights=weights, means=means, covs=covs)


# ---------------------------------------------------------------------------
# criterion context and closed forms


def _scalar_log_normal(y: float, mean: float, var: float, what: str) -> float:
    if var <= 0.0:
        raise SingularCovarianceError(what, f"variance {var:g} not positive")
    r = y - mean
    return -0.5 * (LOG_2PI + math.log(var) + r * r / var)


def _log_add(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    m = a if a > b else b
    return m + math.log(math.exp(a - m) + math.exp(b - m))


class CriterionContext:
    """Precomputed quantities for evaluating the selection criterion.

    Holds the observation, measurement geometry, swarm size and both pilots;
    projects every state-space covariance once into observation space.  For
    scalar observations all evaluations run on plain floats, which keeps the
    per-step selection cost negligible inside long filter runs.
    """

    def __init__(
        self,
        mean: np.ndarray,
        cov: np.ndarray,
        n: int,
        y: np.ndarray,
        meas_matrix: np.ndarray,
        obs_cov: np.ndarray,
        bias_pilot: BiasPilot,
    ):
        if n < 2:
            raise InsufficientSampleError(f"criterion needs n >= 2, got {n}")
        self.n = int(n)
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.cov = np.atleast_2d(np.asarray(cov, dtype=float))
        self.y = np.atleast_1d(np.asarray(y, dtype=float))
        self.meas_matrix = np.atleast_2d(np.asarray(meas_matrix, dtype=float))
        self.obs_cov = np.atleast_2d(np.asarray(obs_cov, dtype=float))
        self.pilot = bias_pilot
        self.variance_pilot = VariancePilot(self.mean, self.cov)
        M = self.meas_matrix
        self.dim_obs = M.shape[0]
        self.scalar = self.dim_obs == 1
        self._proj_cov = self.project(self.cov)
        self._proj_mean = self._project_mean(self.mean)
        self._proj_l_mean = [self._project_mean(mm) for mm in bias_pilot.means]
        self._proj_l_cov = [self.project(cc) for cc in bias_pilot.covs]
        if self.scalar:
            self._y0 = float(self.y[0])
            self._se = float(self.obs_cov[0, 0])
            if self._se <= 0.0:
                raise SingularCovarianceError("obs_cov", "variance not positive")
            self._sx = float(self._proj_cov)
            self._mx = float(self._proj_mean)
        # reference log-scale: swarm-Gaussian predictive density of y
        base = self._se if self.scalar else self.obs_cov
        self.log_scale = self._log_normal_obs(base + self._proj_cov, self._proj_mean)
        self.log_rho_b = self._compute_log_rho_b()

    # -- projection helpers ------------------------------------------------

    def project(self, cov_slot):
        """Map a state-space covariance to observation space: M C M^T."""
        cov_slot = np.atleast_2d(np.asarray(cov_slot, dtype=float))
        out = self.meas_matrix @ cov_slot @ self.meas_matrix.T
        if self.dim_obs == 1:
            return float(out[0, 0])
        return 0.5 * (out + out.T)

    def _project_mean(self, mean):
        out = self.meas_matrix @ np.atleast_1d(np.asarray(mean, dtype=float))
        if self.dim_obs == 1:
            return float(out[0])
        return out

    def _log_normal_obs(self, var, mean) -> float:
        if self.scalar:
            return _scalar_log_normal(self._y0, mean, var, "composite covariance")
        var = 0.5 * (var + var.T)
        lo = chol_lower(var, name="composite covariance")
        z = _solve_lower(lo, self.y - mean)
        return float(-0.5 * (self.dim_obs * LOG_2PI + z @ z) - np.log(np.diag(lo)).sum())

    def _logdet_obs(self, var) -> float:
        if self.scalar:
            if var <= 0.0:
                raise SingularCovarianceError("composite covariance", "not positive")
            return math.log(var)
        lo = chol_lower(0.5 * (var + var.T), name="composite covariance")
        return float(2.0 * np.log(np.diag(lo)).sum())

    def _compute_log_rho_b(self) -> float:
        total = -math.inf
        for q, pm, pc in zip(self.pilot.weights, self._proj_l_mean, self._proj_l_cov):
            if q <= 0.0:
                continue
            if self.scalar:
                lg = _scalar_log_normal(self._y0, pm, self._se + pc, "rho_B covariance")
            else:
                lg = self._log_normal_obs(self.obs_cov + pc, pm)
            total = _log_add(total, math.log(q) + lg)
        return total

    # -- log closed forms ---------------------------------------------------

    def log_mean_weight(self, b: float, proj_slot) -> float:
        a = 1.0 - b
        gp = 1.0 - b * b
        coef = b * b + a * a / self.n
        if self.scalar:
            var = self._se + coef * self._sx + gp * proj_slot
            return _scalar_log_normal(self._y0, self._mx, var, "mean_weight covariance")
        var = self.obs_cov + coef * self._proj_cov + gp * proj_slot
        return self._log_normal_obs(var, self._proj_mean)

    def log_mean_weight_bias(self, b: float, proj_slot) -> float:
        a = 1.0 - b
        gp = 1.0 - b * b
        base = a * a / self.n
        total = -math.inf
        for q, pm, pc in zip(self.pilot.weights, self._proj_l_mean, self._proj_l_cov):
            if q <= 0.0:
                continue
            if self.scalar:
                var = self._se + b * b * pc + base * self._sx + gp * proj_slot
                mean = a * self._mx + b * pm
                lg = _scalar_log_normal(self._y0, mean, var, "mean_weight_bias covariance")
            else:
                var = self.obs_cov + b * b * pc + base * self._proj_cov + gp * proj_slot
                mean = a * self._proj_mean + b * pm
                lg = self._log_normal_obs(var, mean)
            total = _log_add(total, math.log(q) + lg)
        return total

    def log_mean_square_weight(self, b: float, proj_slot) -> float:
        a = 1.0 - b
        gp = 1.0 - b * b
        coef = b * b + a * a / self.n
        if self.scalar:
            var = 0.5 * self._se + coef * self._sx + 0.5 * gp * proj_slot
            lg = _scalar_log_normal(self._y0, self._mx, var, "mean_square_weight covariance")
            logdet = math.log(self._se + gp * proj_slot)
        else:
            var = 0.5 * self.obs_cov + coef * self._proj_cov + 0.5 * gp * proj_slot
            lg = self._log_normal_obs(var, self._proj_mean)
            logdet = self._logdet_obs(self.obs_cov + gp * proj_slot)
        return lg - 0.5 * self.dim_obs * LOG_4PI - 0.5 * logdet

    def log_square_mean_weight(self, b: float, proj_slot) -> float:
        a = 1.0 - b
        gp = 1.0 - b * b
        coef = 0.5 * b * b + a * a / self.n
        if self.scalar:
            var = 0.5 * self._se + coef * self._sx + 0.5 * gp * proj_slot
            lg = _scalar_log_normal(self._y0, self._mx, var, "square_mean_weight covariance")
            logdet = math.log(self._se + b * b * self._sx + gp * proj_slot)
        else:
            var = 0.5 * self.obs_cov + coef * self._proj_cov + 0.5 * gp * proj_slot
            lg = self._log_normal_obs(var, self._proj_mean)
            logdet = self._logdet_obs(self.obs_cov + b * b * self._proj_cov + gp * proj_slot)
        return lg - 0.5 * self.dim_obs * LOG_4PI - 0.5 * logdet

    def grad_trace_term(self, b: float) -> float:
        """tr[(weight_grad_matrix(b) @ swarm_cov)^2], used by the delta rule."""
        a = 1.0 - b
        fcoef = 1.0 + a * a / self.n
        if self.scalar:
            F = self._se + fcoef * self._sx
            ybar = self._y0 - self._mx
            c = (ybar * ybar - F) / (F * F)
            return c * c * self._sx * self._sx
        mat = self.weight_grad_matrix(b) @ self.cov
        return float(np.einsum("ij,ji->", mat, mat))

    def weight_grad_matrix(self, b: float) -> np.ndarray:
        """The d_x x d_x matrix (M'F^-1 ybar)(M'F^-1 ybar)' - M'F^-1 M."""
        a = 1.0 - b
        M = self.meas_matrix
        F = self.obs_cov + (1.0 + a * a / self.n) * np.atleast_2d(self._proj_cov)
        F = 0.5 * (F + F.T)
        ybar = self.y - np.atleast_1d(self._proj_mean)
        lo = chol_lower(F, name="F")
        u = M.T @ chol_solve(lo, ybar)
        return np.outer(u, u) - M.T @ chol_solve(lo, M)

    # -- criterion pieces, in units of exp(2 * log_scale) -------------------

    def scaled_parts(self, b: float) -> tuple[float, float, float]:
        """(squared bias, variance part 1, variance part 2), rescaled."""
        L = self.log_scale
        slot = self._proj_cov
        e1 = math.exp(self.log_mean_weight(b, slot) - L)
        e2 = math.exp(self.log_mean_square_weight(b, slot) - 2.0 * L)
        e3 = math.exp(self.log_square_mean_weight(b, slot) - 2.0 * L)
        rv1 = max(e3 - e1 * e1, 0.0) + max(e2 - e3, 0.0) / self.n
        gp = 1.0 - b * b
        rv2 = e1 * e1 * gp * gp * self.grad_trace_term(b) / (2.0 * self.n)
        bias = math.exp(self.log_mean_weight_bias(b, slot) - L) - math.exp(
            self.log_rho_b - L
        )
        return bias * bias, rv1, rv2

    def scaled_criterion(self, b: float) -> float:
        bsq, rv1, rv2 = self.scaled_parts(b)
        return bsq + rv1 + rv2

    def natural(self, scaled_value: float, power: int = 2) -> float:
        """Undo the rescaling; densities use power 1, criteria power 2."""
        return scaled_value * math.exp(power * self.log_scale)


def criterion_context(
    swarm: Swarm,
    y,
    meas_matrix,
    obs_cov,
    opts: Optional[BandwidthOptions] = None,
    rng: Optional[RngStream] = None,
) -> CriterionContext:
    """Fit pilots on a swarm and assemble the evaluation context."""
    opts = opts or BandwidthOptions()
    mean, cov = swarm_moments(swarm)
    pilot = fit_bias_pilot(swarm, em_iters=opts.em_iters, subsample=opts.em_subsample, rng=rng)
    return CriterionContext(mean, cov, swarm.n, y, meas_matrix, obs_cov, pilot)


# -- public closed-form evaluators (natural scale) -------------------------


def mean_weight_bias(b: float, cov_slot, ctx: CriterionContext) -> float:
    """Expected update weight when particles follow the bias pilot."""
    return math.exp(ctx.log_mean_weight_bias(b, ctx.project(cov_slot)))


def mean_weight(b: float, cov_slot, ctx: CriterionContext) -> float:
    """Expected update weight when particles follow the variance pilot."""
    return math.exp(ctx.log_mean_weight(b, ctx.project(cov_slot)))


def mean_square_weight(b: float, cov_slot, ctx: CriterionContext) -> float:
    """Expected squared update weight under the variance pilot."""
    return math.exp(ctx.log_mean_square_weight(b, ctx.project(cov_slot)))


def square_mean_weight(b: float, cov_slot, ctx: CriterionContext) -> float:
    """Expectation of the squared mean-draw-conditional weight."""
    return math.exp(ctx.log_square_mean_weight(b, ctx.project(cov_slot)))


def practical_bias_sq(b: float, ctx: CriterionContext) -> float:
    """Plug-in squared bias of the marginal-likelihood estimate."""
    bsq, _, _ = ctx.scaled_parts(b)
    return ctx.natural(bsq)


def practical_variance(b: float, ctx: CriterionContext) -> float:
    """Approximate variance of the marginal-likelihood estimate."""
    _, rv1, rv2 = ctx.scaled_parts(b)
    return ctx.natural(rv1 + rv2)


def criterion(b: float, ctx: CriterionContext) -> float:
    """The selection criterion Cbar(b) = squared bias + variance proxy."""
    if not (0.0 <= b <= 1.0):
        raise ValueError(f"b must lie in [0, 1], got {b}")
    return ctx.natural(ctx.scaled_criterion(b))


# ---------------------------------------------------------------------------
# selection


@dataclass(frozen=True)
class SelectionDiagnostics:
    b: float
    criterion: float          # natural scale; underflows to 0.0 in deep tails
    criterion_scaled: float
    bias_sq: float
    variance: float
    log_scale: float
    n_evals: int
    pilot_fallback: bool


def select_bandwidth(
    swarm: Swarm,
    y,
    meas_matrix,
    obs_cov,
    opts: Optional[BandwidthOptions] = None,
    rng: Optional[RngStream] = None,
) -> tuple[float, SelectionDiagnostics]:
    """Choose the smoothing parameter minimizing the criterion over [0, 1].

    Runs the pilot fits, a bounded scalar minimization (absolute tolerance
    ``opts.tol_b``, at most ``opts.max_evals`` evaluations), then compares
    the interior minimizer against both endpoints, which the bounded search
    cannot return exactly.
    """
    if swarm.n < 4:
        raise InsufficientSampleError(f"selection needs n >= 4, got {swarm.n}")
    opts = opts or BandwidthOptions()
    ctx = criterion_context(swarm, y, meas_matrix, obs_cov, opts, rng)

    evals = [0]

    def objective(b: float) -> float:
        evals[0] += 1
        return ctx.scaled_criterion(min(max(b, 0.0), 1.0))

    res = minimize_scalar(
        objective,
        bounds=(0.0, 1.0),
        method="bounded",
        options={"xatol": opts.tol_b, "maxiter": opts.max_evals},
    )
    candidates = [0.0, float(res.x), 1.0]
    values = [objective(c) for c in candidates]
    best = int(np.argmin(values))
    b_star = candidates[best]
    bsq, rv1, rv2 = ctx.scaled_parts(b_star)
    diag = SelectionDiagnostics(
        b=b_star,
        criterion=ctx.natural(values[best]),
        criterion_scaled=values[best],
        bias_sq=ctx.natural(bsq),
        variance=ctx.natural(rv1 + rv2),
        log_scale=ctx.log_scale,
        n_evals=evals[0],
        pilot_fallback=ctx.pilot.fallback,
    )
    return b_star, diag
