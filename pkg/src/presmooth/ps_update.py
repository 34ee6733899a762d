"""The shrunk-kernel prior estimate and the analytic pre-smoothed update.

Given a prior swarm x^(1..n) with moments (mu, S), the shrunk kernel estimate
is the equally weighted Gaussian mixture with component means

    m_i = (1 - b) mu + b x^(i)          and common covariance
    G   = (1 - b^2) S,

for a smoothing parameter b in [0, 1].  Its mean and covariance equal the
swarm moments exactly for every b, so no variance inflation occurs.  b = 1
recovers point masses at the particles (the SIR limit), b = 0 collapses to
the moment-matched Gaussian N(mu, S) (the Kalman/ensemble limit).

Updating the shrunk kernel against a linear Gaussian measurement
y ~ N(Mx, obs_cov) is exact and O(n) after one d_y x d_y factorization:

    W_i = N(y | M m_i, obs_cov + M G M^T),     p(y) est. = mean_i W_i,
    posterior = sum_i w_i N(x | m_i + Q (y - M m_i), G - Q M G),
    w_i = W_i / sum W,   Q = G M^T (obs_cov + M G M^T)^{-1}.

Nonlinear measurement means are accommodated by state augmentation: append
the noisy measurement value to the state and observe it linearly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .gauss import HomoskedasticGaussianMixture, chol_lower, _solve_lower, LOG_2PI
from .rng import RngStream
from .ssm import StateSpaceModel, Swarm, swarm_moments


@dataclass(frozen=True)
class ShrinkageParams:
    """Shrinkage coordinate b and its derived quantities.

    a = 1 - b weights the swarm mean in each component mean; g_prime = 1 - b^2
    is the shared-covariance multiplier.  The classical kernel bandwidth is
    h = sqrt(b^{-2} - 1) (infinite at b = 0), kept for reporting only.
    """

    b: float

    def __post_init__(self):
        if not (0.0 <= self.b <= 1.0):
            raise ValueError(f"smoothing parameter b must lie in [0, 1], got {self.b}")

    @property
    def a(self) -> float:
        return 1.0 - self.b

    @property
    def g_prime(self) -> float:
        return 1.0 - self.b * self.b

    @property
    def bandwidth(self) -> float:
        if self.b == 0.0:
            return math.inf
        return math.sqrt(1.0 / (self.b * self.b) - 1.0)


def shrunk_kernel(swarm: Swarm, b: float) -> HomoskedasticGaussianMixture:
    """Shrunk kernel density estimate of the swarm's underlying density."""
    p = ShrinkageParams(b)
    mean, cov = swarm_moments(swarm)
    means = p.a * mean + p.b * swarm.particles
    common = p.g_prime * cov
    weights = np.full(swarm.n, 1.0 / swarm.n)
    return HomoskedasticGaussianMixture(means, weights, common)


@dataclass(frozen=True)
class PsUpdateResult:
    """Output of one pre-smoothed Bayes update.

    ``raw_weights`` holds W_i in natural scale (these underflow to 0 in high
    signal-to-noise regimes; ``log_p_y`` is always finite), ``posterior`` the
    homoskedastic mixture representation of p(x | y), ``gain`` the shared
    Kalman-type gain applied to every component.
    """

    p_y: float
    log_p_y: float
    posterior: HomoskedasticGaussianMixture
    raw_weights: np.ndarray
    gain: np.ndarray


def ps_update(
    swarm: Swarm,
    y: np.ndarray,
    meas_matrix: np.ndarray,
    obs_cov: np.ndarray,
    b: float,
) -> PsUpdateResult:
    """Pre-smoothed update of a prior swarm against one observation.

    Parameters
    ----------
    swarm : Swarm
        Equally weighted prior sample (n >= 2).
    y : (d_y,) array
    meas_matrix : (d_y, d_x) array
    obs_cov : (d_y, d_y) SPD array
    b : float in [0, 1]
        Smoothing parameter; b = 1 reproduces the SIR weighting, b = 0 the
        Gaussian (Kalman) update of the swarm moments.
    """
    p = ShrinkageParams(b)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    M = np.atleast_2d(np.asarray(meas_matrix, dtype=float))
    R = np.atleast_2d(np.asarray(obs_cov, dtype=float))
    mean, cov = swarm_moments(swarm)
    means = p.a * mean + p.b * swarm.particles
    G = p.g_prime * cov

    MG = M @ G
    innov_cov = R + MG @ M.T
    innov_cov = 0.5 * (innov_cov + innov_cov.T)
    lo = chol_lower(innov_cov, name="obs_cov + M G M^T")
    logdet = 2.0 * np.log(np.diag(lo)).sum()

    resid = y - means @ M.T                       # (n, d_y)
    z = _solve_lower(lo, resid.T)                 # (d_y, n)
    quad = np.einsum("ij,ij->j", z, z)
    log_w = -0.5 * (y.size * LOG_2PI + logdet + quad)

    n = swarm.n
    log_p_y = float(logsumexp(log_w) - math.log(n))
    # normalized weights via shifted exponentials; safe when all W_i underflow
    shifted = np.exp(log_w - log_w.max())
    weights = shifted / shifted.sum()

    gain = np.linalg.solve(innov_cov, MG).T       # Q = G M^T innov^{-1}
    post_means = means + resid @ gain.T
    post_cov = G - gain @ MG
    post_cov = 0.5 * (post_cov + post_cov.T)
    posterior = HomoskedasticGaussianMixture(post_means, weights, post_cov)

    return PsUpdateResult(
        p_y=float(np.exp(log_p_y)),
        log_p_y=log_p_y,
        posterior=posterior,
        raw_weights=np.exp(log_w),
        gain=gain,
    )


def posterior_moments(result: PsUpdateResult) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the posterior mixture."""
    return result.posterior.mean(), result.posterior.cov()


DEFAULT_SPLIT = 1.0 / math.sqrt(2.0)


@dataclass(kw_only=True)
class AugmentedModel(StateSpaceModel):
    """Linear-measurement model induced by appending the noisy measurement
    value to the state.

    The measurement variance of the base model is split as
    split^2 * obs_cov (absorbed into the appended coordinate's transition
    noise) plus (1 - split^2) * obs_cov (remaining observation noise), so the
    law of the observations is unchanged.
    """

    base: StateSpaceModel
    split: float


def augment_model(model: StateSpaceModel, split: float = DEFAULT_SPLIT) -> AugmentedModel:
    """Turn a nonlinear-measurement model into a linear-measurement one.

    The state becomes x' = [x, m(x) + eta] with eta ~ N(0, split^2 * obs_cov)
    and the observation reads the appended block under noise covariance
    (1 - split^2) * obs_cov.  ``split`` strictly between 0 and 1; the default
    is the even split where both noise parts carry half the variance.
    """
    if not (0.0 < split < 1.0):
        raise ValueError(f"split must lie strictly in (0, 1), got {split}")
    if model.measurement_fn is None:
        raise ValueError("model has no measurement_fn to absorb into the state")
    dx, dy = model.dim_state, model.dim_obs
    r2 = split * split
    instr_noise_chol = chol_lower(r2 * model.obs_cov, name="split^2 * obs_cov")

    def _append_instrumental(base_states: np.ndarray, rng: RngStream) -> np.ndarray:
        z = rng.generator().standard_normal((base_states.shape[0], dy))
        instr = model.measurement_fn(base_states) + z @ instr_noise_chol.T
        return np.hstack([base_states, instr])

    def transition(states: np.ndarray, rng: RngStream, t: int) -> np.ndarray:
        base_next = model.transition(states[:, :dx], rng.child("base"), t)
        return _append_instrumental(base_next, rng.child("instr"))

    def initial_sampler(n: int, rng: RngStream) -> np.ndarray:
        base0 = model.initial_sampler(n, rng.child("base"))
        return _append_instrumental(base0, rng.child("instr"))

    meas = np.hstack([np.zeros((dy, dx)), np.eye(dy)])
    return AugmentedModel(
        dim_state=dx + dy,
        dim_obs=dy,
        transition=transition,
        initial_sampler=initial_sampler,
        measurement_matrix=meas,
        obs_cov=(1.0 - r2) * model.obs_cov,
        name=f"{model.name}+augmented" if model.name else "augmented",
        base=model,
        split=split,
    )
