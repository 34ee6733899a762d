"""State-space model abstraction and particle swarms.

The generic model is

    x_t = g(x_{t-1}, v_t),            t = 1, ..., T,
    y_t = M x_t + e_t,  e_t ~ N(0, obs_cov),

with an arbitrary simulable transition g and a linear Gaussian measurement.
Models with a nonlinear measurement mean carry ``measurement_fn`` instead of
``measurement_matrix`` and must be augmented (see :mod:`presmooth.ps_update`)
before the pre-smoothed or ensemble updates apply; plain SIR handles them
directly.

Transitions and samplers operate on whole swarms: an (n, d_x) array of
states in, an (n, d_x) array out.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .exceptions import InsufficientSampleError
from .gauss import chol_lower
from .rng import RngStream


@dataclass(kw_only=True)
class StateSpaceModel:
    """Simulable state-space model with additive Gaussian measurement noise.

    Fields
    ------
    dim_state, dim_obs : int
    transition : callable (states (n, d_x), RngStream, t) -> (n, d_x)
    initial_sampler : callable (n, RngStream) -> (n, d_x)
    obs_cov : (d_y, d_y) SPD array
    measurement_matrix : (d_y, d_x) array, or None for nonlinear models
    measurement_fn : callable (n, d_x) -> (n, d_y), measurement mean for
        nonlinear models (used by SIR and by state augmentation)
    transition_mean : optional callable (states, t) -> (n, d_x), the mean of
        x_t | x_{t-1}; enables the auxiliary filter
    transition_gaussian : optional callable (states, t) -> (means, covs)
        where covs is (d_x, d_x) shared or (n,) of per-state variances when
        d_x == 1; enables the fully adapted auxiliary filter
    """

    dim_state: int
    dim_obs: int
    transition: Callable[[np.ndarray, RngStream, int], np.ndarray]
    initial_sampler: Callable[[int, RngStream], np.ndarray]
    obs_cov: np.ndarray
    measurement_matrix: Optional[np.ndarray] = None
    measurement_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    transition_mean: Optional[Callable[[np.ndarray, int], np.ndarray]] = None
    transition_gaussian: Optional[Callable[[np.ndarray, int], tuple]] = None
    name: str = ""

    def __post_init__(self):
        if self.dim_state < 1 or self.dim_obs < 1:
            raise ValueError("dim_state and dim_obs must be positive")
        self.obs_cov = np.atleast_2d(np.asarray(self.obs_cov, dtype=float))
        if self.obs_cov.shape != (self.dim_obs, self.dim_obs):
            raise ValueError(
                f"obs_cov shape {self.obs_cov.shape} != ({self.dim_obs}, {self.dim_obs})"
            )
        chol_lower(self.obs_cov, name="obs_cov")
        if self.measurement_matrix is not None:
            self.measurement_matrix = np.atleast_2d(
                np.asarray(self.measurement_matrix, dtype=float)
            )
            if self.measurement_matrix.shape != (self.dim_obs, self.dim_state):
                raise ValueError(
                    "measurement_matrix shape "
                    f"{self.measurement_matrix.shape} != ({self.dim_obs}, {self.dim_state})"
                )
        elif self.measurement_fn is None:
            raise ValueError("need measurement_matrix or measurement_fn")

    @property
    def linear_measurement(self) -> bool:
        return self.measurement_matrix is not None

    def measurement_mean(self, states: np.ndarray) -> np.ndarray:
        """Mean of y given each state row."""
        if self.measurement_matrix is not None:
            return states @ self.measurement_matrix.T
        return self.measurement_fn(states)


@dataclass(frozen=True)
class Swarm:
    """n equally weighted d_x-dimensional particles."""

    particles: np.ndarray

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.particles, dtype=float))
        if not np.all(np.isfinite(p)):
            raise ValueError("swarm particles must all be finite")
        object.__setattr__(self, "particles", p)

    @property
    def n(self) -> int:
        return self.particles.shape[0]

    @property
    def dim(self) -> int:
        return self.particles.shape[1]


def swarm_moments(swarm: Swarm) -> tuple[np.ndarray, np.ndarray]:
    """Empirical mean and covariance of a swarm; covariance divisor is n.

    The divisor-n convention is load-bearing: it makes the shrunk-kernel
    mixture match the swarm mean and covariance exactly for every value of
    the smoothing parameter.
    """
    if swarm.n < 2:
        raise InsufficientSampleError(f"need at least 2 particles, got {swarm.n}")
    x = swarm.particles
    mean = x.mean(axis=0)
    dev = x - mean
    cov = dev.T @ dev / swarm.n
    return mean, 0.5 * (cov + cov.T)


def weighted_moments(particles: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Weighted mean and covariance (weights sum to 1, population convention)."""
    particles = np.atleast_2d(np.asarray(particles, dtype=float))
    weights = np.asarray(weights, dtype=float)
    mean = weights @ particles
    dev = particles - mean
    cov = (dev.T * weights) @ dev
    return mean, 0.5 * (cov + cov.T)


def simulate(model: StateSpaceModel, T: int, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Draw one trajectory (states, observations) of length T from the model.

    Returns ``states`` (T, d_x) for t = 1..T and ``obs`` (T, d_y).
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    gen_obs = rng.child("obsnoise").generator()
    x = model.initial_sampler(1, rng.child("init"))
    states = np.empty((T, model.dim_state))
    obs = np.empty((T, model.dim_obs))
    lo = chol_lower(model.obs_cov, name="obs_cov")
    for t in range(1, T + 1):
        x = model.transition(x, rng.child(t, "prop"), t)
        states[t - 1] = x[0]
        noise = lo @ gen_obs.standard_normal(model.dim_obs)
        obs[t - 1] = model.measurement_mean(x)[0] + noise
    return states, obs
