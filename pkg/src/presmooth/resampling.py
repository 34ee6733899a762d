"""Drawing equally weighted swarms from homoskedastic Gaussian mixtures.

Three families of resamplers:

* direct mixture sampling (any dimension): multinomial component choice
  followed by a Gaussian draw with the shared covariance;
* multinomial resampling over fixed locations (the classic SIR step,
  intentionally non-continuous);
* continuous grid resamplers for dimensions 1 and 2: the mixture density is
  evaluated on a fine regular grid by binning the component means and
  convolving with the shared Gaussian kernel in the Fourier domain, the CDF
  is accumulated by the midpoint rule and renormalized to end exactly at 1,
  and particles come from inverting stratified uniforms on the piecewise
  linear CDF.  Under common random numbers the map from mixture parameters
  to output particles is then continuous, which is what makes the simulated
  likelihood continuous in the model parameters.

Grids span the mixture mean plus/minus 8 standard deviations per axis; if
more than 1e-6 of the mixture mass falls outside, the grid is widened once
to 12 standard deviations, after which a diagnostic warning is emitted and
the computation proceeds.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .gauss import HomoskedasticGaussianMixture, psd_factor
from .rng import RngStream
from .ssm import Swarm

TAIL_TOLERANCE = 1e-6
_WIDEN_FACTOR = 1.5  # 8 sd -> 12 sd


def _multinomial_indices(weights: np.ndarray, n: int, gen: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    u = gen.random(n)
    return np.minimum(np.searchsorted(cdf, u, side="left"), weights.size - 1)


def resample_multinomial(weights, locations, n: int, rng: RngStream) -> Swarm:
    """Classic multinomial resampling of weighted locations."""
    weights = np.asarray(weights, dtype=float)
    locations = np.atleast_2d(np.asarray(locations, dtype=float))
    if np.any(weights < 0.0):
        raise ValueError("resampling weights must be nonnegative")
    total = weights.sum()
    if not math.isfinite(total) or abs(total - 1.0) > 1e-8:
        raise ValueError(f"resampling weights sum to {total!r}, expected 1")
    idx = _multinomial_indices(weights / total, n, rng.generator())
    return Swarm(locations[idx])


def sample_mixture_direct(mix: HomoskedasticGaussianMixture, n: int, rng: RngStream) -> Swarm:
    """Multinomial component choice plus a Gaussian draw per particle."""
    gen = rng.generator()
    idx = _multinomial_indices(mix.weights / mix.weights.sum(), n, gen)
    z = gen.standard_normal((n, mix.dim))
    factor = psd_factor(mix.common_cov, name="common_cov")
    return Swarm(mix.means[idx] + z @ factor.T)


# ---------------------------------------------------------------------------
# 1-d continuous resampling


@dataclass(frozen=True)
class Grid1D:
    """Regular midpoint grid holding a normalized density and its CDF.

    ``values[j]`` is the density at the midpoint of cell j, ``cdf[j]`` the
    cumulative mass at the cell's right edge (last entry exactly 1).
    """

    lo: float
    hi: float
    n_g: int
    values: np.ndarray
    cdf: np.ndarray

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / self.n_g


def _check_power_of_two(n_g: int):
    if n_g < 8 or n_g & (n_g - 1) != 0:
        raise ValueError(f"grid size must be a power of two >= 8, got {n_g}")


def _tail_mass_1d(means: np.ndarray, weights: np.ndarray, sd: float, lo: float, hi: float) -> float:
    if sd > 0.0:
        below = ndtr((lo - means) / sd)
        above = ndtr((means - hi) / sd)
    else:
        below = (means < lo).astype(float)
        above = (means > hi).astype(float)
    return float(weights @ (below + above))


def _linear_bin_1d(means: np.ndarray, weights: np.ndarray, lo: float, step: float, n_g: int) -> np.ndarray:
    # positions in midpoint-node coordinates
    pos = (means - lo) / step - 0.5
    j = np.floor(pos).astype(int)
    frac = pos - j
    j0 = np.clip(j, 0, n_g - 1)
    j1 = np.clip(j + 1, 0, n_g - 1)
    binned = np.bincount(j0, weights=weights * (1.0 - frac), minlength=n_g)
    binned += np.bincount(j1, weights=weights * frac, minlength=n_g)
    return binned


def _gaussian_kernel_fft(step: float, var: float, n_pad: int) -> np.ndarray:
    """Unnormalized Gaussian kernel on signed grid offsets, wrap ordering.

    The overall scale cancels when the CDF is renormalized, so the 1/sqrt
    prefactor is dropped; var = 0 degenerates to a discrete impulse.
    """
    if var <= 0.0:
        kern = np.zeros(n_pad)
        kern[0] = 1.0
        return kern
    offsets = np.minimum(np.arange(n_pad), n_pad - np.arange(n_pad)) * step
    return np.exp(-0.5 * offsets * offsets / var)


def mixture_grid_1d(mix: HomoskedasticGaussianMixture, n_g: int = 512) -> Grid1D:
    """Evaluate a 1-d mixture on a grid via FFT binned kernel evaluation."""
    _check_power_of_two(n_g)
    if mix.dim != 1:
        raise ValueError(f"mixture must be 1-d, got dim {mix.dim}")
    means = mix.means[:, 0]
    weights = mix.weights
    mu = float(mix.mean()[0])
    sd = math.sqrt(max(float(mix.cov()[0, 0]), 0.0))
    sd = max(sd, 1e-12 * max(1.0, abs(mu)))
    kern_sd = math.sqrt(max(float(mix.common_cov[0, 0]), 0.0))

    half = 8.0 * sd
    lo, hi = mu - half, mu + half
    if _tail_mass_1d(means, weights, kern_sd, lo, hi) > TAIL_TOLERANCE:
        half *= _WIDEN_FACTOR
        lo, hi = mu - half, mu + half
        excess = _tail_mass_1d(means, weights, kern_sd, lo, hi)
        if excess > TAIL_TOLERANCE:
            warnings.warn(
                f"mixture mass {excess:.3g} beyond widened grid [{lo:g}, {hi:g}]; proceeding",
                RuntimeWarning,
            )
    step = (hi - lo) / n_g
    binned = _linear_bin_1d(means, weights, lo, step, n_g)
    n_pad = 2 * n_g
    padded = np.zeros(n_pad)
    padded[:n_g] = binned
    kern = _gaussian_kernel_fft(step, float(mix.common_cov[0, 0]), n_pad)
    values = np.fft.irfft(np.fft.rfft(padded) * np.fft.rfft(kern), n_pad)[:n_g]
    values = np.clip(values, 0.0, None)
    total = values.sum()
    if total <= 0.0:
        raise ValueError("mixture density vanished on the entire grid")
    cdf = np.cumsum(values)
    cdf /= cdf[-1]
    cdf[-1] = 1.0
    return Grid1D(lo=lo, hi=hi, n_g=n_g, values=values / (total * step), cdf=cdf)


def _invert_cdf_1d(grid: Grid1D, u: np.ndarray) -> np.ndarray:
    edges = grid.lo + grid.step * np.arange(grid.n_g + 1)
    cdf_ext = np.concatenate([[0.0], grid.cdf])
    return np.interp(u, cdf_ext, edges)


def resample_continuous_1d(
    mix: HomoskedasticGaussianMixture, n: int, n_g: int = 512, rng: RngStream | None = None
) -> Swarm:
    """Continuous 1-d resampler: FFT grid density, midpoint CDF, stratified
    inversion with one shared uniform offset.

    O(n + n_g log n_g); output particles are sorted.
    """
    if rng is None:
        raise ValueError("rng stream is required")
    grid = mixture_grid_1d(mix, n_g)
    gen = rng.generator()
    u = (np.arange(n) + gen.random()) / n
    return Swarm(_invert_cdf_1d(grid, u)[:, None])


# ---------------------------------------------------------------------------
# 2-d continuous resampling


@dataclass(frozen=True)
class Grid2D:
    """Per-axis midpoint grids plus joint density and conditional CDFs.

    ``cond_cdf[j1, j2]`` is the CDF of coordinate 2 given the coordinate-1
    node j1, accumulated by the midpoint rule and normalized per row.
    """

    lo: tuple[float, float]
    hi: tuple[float, float]
    shape: tuple[int, int]
    density: np.ndarray
    cond_cdf: np.ndarray

    @property
    def steps(self) -> tuple[float, float]:
        return (
            (self.hi[0] - self.lo[0]) / self.shape[0],
            (self.hi[1] - self.lo[1]) / self.shape[1],
        )


def _axis_range(mix: HomoskedasticGaussianMixture, axis: int) -> tuple[float, float]:
    mu = float(mix.mean()[axis])
    sd = math.sqrt(max(float(mix.cov()[axis, axis]), 0.0))
    sd = max(sd, 1e-12 * max(1.0, abs(mu)))
    kern_sd = math.sqrt(max(float(mix.common_cov[axis, axis]), 0.0))
    half = 8.0 * sd
    lo, hi = mu - half, mu + half
    tail = _tail_mass_1d(mix.means[:, axis], mix.weights, kern_sd, lo, hi)
    if tail > TAIL_TOLERANCE:
        half *= _WIDEN_FACTOR
        lo, hi = mu - half, mu + half
        excess = _tail_mass_1d(mix.means[:, axis], mix.weights, kern_sd, lo, hi)
        if excess > TAIL_TOLERANCE:
            warnings.warn(
                f"axis {axis}: mixture mass {excess:.3g} beyond widened grid; proceeding",
                RuntimeWarning,
            )
    return lo, hi


def mixture_grid_2d(
    mix: HomoskedasticGaussianMixture, n_g1: int = 256, n_g2: int = 256
) -> Grid2D:
    """Joint density of a 2-d mixture on a grid via 2-d FFT convolution."""
    _check_power_of_two(n_g1)
    _check_power_of_two(n_g2)
    if mix.dim != 2:
        raise ValueError(f"mixture must be 2-d, got dim {mix.dim}")
    lo1, hi1 = _axis_range(mix, 0)
    lo2, hi2 = _axis_range(mix, 1)
    step1 = (hi1 - lo1) / n_g1
    step2 = (hi2 - lo2) / n_g2

    # bilinear binning of component means
    pos1 = (mix.means[:, 0] - lo1) / step1 - 0.5
    pos2 = (mix.means[:, 1] - lo2) / step2 - 0.5
    j1 = np.floor(pos1).astype(int)
    j2 = np.floor(pos2).astype(int)
    f1 = pos1 - j1
    f2 = pos2 - j2
    binned = np.zeros((n_g1, n_g2))
    for dj1, w1 in ((0, 1.0 - f1), (1, f1)):
        for dj2, w2 in ((0, 1.0 - f2), (1, f2)):
            a = np.clip(j1 + dj1, 0, n_g1 - 1)
            b = np.clip(j2 + dj2, 0, n_g2 - 1)
            np.add.at(binned, (a, b), mix.weights * w1 * w2)

    # shared kernel, regularized at sub-cell scale so degenerate covariances
    # stay well defined; the added width is far below the binning resolution
    reg = (0.25 * min(step1, step2)) ** 2
    kvar = mix.common_cov + reg * np.eye(2)
    kinv = np.linalg.inv(kvar)
    n_pad1, n_pad2 = 2 * n_g1, 2 * n_g2
    off1 = np.minimum(np.arange(n_pad1), n_pad1 - np.arange(n_pad1)) * step1
    off2 = np.minimum(np.arange(n_pad2), n_pad2 - np.arange(n_pad2)) * step2
    sign1 = np.where(np.arange(n_pad1) <= n_pad1 // 2, 1.0, -1.0)
    sign2 = np.where(np.arange(n_pad2) <= n_pad2 // 2, 1.0, -1.0)
    d1 = (off1 * sign1)[:, None]
    d2 = (off2 * sign2)[None, :]
    quad = kinv[0, 0] * d1 * d1 + 2.0 * kinv[0, 1] * d1 * d2 + kinv[1, 1] * d2 * d2
    kern = np.exp(-0.5 * quad)

    padded = np.zeros((n_pad1, n_pad2))
    padded[:n_g1, :n_g2] = binned
    density = np.fft.irfft2(np.fft.rfft2(padded) * np.fft.rfft2(kern), s=(n_pad1, n_pad2))
    density = np.clip(density[:n_g1, :n_g2], 0.0, None)
    total = density.sum()
    if total <= 0.0:
        raise ValueError("mixture density vanished on the entire grid")
    density /= total * step1 * step2

    cond = np.cumsum(density, axis=1)
    row_tot = cond[:, -1].copy()
    empty = row_tot <= 0.0
    cond[empty] = np.linspace(1.0 / n_g2, 1.0, n_g2)[None, :]
    row_tot[empty] = 1.0
    cond /= row_tot[:, None]
    cond[:, -1] = 1.0
    return Grid2D(
        lo=(lo1, lo2), hi=(hi1, hi2), shape=(n_g1, n_g2), density=density, cond_cdf=cond
    )


def resample_continuous_2d(
    mix: HomoskedasticGaussianMixture,
    n: int,
    n_g1: int = 256,
    n_g2: int = 256,
    rng: RngStream | None = None,
) -> Swarm:
    """Continuous 2-d resampler per the grid/conditional-CDF construction.

    Coordinate 1 is drawn by the 1-d algorithm on the first marginal (with
    stratified uniforms); coordinate 2 by inversion on the linear
    interpolation of the two conditional CDFs adjacent to each drawn
    coordinate-1 value.  The second batch of uniforms is iid rather than
    stratified: coordinate-1 draws come out sorted, and pairing them with
    sorted stratified uniforms would fabricate rank correlation.
    """
    if rng is None:
        raise ValueError("rng stream is required")
    grid = mixture_grid_2d(mix, n_g1, n_g2)
    gen = rng.generator()
    u1 = (np.arange(n) + gen.random()) / n
    u2 = gen.random(n)

    marg = mix.marginal([0])
    grid1 = mixture_grid_1d(marg, n_g1)
    x1 = _invert_cdf_1d(grid1, u1)

    step1, step2 = grid.steps
    lo1 = grid.lo[0]
    pos = (x1 - lo1) / step1 - 0.5
    j = np.clip(np.floor(pos).astype(int), 0, n_g1 - 2)
    alpha = np.clip(pos - j, 0.0, 1.0)

    x2 = np.empty(n)
    edges2_lo = grid.lo[1]
    block = 4096
    for start in range(0, n, block):
        sl = slice(start, min(start + block, n))
        rows = (1.0 - alpha[sl, None]) * grid.cond_cdf[j[sl]] + alpha[sl, None] * grid.cond_cdf[j[sl] + 1]
        uu = u2[sl]
        k = np.minimum(np.sum(rows < uu[:, None], axis=1), n_g2 - 1)
        right = np.take_along_axis(rows, k[:, None], axis=1)[:, 0]
        left = np.where(k > 0, np.take_along_axis(rows, np.maximum(k - 1, 0)[:, None], axis=1)[:, 0], 0.0)
        denom = np.maximum(right - left, 1e-300)
        frac = np.clip((uu - left) / denom, 0.0, 1.0)
        x2[sl] = edges2_lo + step2 * (k + frac)
    return Swarm(np.column_stack([x1, x2]))


def mixture_cdf_1d(mix: HomoskedasticGaussianMixture, x: np.ndarray) -> np.ndarray:
    """Exact CDF of a 1-d mixture at the given points (test utility)."""
    if mix.dim != 1:
        raise ValueError("mixture must be 1-d")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    sd = math.sqrt(max(float(mix.common_cov[0, 0]), 0.0))
    if sd == 0.0:
        ind = (x[:, None] >= mix.means[None, :, 0]).astype(float)
        return ind @ mix.weights
    z = (x[:, None] - mix.means[None, :, 0]) / sd
    return ndtr(z) @ mix.weights
