"""Toeplitz correlated-noise continual release.

The prefix-sum matrix ``A`` (lower-triangular ones) factors as ``A = C @ C``
with ``C`` lower-triangular Toeplitz and coefficients
``c_0 = 1, c_k = c_{k-1} * (2k - 1) / (2k)``. The mechanism releases
``C @ (C @ y + z)`` with ``z`` i.i.d. Gaussian, i.e. the true prefix sums plus
correlated noise ``C @ z``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.signal import fftconvolve

from ..core import StateError, ValidationError
from .noise import NoiseKind, NoiseSampler, NoiseSpec

DEFAULT_T_MAX = 1440
DEFAULT_DELTA = 1e-5


def sqrt_coefficients(t: int) -> np.ndarray:
    k = np.arange(1, t, dtype=float)
    return np.concatenate([[1.0], np.cumprod((2 * k - 1) / (2 * k))])


def toeplitz_matrix(coeffs: np.ndarray) -> np.ndarray:
    t = len(coeffs)
    idx = np.arange(t)
    diff = idx[:, None] - idx[None, :]
    return np.where(diff >= 0, coeffs[np.clip(diff, 0, None)], 0.0)


def column_norm(t_max: int = DEFAULT_T_MAX) -> float:
    """l2 norm of the first (largest) column of ``C`` at horizon ``t_max``."""
    return float(np.sqrt(np.sum(sqrt_coefficients(t_max) ** 2)))


def gaussian_sigma(sensitivity: float, epsilon: float, delta: float = DEFAULT_DELTA,
                   t_max: int = DEFAULT_T_MAX) -> float:
    if sensitivity <= 0 or epsilon <= 0 or not 0 < delta < 1:
        raise ValidationError("sensitivity, epsilon must be positive and delta in (0, 1)")
    return sensitivity * column_norm(t_max) * math.sqrt(2 * math.log(1.25 / delta)) / epsilon


def prefix_noise_variance(sigma: float, t: int) -> float:
    """Variance of the noise on the released prefix sum at step ``t`` (0-based)."""
    c = sqrt_coefficients(t + 1)
    return sigma**2 * float(np.sum(c**2))


class ToeplitzState:
    """Streaming release. Raw state is a single running sum plus noise history."""

    def __init__(self, sigma: float, seed: int = 0, t_max: int = DEFAULT_T_MAX,
                 delta: float = DEFAULT_DELTA, noiseless: bool = False) -> None:
        self.t_max = t_max
        self.delta = delta
        self.sigma = sigma
        self.coefficients = sqrt_coefficients(t_max)
        kind = NoiseKind.NONE if noiseless else NoiseKind.GAUSSIAN
        self.sampler = NoiseSampler(NoiseSpec(kind, sigma if sigma > 0 else 1.0, seed))
        self.history = np.zeros(t_max)
        self.t = 0
        self.running_sum = 0.0

    def release(self, y: float) -> float:
        if self.t >= self.t_max:
            raise StateError(f"stream exceeded t_max={self.t_max}")
        self.history[self.t] = self.sampler.draw()
        self.running_sum += y
        c = self.coefficients[: self.t + 1]
        noise = float(np.dot(c, self.history[self.t :: -1]))
        self.t += 1
        return self.running_sum + noise


def toeplitz_release(state: ToeplitzState, y: float) -> float:
    return state.release(y)


def correlated_prefix_noise(z: np.ndarray) -> np.ndarray:
    """Apply ``C`` along the last axis of a batch of i.i.d. noise vectors."""
    t = z.shape[-1]
    c = sqrt_coefficients(t)
    shape = (1,) * (z.ndim - 1) + (t,)
    return fftconvolve(z, c.reshape(shape), axes=-1)[..., :t]


def batch_prefix_release(y: np.ndarray, z: np.ndarray, t_max: int = DEFAULT_T_MAX) -> np.ndarray:
    """Vectorised equivalent of streaming ``ToeplitzState`` over many trials.

    ``y`` has shape ``(T,)``; ``z`` has shape ``(trials, T)`` and is already
    scaled by the Gaussian sigma.
    """
    if y.shape[-1] > t_max:
        raise StateError(f"stream length {y.shape[-1]} exceeds t_max={t_max}")
    return np.cumsum(y) + correlated_prefix_noise(z)
