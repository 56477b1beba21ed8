"""Seeded Laplace and Gaussian noise."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from ..core import ValidationError

_TWO53 = float(2**53)


class NoiseKind(str, enum.Enum):
    LAPLACE = "laplace"
    GAUSSIAN = "gaussian"
    NONE = "none"


@dataclass(frozen=True)
class NoiseSpec:
    """``scale`` is the Laplace scale ``b`` or the Gaussian standard deviation."""

    kind: NoiseKind = NoiseKind.LAPLACE
    scale: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if self.kind is not NoiseKind.NONE and not self.scale > 0:
            raise ValidationError(f"noise scale must be positive, got {self.scale}")

    @property
    def variance(self) -> float:
        if self.kind is NoiseKind.LAPLACE:
            return 2.0 * self.scale**2
        if self.kind is NoiseKind.GAUSSIAN:
            return self.scale**2
        return 0.0

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)

    @classmethod
    def laplace_for(cls, sensitivity: float, epsilon: float, seed: int = 0) -> "NoiseSpec":
        return cls(NoiseKind.LAPLACE, sensitivity / epsilon, seed)


def _open_uniform(rng: np.random.Generator, size) -> np.ndarray:
    # strictly inside (0, 1) so the inverse CDF never hits log(0)
    return (rng.integers(0, 2**53, size=size, dtype=np.int64) + 0.5) / _TWO53


def laplace_inverse_cdf(u, b: float):
    """Map uniforms in (0, 1) to Laplace(0, b) variates."""
    c = np.asarray(u, dtype=float) - 0.5
    return -b * np.sign(c) * np.log1p(-2.0 * np.abs(c))


class NoiseSampler:
    """Stateful stream of draws from a :class:`NoiseSpec`."""

    def __init__(self, spec: NoiseSpec) -> None:
        self.spec = spec
        self.rng = np.random.Generator(np.random.PCG64(spec.seed))

    def draw(self, shape=()):
        kind = self.spec.kind
        if kind is NoiseKind.NONE:
            return 0.0 if shape == () else np.zeros(shape)
        if kind is NoiseKind.LAPLACE:
            out = laplace_inverse_cdf(_open_uniform(self.rng, shape), self.spec.scale)
        else:
            out = self.rng.standard_normal(shape) * self.spec.scale
        return float(out) if shape == () else out


def sample_noise(spec: NoiseSpec, size: int | None = None):
    """One draw (or ``size`` draws) from a fresh generator seeded by ``spec.seed``."""
    sampler = NoiseSampler(spec)
    return sampler.draw(() if size is None else (size,))
