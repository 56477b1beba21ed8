from .noise import NoiseKind, NoiseSampler, NoiseSpec, laplace_inverse_cdf, sample_noise
from .toeplitz import (
    ToeplitzState,
    batch_prefix_release,
    column_norm,
    gaussian_sigma,
    sqrt_coefficients,
    toeplitz_release,
)
from .tree import (
    BinaryTreeMechanism,
    CanonicalDecomposition,
    IntervalEstimate,
    ReleaseLog,
    ReleaseRecord,
    canonical_decompose,
    estimate_interval,
    popcount,
    v_bound,
)

__all__ = [
    "BinaryTreeMechanism",
    "CanonicalDecomposition",
    "IntervalEstimate",
    "NoiseKind",
    "NoiseSampler",
    "NoiseSpec",
    "ReleaseLog",
    "ReleaseRecord",
    "ToeplitzState",
    "batch_prefix_release",
    "canonical_decompose",
    "column_norm",
    "estimate_interval",
    "gaussian_sigma",
    "laplace_inverse_cdf",
    "popcount",
    "sample_noise",
    "sqrt_coefficients",
    "toeplitz_release",
    "v_bound",
]
