"""Deterministic random number utilities.

All randomness in the package flows from a single 64-bit master seed.
Per-task streams are derived with :func:`split_seed`, and Gaussian variates
are produced from a counter-based Philox generator through the inverse
normal CDF, so that results are bit-identical across platforms and
independent of execution order.
"""

import hashlib

import numpy as np
from scipy.special import ndtri

__all__ = ["split_seed", "uniforms", "gaussians"]


def split_seed(master_seed: int, stream: str) -> int:
    """Derive a 64-bit child seed from a master seed and a stream label.

    The derivation is SHA-256 of ``"<master_seed>/<stream>"``, truncated to
    64 bits. Distinct labels give statistically independent streams.
    """
    digest = hashlib.sha256(f"{master_seed}/{stream}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed & (2**64 - 1)))


def uniforms(seed: int, shape) -> np.ndarray:
    """Uniform(0,1) array of the given shape, deterministic in the seed."""
    return _generator(seed).random(shape)


def gaussians(seed: int, shape) -> np.ndarray:
    """Standard normal array via inverse-CDF of Philox uniforms.

    The inverse-CDF map avoids the rejection steps of the ziggurat sampler,
    keeping the output a fixed function of the counter stream.
    """
    u = _generator(seed).random(shape)
    # random() lands on [0,1) with resolution 2^-53; floor it away from 0 so
    # ndtri never sees an exact endpoint.
    return ndtri(np.maximum(u, 2.0**-54))
