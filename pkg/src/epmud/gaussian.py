"""Scalar circularly-symmetric complex Gaussian kernels.

These are the building blocks shared by the EP estimator, the scenario
generator and the detectors: density evaluation (linear and log domain),
the product-of-two-Gaussians reduction, and sampling.

All variances are total complex variances, i.e. a draw from CN(m, v) has
independent real and imaginary parts with variance v/2 each.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ScalarGaussian",
    "cn_pdf",
    "log_cn_pdf",
    "gaussian_product",
    "sample_cn",
]


@dataclass(frozen=True)
class ScalarGaussian:
    """One complex-Gaussian factor: CN(mean, variance).

    variance is the total complex variance and must be finite and > 0.
    """

    mean: complex
    variance: float

    def __post_init__(self):
        if not (math.isfinite(self.variance) and self.variance > 0.0):
            raise ValueError(f"variance must be finite and > 0, got {self.variance}")
        if not cmath.isfinite(self.mean):
            raise ValueError(f"mean must be finite, got {self.mean}")


def _check_variance(v) -> None:
    v = np.asarray(v)
    if not np.all(np.isfinite(v)) or np.any(v <= 0.0):
        raise ValueError(f"variance must be finite and > 0, got {v}")


def log_cn_pdf(x, mean, variance):
    """Log-density of CN(x | mean, variance).

    log CN = -|x - mean|^2 / v - log(pi v).  Works elementwise on arrays.
    Kept separate from the linear-domain version because downstream ratio
    computations must stay in the log domain to survive far-tail underflow.
    """
    _check_variance(variance)
    d2 = np.abs(np.asarray(x) - np.asarray(mean)) ** 2
    return -d2 / variance - np.log(np.pi * np.asarray(variance, dtype=float))


def cn_pdf(x, mean, variance):
    """Density of the circularly-symmetric complex Gaussian CN(x | mean, variance).

    Evaluated as exp(log_cn_pdf(...)); always >= 0 and may underflow to 0.0
    for points many standard deviations out.
    """
    return np.exp(log_cn_pdf(x, mean, variance))


def gaussian_product(g1: ScalarGaussian, g2: ScalarGaussian):
    """Reduce the product of two scalar complex Gaussian densities.

    CN(x|m1,v1) * CN(x|m2,v2) = scale * CN(x|m,v) with

        scale = CN(m2 | m1, v1 + v2)
        m     = (m1 v2 + m2 v1) / (v1 + v2)
        v     = v1 v2 / (v1 + v2)

    Returns (scale, ScalarGaussian(m, v)).  Symmetric in its arguments; the
    result variance is the harmonic mean scale v < min(v1, v2).
    """
    vs = g1.variance + g2.variance
    scale = float(cn_pdf(g2.mean, g1.mean, vs))
    mean = (g1.mean * g2.variance + g2.mean * g1.variance) / vs
    var = g1.variance * g2.variance / vs
    return scale, ScalarGaussian(complex(mean), float(var))


def sample_cn(mean, variance, rng: np.random.Generator, size=None):
    """Draw from CN(mean, variance) using the caller's generator.

    Real and imaginary parts are independent N(0, variance/2).  `size=None`
    returns a scalar when mean/variance are scalars; array arguments
    broadcast in the usual numpy way.  Deterministic given the generator
    state; the generator is the only thing mutated.
    """
    _check_variance(variance)
    mean = np.asarray(mean)
    shape = size if size is not None else np.broadcast(mean, np.asarray(variance)).shape
    z = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    out = mean + np.sqrt(np.asarray(variance) / 2.0) * z
    if size is None and out.shape == ():
        return complex(out)
    return out
