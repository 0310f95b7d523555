"""Gaussian noise machinery and the closed-form certified-radius math.

The certificate: if the smoothed classifier assigns a class with probability
p > 1/2 under N(0, sigma^2 I) input noise, its prediction is invariant for
every additive perturbation of L2 norm up to sigma * Phi^-1(p). The deployed
engine instantiates p at the per-pixel threshold tau; ``certified_radius``
accepts any p > 1/2 so the idealized form (p = true smoothed probability) is
available as well.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

from .core import Image
from .errors import DomainError, ShapeMismatchError

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Acklam's rational approximation of the standard normal quantile,
# |error| < 1.15e-9 over (0,1) before refinement.
_A = (
    -3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
    1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00,
)
_B = (
    -5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
    6.680131188771972e+01, -1.328068155288572e+01,
)
_C = (
    -7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
    -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00,
)
_D = (
    7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
    3.754408661907416e+00,
)
_P_LOW = 0.02425


def std_normal_cdf(z: float) -> float:
    """Phi(z) via erfc, accurate in both tails."""
    return 0.5 * math.erfc(-z / _SQRT2)


def _acklam(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        )
    if p > 1.0 - _P_LOW:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        return -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        )
    q = p - 0.5
    r = q * q
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / (
        ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
    )


def std_normal_quantile(p: float) -> float:
    """Inverse standard normal CDF, absolute error well below 1e-9.

    Rational approximation refined with one Newton step against the
    erfc-based CDF.
    """
    if not 0.0 < p < 1.0:
        raise DomainError(f"quantile argument must lie in (0, 1), got {p}")
    z = _acklam(p)
    pdf = _INV_SQRT_2PI * math.exp(-0.5 * z * z)
    if pdf > 0.0:
        z -= (std_normal_cdf(z) - p) / pdf
    return z


def certified_radius(sigma: float, p: float) -> float:
    """L2 radius sigma * Phi^-1(p) certified for a class of probability p.

    Only p > 1/2 yields a meaningful (positive) certificate; anything else
    raises DomainError. Monotone increasing in both arguments and exactly
    linear in sigma.
    """
    if not (sigma > 0.0 and math.isfinite(sigma)):
        raise DomainError(f"sigma must be positive and finite, got {sigma}")
    if not 0.5 < p < 1.0:
        raise DomainError(f"certification requires p in (0.5, 1), got {p}")
    return sigma * std_normal_quantile(p)


@dataclass(frozen=True)
class NoiseSample:
    """Additive Gaussian perturbation eta ~ N(0, sigma^2 I), image-shaped."""

    data: np.ndarray
    sigma: float


class _PhiloxScratch(threading.local):
    """Per-thread reusable counter-based generator, rekeyed for every stream.

    Rekeying via the state dict skips the bit-generator constructor on the
    hot path; the produced stream is bit-identical to a freshly constructed
    Philox keyed with the same seed (asserted in the test suite).
    """

    def __init__(self):
        self.bitgen = np.random.Philox(key=0)
        self.gen = np.random.Generator(self.bitgen)
        self._template = self.bitgen.state  # key[1] stays 0, buffer stays drained

    def rekey(self, stream_seed: int) -> np.random.Generator:
        st = self._template
        st["state"]["key"][0] = stream_seed & 0xFFFFFFFFFFFFFFFF
        st["state"]["counter"][:] = 0
        st["buffer_pos"] = 4
        st["has_uint32"] = 0
        st["uinteger"] = 0
        self.bitgen.state = st
        return self.gen


_scratch = _PhiloxScratch()


def stream_generator(stream_seed: int) -> np.random.Generator:
    """Counter-based generator for one noise stream; deterministic in the seed."""
    return _scratch.rekey(stream_seed)


def sample_noise(shape, sigma: float, stream_seed: int) -> NoiseSample:
    """Draw i.i.d. N(0, sigma^2) entries of the given shape.

    Deterministic given ``stream_seed`` and independent of thread scheduling.
    """
    if not (sigma > 0.0 and math.isfinite(sigma)):
        raise DomainError(f"sigma must be positive and finite, got {sigma}")
    gen = stream_generator(stream_seed)
    data = gen.standard_normal(shape, dtype=np.float32) * np.float32(sigma)
    return NoiseSample(data=data, sigma=sigma)


def add_noise(x: Image, eta: NoiseSample) -> np.ndarray:
    """x + eta, deliberately NOT clamped: noisy inputs legitimately leave [0, 1].

    Clamping before segmentation or denoising would bias the smoothed
    classifier, so downstream consumers must accept out-of-range intensities.
    """
    if eta.data.shape != x.data.shape:
        raise ShapeMismatchError(
            f"noise shape {eta.data.shape} != image shape {x.data.shape}"
        )
    return x.data + eta.data
