"""Diffusion noise schedule and the noise-level <-> timestep correspondence.

A schedule of per-step variances beta_t induces cumulative signal-retention
products abar_t = prod_{s<=t}(1 - beta_s). A denoiser operating at timestep t
expects inputs distributed like sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps in
the [-1, 1] domain, i.e. an effective noise-to-signal std of
sigma_t = sqrt((1 - abar_t) / abar_t). Mapping a smoothing noise level onto
the schedule picks the smallest t whose sigma_t reaches it.

Domain convention: the engine's canonical intensity domain is [0, 1]; the
denoiser domain is [-1, 1] via v -> 2v - 1. That affine map doubles additive
noise, so a canonical noise std of sigma corresponds to 2*sigma on the
schedule grid. ``timestep_for_canonical_sigma`` applies that correction; the
certificate itself stays expressed in canonical units.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Protocol, runtime_checkable

import numpy as np

from .core import Image
from .errors import DomainError, ModelOutputError, SigmaOutOfRange

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@runtime_checkable
class DenoiserInterface(Protocol):
    """Callable (noisy array in [-1,1] domain, timestep) -> predicted clean array.

    Must be deterministic given its inputs and preserve shape. Implementations
    declare ``concurrency_capable``; the process bridge serializes by default.
    """

    concurrency_capable: bool

    def __call__(self, x: np.ndarray, t: int) -> np.ndarray: ...


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable (beta_t, abar_t) table; abar strictly decreasing in t."""

    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        betas = np.ascontiguousarray(np.asarray(self.betas, dtype=np.float64))
        abars = np.ascontiguousarray(np.asarray(self.alpha_bars, dtype=np.float64))
        if betas.ndim != 1 or betas.size < 1 or abars.shape != betas.shape:
            raise DomainError("schedule arrays must be 1-D and of equal length >= 1")
        if not ((betas > 0.0).all() and (betas < 1.0).all()):
            raise DomainError("betas must lie strictly inside (0, 1)")
        if not ((abars > 0.0).all() and (abars <= 1.0).all()):
            raise DomainError("alpha_bars must lie in (0, 1]")
        if betas.size > 1 and not (np.diff(abars) < 0.0).all():
            raise DomainError("alpha_bars must be strictly decreasing")
        betas.setflags(write=False)
        abars.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", abars)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    @cached_property
    def sigmas(self) -> np.ndarray:
        """Per-timestep noise-to-signal std sqrt((1 - abar_t) / abar_t)."""
        s = np.sqrt((1.0 - self.alpha_bars) / self.alpha_bars)
        s.setflags(write=False)
        return s


def linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Betas linearly interpolated from beta_start to beta_end inclusive."""
    if T < 1:
        raise DomainError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise DomainError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(betas=betas, alpha_bars=alpha_bars)


@lru_cache(maxsize=4)
def default_schedule() -> NoiseSchedule:
    """The standard linear schedule (T=1000, 1e-4 .. 0.02), no respacing."""
    return linear_schedule(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END)


def sigma_at(schedule: NoiseSchedule, t: int) -> float:
    """Noise std the schedule reaches at timestep t; strictly increasing in t."""
    if not 0 <= t < schedule.T:
        raise IndexError(f"timestep {t} outside [0, {schedule.T})")
    return float(schedule.sigmas[t])


def timestep_for_sigma(schedule: NoiseSchedule, sigma: float) -> int:
    """Smallest t with sigma_at(t) >= sigma (exact grid hits map to their t).

    Binary search over the precomputed monotone sigma grid; the test suite
    pins it against a linear scan.
    """
    if not (sigma > 0.0 and np.isfinite(sigma)):
        raise DomainError(f"sigma must be positive and finite, got {sigma}")
    terminal = float(schedule.sigmas[-1])
    if sigma > terminal:
        raise SigmaOutOfRange(
            f"sigma={sigma} exceeds the schedule's terminal noise level {terminal:.6g}"
        )
    return int(np.searchsorted(schedule.sigmas, sigma, side="left"))


def timestep_for_canonical_sigma(schedule: NoiseSchedule, sigma: float) -> int:
    """Timestep for a noise std expressed in canonical [0, 1] units.

    The [0,1] -> [-1,1] map doubles additive noise, so the schedule is probed
    at 2*sigma.
    """
    return timestep_for_sigma(schedule, 2.0 * sigma)


def scale_to_diffusion(x_rs: np.ndarray, schedule: NoiseSchedule, t_star: int) -> np.ndarray:
    """Map a (possibly noisy) canonical-domain array into the denoiser domain.

    out = sqrt(abar_{t*}) * (2 * x_rs - 1). The array is not clamped.
    """
    if not 0 <= t_star < schedule.T:
        raise IndexError(f"timestep {t_star} outside [0, {schedule.T})")
    scale = float(np.sqrt(schedule.alpha_bars[t_star]))
    return np.float32(scale) * (np.float32(2.0) * np.asarray(x_rs, dtype=np.float32) - np.float32(1.0))


def from_diffusion(x_ddpm: np.ndarray, schedule: NoiseSchedule, t_star: int) -> np.ndarray:
    """Algebraic inverse of :func:`scale_to_diffusion` (no clamping)."""
    if not 0 <= t_star < schedule.T:
        raise IndexError(f"timestep {t_star} outside [0, {schedule.T})")
    scale = float(np.sqrt(schedule.alpha_bars[t_star]))
    return (np.asarray(x_ddpm, dtype=np.float32) / np.float32(scale) + np.float32(1.0)) / np.float32(2.0)


def _check_denoiser_output(pred: np.ndarray, ref_shape) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float32)
    if pred.shape != tuple(ref_shape):
        raise ModelOutputError(
            f"denoiser returned shape {pred.shape}, expected {tuple(ref_shape)}"
        )
    if not np.all(np.isfinite(pred)):
        raise ModelOutputError("denoiser returned non-finite values")
    return pred


def denoise(
    mode: str,
    denoiser: DenoiserInterface,
    x_ddpm: np.ndarray,
    t_star: int,
    schedule: NoiseSchedule,
) -> Image:
    """Run the denoiser from t* and return a clean canonical-domain Image.

    ``single_step`` issues exactly one call predicting the clean signal
    directly from t*. ``multi_step`` issues t*+1 calls stepping t*, t*-1, ...,
    0, advancing with the deterministic posterior-mean update built from each
    clean-signal prediction:

        x_{t-1} = sqrt(abar_{t-1}) * beta_t / (1 - abar_t) * x0_hat
                + sqrt(1 - beta_t) * (1 - abar_{t-1}) / (1 - abar_t) * x_t

    The result is mapped back to [0, 1] and clamped; clamping happens after
    all denoising and does not touch the input-side certificate.
    """
    if not 0 <= t_star < schedule.T:
        raise IndexError(f"timestep {t_star} outside [0, {schedule.T})")
    x = np.asarray(x_ddpm, dtype=np.float32)

    if mode == "single_step":
        x0_hat = _check_denoiser_output(denoiser(x, t_star), x.shape)
    elif mode == "multi_step":
        abars = schedule.alpha_bars
        betas = schedule.betas
        x_t = x
        x0_hat = None
        for t in range(t_star, -1, -1):
            x0_hat = _check_denoiser_output(denoiser(x_t, t), x.shape)
            if t == 0:
                break
            coef_x0 = np.sqrt(abars[t - 1]) * betas[t] / (1.0 - abars[t])
            coef_xt = np.sqrt(1.0 - betas[t]) * (1.0 - abars[t - 1]) / (1.0 - abars[t])
            x_t = np.float32(coef_x0) * x0_hat + np.float32(coef_xt) * x_t
    else:
        raise DomainError(f"denoise mode must be single_step or multi_step, got {mode!r}")

    canonical = np.clip((x0_hat + np.float32(1.0)) / np.float32(2.0), 0.0, 1.0)
    return Image.from_array(canonical)
