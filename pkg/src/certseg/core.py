"""Canonical data types, validation, and deterministic seeded randomness.

Intensities live in the canonical [0, 1] domain everywhere in this package;
the [-1, 1] convention used by diffusion denoisers is an interface detail
confined to :mod:`certseg.schedule`. All types here are immutable after
construction and safe to share across threads.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, OutOfRangeError, ShapeMismatchError

_MASK64 = (1 << 64) - 1

DENOISE_MODES = ("none", "single_step", "multi_step")


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_stream_seed(master_seed: int, image_index: int, sample_index: int) -> int:
    """Derive the 64-bit seed of the noise stream for one (image, sample) pair.

    Pure function of its arguments, so noise draws are reproducible under any
    thread count or evaluation order. Distinct (image_index, sample_index)
    pairs map to distinct seeds with overwhelming probability.
    """
    h = _splitmix64(master_seed & _MASK64)
    h = _splitmix64(h ^ (image_index & _MASK64))
    h = _splitmix64(h ^ (sample_index & _MASK64))
    return h


def derive_stream_seeds(master_seed: int, image_indices, sample_indices) -> np.ndarray:
    """Vectorized :func:`derive_stream_seed`; broadcasts the two index arrays."""

    def mix(x: np.ndarray) -> np.ndarray:
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))

    img = np.asarray(image_indices, dtype=np.uint64)
    smp = np.asarray(sample_indices, dtype=np.uint64)
    with np.errstate(over="ignore"):  # uint64 wraparound is the arithmetic here
        h = mix(np.uint64(master_seed & _MASK64))
        h = mix(h ^ img)
        return mix(h ^ smp)


@dataclass(frozen=True)
class Image:
    """H x W x C floating-point intensity grid in the canonical [0, 1] domain."""

    height: int
    width: int
    channels: int
    data: np.ndarray

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise DomainError(f"image size must be positive, got {self.height}x{self.width}")
        if self.channels not in (1, 3):
            raise DomainError(f"channels must be 1 or 3, got {self.channels}")
        arr = np.asarray(self.data, dtype=np.float32)
        expected = self.height * self.width * self.channels
        if arr.size != expected:
            raise ShapeMismatchError(
                f"data has {arr.size} elements, expected {expected} "
                f"for {self.height}x{self.width}x{self.channels}"
            )
        arr = np.ascontiguousarray(arr.reshape(self.height, self.width, self.channels))
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, arr) -> "Image":
        """Build from an (H, W) or (H, W, C) array."""
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ShapeMismatchError(f"expected 2-D or 3-D array, got ndim={arr.ndim}")
        h, w, c = arr.shape
        return cls(h, w, c, arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)


def validate_image(img: Image) -> Image:
    """Return ``img`` unchanged iff all of its invariants hold.

    Raises OutOfRangeError when any element is non-finite or outside [0, 1],
    ShapeMismatchError when the payload disagrees with the declared geometry.
    """
    if img.data.shape != (img.height, img.width, img.channels):
        raise ShapeMismatchError(
            f"payload shape {img.data.shape} != declared {(img.height, img.width, img.channels)}"
        )
    if not np.all(np.isfinite(img.data)):
        raise OutOfRangeError("image contains non-finite values")
    lo = float(img.data.min())
    hi = float(img.data.max())
    if lo < 0.0 or hi > 1.0:
        raise OutOfRangeError(f"image intensities must lie in [0, 1], got range [{lo}, {hi}]")
    return img


@dataclass(frozen=True)
class LabelMap:
    """H x W grid of class ids in [0, num_classes)."""

    height: int
    width: int
    num_classes: int
    data: np.ndarray

    def __post_init__(self):
        if self.num_classes < 2:
            raise DomainError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_classes > 0xFFFE:
            # one u16 value above the class range is reserved for ABSTAIN
            raise DomainError(f"num_classes must fit u16 with headroom, got {self.num_classes}")
        arr = np.asarray(self.data)
        if not np.issubdtype(arr.dtype, np.integer):
            raise OutOfRangeError(f"labels must be integers, got dtype {arr.dtype}")
        expected = self.height * self.width
        if arr.size != expected:
            raise ShapeMismatchError(
                f"label payload has {arr.size} elements, expected {expected}"
            )
        if arr.size and (arr.min() < 0 or arr.max() >= self.num_classes):
            raise OutOfRangeError(
                f"labels must lie in [0, {self.num_classes}), got range "
                f"[{arr.min()}, {arr.max()}]"
            )
        arr = np.ascontiguousarray(arr.reshape(self.height, self.width).astype(np.uint16))
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def _trusted(cls, height: int, width: int, num_classes: int, data: np.ndarray) -> "LabelMap":
        # hot-path constructor: the caller has already validated the payload
        obj = object.__new__(cls)
        object.__setattr__(obj, "height", height)
        object.__setattr__(obj, "width", width)
        object.__setattr__(obj, "num_classes", num_classes)
        object.__setattr__(obj, "data", data)
        return obj

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass(frozen=True)
class CertifyConfig:
    """Full statistical protocol: noise level, sample split, test levels, seed."""

    sigma: float
    n0: int = 10
    n: int = 100
    alpha: float = 0.001
    tau: float = 0.75
    seed: int = 0
    denoise_mode: str = "none"

    def __post_init__(self):
        if not (self.sigma > 0.0 and np.isfinite(self.sigma)):
            raise DomainError(f"sigma must be positive and finite, got {self.sigma}")
        if self.n0 < 1 or self.n < 1:
            raise DomainError(f"sample counts must be positive, got n0={self.n0}, n={self.n}")
        if not 0.0 < self.alpha < 1.0:
            raise DomainError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0.5 < self.tau < 1.0:
            # tau > 1/2 makes the certified class unique
            raise DomainError(f"tau must lie in (0.5, 1), got {self.tau}")
        if not 0 <= self.seed <= _MASK64:
            raise DomainError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.denoise_mode not in DENOISE_MODES:
            raise DomainError(
                f"denoise_mode must be one of {DENOISE_MODES}, got {self.denoise_mode!r}"
            )

    def to_dict(self) -> dict:
        return {
            "sigma": self.sigma,
            "n0": self.n0,
            "n": self.n,
            "alpha": self.alpha,
            "tau": self.tau,
            "seed": self.seed,
            "denoise_mode": self.denoise_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CertifyConfig":
        return cls(**d)


@dataclass(frozen=True)
class CertifiedSegmentation:
    """Per-pixel certified classes with the in-band ABSTAIN sentinel.

    ``data`` holds class ids in [0, num_classes) plus the reserved value
    ``num_classes`` marking pixels for which no certificate holds. ``radius``
    is the L2 radius (canonical intensity units) shared by all certified
    pixels of the image.
    """

    height: int
    width: int
    num_classes: int
    data: np.ndarray
    radius: float
    config: CertifyConfig

    def __post_init__(self):
        if self.num_classes < 2 or self.num_classes > 0xFFFE:
            raise DomainError(f"num_classes out of range: {self.num_classes}")
        if self.radius < 0.0:
            raise DomainError(f"radius must be nonnegative, got {self.radius}")
        arr = np.asarray(self.data)
        if not np.issubdtype(arr.dtype, np.integer):
            raise OutOfRangeError(f"certified labels must be integers, got {arr.dtype}")
        expected = self.height * self.width
        if arr.size != expected:
            raise ShapeMismatchError(
                f"certified payload has {arr.size} elements, expected {expected}"
            )
        if arr.size and (arr.min() < 0 or arr.max() > self.num_classes):
            raise OutOfRangeError(
                f"certified values must lie in [0, {self.num_classes}] "
                f"(ABSTAIN = {self.num_classes})"
            )
        arr = np.ascontiguousarray(arr.reshape(self.height, self.width).astype(np.uint16))
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def abstain_value(self) -> int:
        """The reserved in-band sentinel; serialized as the integer num_classes."""
        return self.num_classes

    def abstain_mask(self) -> np.ndarray:
        return self.data == self.abstain_value

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)
