"""Synthetic scenes and closed-form oracles.

Desk-scale stand-in for real segmentation data: piecewise-constant images of
axis-aligned rectangles and disks whose ground truth is exact by
construction, plus the one-pixel threshold model whose smoothed probability
has a closed form. Together they make the statistical guarantees testable
without any trained model.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Image, LabelMap
from .errors import DomainError
from .smoothing import std_normal_cdf

MAX_CLASSES = 256  # separation 1/(k-1) must stay well clear of f32 rounding


@dataclass(frozen=True)
class ShapeSpec:
    kind: str  # "disk" | "rect"
    class_id: int
    params: tuple  # disk: (cy, cx, r); rect: (y0, x0, y1, x1) inclusive


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    height: int
    width: int
    num_classes: int
    background_class: int
    class_intensities: tuple[float, ...]
    shapes: tuple[ShapeSpec, ...]


@dataclass(frozen=True)
class SyntheticScene:
    image: Image
    ground_truth: LabelMap
    spec: SceneSpec


def class_intensities(num_classes: int) -> np.ndarray:
    """Maximally separated intensities c/(k-1) on [0, 1]."""
    if num_classes < 2:
        raise DomainError(f"need >= 2 classes, got {num_classes}")
    if num_classes > MAX_CLASSES:
        raise DomainError(
            f"{num_classes} classes cannot keep intensities separated by >= 1/k "
            f"robustly in f32 (max {MAX_CLASSES})"
        )
    return (np.arange(num_classes, dtype=np.float64) / (num_classes - 1)).astype(np.float32)


def _paint(gt: np.ndarray, shape: ShapeSpec) -> None:
    h, w = gt.shape
    if shape.kind == "disk":
        cy, cx, r = shape.params
        yy, xx = np.ogrid[:h, :w]
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    else:
        y0, x0, y1, x1 = shape.params
        mask = np.zeros((h, w), dtype=bool)
        mask[y0 : y1 + 1, x0 : x1 + 1] = True
    gt[mask] = shape.class_id


def generate_scene(seed: int, height: int, width: int, num_classes: int,
                   shape_count: int) -> SyntheticScene:
    """Deterministic scene: ``shape_count`` shapes over background class 0.

    Later shapes overdraw earlier ones, so a pixel's label is the class of
    the topmost shape covering it. All shapes keep a margin of at least two
    pixels from the borders.
    """
    if height < 8 or width < 8:
        raise DomainError(f"scene must be at least 8x8, got {height}x{width}")
    if shape_count < 0:
        raise DomainError(f"shape_count must be >= 0, got {shape_count}")
    intensities = class_intensities(num_classes)
    rng = np.random.Generator(np.random.Philox(key=seed))
    margin = 2
    shapes: list[ShapeSpec] = []
    for _ in range(shape_count):
        cls = int(rng.integers(1, num_classes))
        if rng.random() < 0.5:
            max_r = (min(height, width) - 2 * margin) // 3
            r = int(rng.integers(2, max(3, max_r + 1)))
            cy = int(rng.integers(margin + r, height - margin - r))
            cx = int(rng.integers(margin + r, width - margin - r))
            shapes.append(ShapeSpec("disk", cls, (cy, cx, r)))
        else:
            sh = int(rng.integers(3, max(4, height // 2)))
            sw = int(rng.integers(3, max(4, width // 2)))
            y0 = int(rng.integers(margin, height - margin - sh))
            x0 = int(rng.integers(margin, width - margin - sw))
            shapes.append(ShapeSpec("rect", cls, (y0, x0, y0 + sh - 1, x0 + sw - 1)))

    gt = np.zeros((height, width), dtype=np.int64)
    for shape in shapes:
        _paint(gt, shape)
    img = intensities[gt][:, :, None]

    spec = SceneSpec(
        seed=seed,
        height=height,
        width=width,
        num_classes=num_classes,
        background_class=0,
        class_intensities=tuple(float(v) for v in intensities),
        shapes=tuple(shapes),
    )
    return SyntheticScene(
        image=Image(height, width, 1, img),
        ground_truth=LabelMap(height, width, num_classes, gt),
        spec=spec,
    )


def exact_smoothed_prob(x_scalar: float, theta: float, sigma: float) -> float:
    """Closed-form smoothed probability of the one-pixel threshold model.

    For f(v) = [v >= theta] under N(0, sigma^2) input noise, the probability
    of class 1 at input x is Phi((x - theta) / sigma) exactly.
    """
    if not sigma > 0.0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    return std_normal_cdf((x_scalar - theta) / sigma)


def input_for_smoothed_prob(target_prob: float, theta: float, sigma: float) -> float:
    """Inverse of :func:`exact_smoothed_prob` in x: the input whose smoothed
    class-1 probability equals ``target_prob``."""
    from .smoothing import std_normal_quantile

    return theta + sigma * std_normal_quantile(target_prob)
