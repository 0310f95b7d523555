"""Abstention-aware overlap metrics and dataset aggregation.

Abstained pixel positions are excluded from both the prediction and the
ground-truth sets before any counting ("ignoring the abstain class"); the
restriction predicate lives in one place, ``_restricted_sets``, so alternative
readings stay a one-line change. A class absent from both restricted sets
scores 1.0 (nothing to segment, nothing predicted: a correct outcome).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .core import CertifiedSegmentation, LabelMap
from .errors import EmptyDatasetError, ShapeMismatchError


@dataclass(frozen=True)
class ClassScore:
    class_id: int
    certified_dice: float
    certified_iou: float


@dataclass(frozen=True)
class MetricsReport:
    per_class: tuple[ClassScore, ...]
    abstain_fraction: float
    image_count: int


def _restricted_sets(cert: CertifiedSegmentation, gt: LabelMap, c: int):
    if (cert.height, cert.width) != gt.shape:
        raise ShapeMismatchError(
            f"certified map shape {(cert.height, cert.width)} != ground truth {gt.shape}"
        )
    keep = cert.data != cert.abstain_value
    pred = (cert.data == c) & keep
    truth = (gt.data == c) & keep
    return pred, truth


def certified_dice(cert: CertifiedSegmentation, gt: LabelMap, c: int) -> float:
    """2|P∩G| / (|P|+|G|) over non-abstained pixels; empty-empty scores 1.0."""
    pred, truth = _restricted_sets(cert, gt, c)
    inter = int(np.count_nonzero(pred & truth))
    denom = int(np.count_nonzero(pred)) + int(np.count_nonzero(truth))
    if denom == 0:
        return 1.0
    return 2.0 * inter / denom


def certified_iou(cert: CertifiedSegmentation, gt: LabelMap, c: int) -> float:
    """|P∩G| / |P∪G| over non-abstained pixels; empty-empty scores 1.0."""
    pred, truth = _restricted_sets(cert, gt, c)
    inter = int(np.count_nonzero(pred & truth))
    union = int(np.count_nonzero(pred | truth))
    if union == 0:
        return 1.0
    return inter / union


def abstain_fraction(cert: CertifiedSegmentation) -> float:
    """Fraction of pixels carrying no certificate, over the whole image."""
    return float(np.count_nonzero(cert.abstain_mask())) / (cert.height * cert.width)


def image_report(cert: CertifiedSegmentation, gt: LabelMap) -> MetricsReport:
    scores = tuple(
        ClassScore(c, certified_dice(cert, gt, c), certified_iou(cert, gt, c))
        for c in range(cert.num_classes)
    )
    return MetricsReport(
        per_class=scores, abstain_fraction=abstain_fraction(cert), image_count=1
    )


def aggregate(reports) -> MetricsReport:
    """Unweighted (macro) mean of per-image scores and abstain fractions.

    Sums use exactly-rounded accumulation, so the result is independent of
    image order.
    """
    reports = list(reports)
    if not reports:
        raise EmptyDatasetError("cannot aggregate zero image reports")
    class_ids = [s.class_id for s in reports[0].per_class]
    for r in reports:
        if [s.class_id for s in r.per_class] != class_ids:
            raise ShapeMismatchError("reports disagree on the class set")
    images = sum(r.image_count for r in reports)
    per_class = []
    for idx, cid in enumerate(class_ids):
        dice = math.fsum(r.per_class[idx].certified_dice * r.image_count for r in reports) / images
        iou = math.fsum(r.per_class[idx].certified_iou * r.image_count for r in reports) / images
        per_class.append(ClassScore(cid, dice, iou))
    abst = math.fsum(r.abstain_fraction * r.image_count for r in reports) / images
    return MetricsReport(per_class=tuple(per_class), abstain_fraction=abst, image_count=images)


CSV_FIELDS = ("dataset", "model", "sigma", "radius", "class", "dice", "iou", "abstain_fraction")


def _fmt(v: float) -> str:
    return format(v, ".10g")


def write_report_csv(stream, report: MetricsReport, *, dataset: str, model: str,
                     sigma: float, radius: float) -> None:
    """One row per class, matching the layout used for σ/R result tables."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for s in report.per_class:
        writer.writerow(
            [
                dataset,
                model,
                _fmt(sigma),
                _fmt(radius),
                s.class_id,
                _fmt(s.certified_dice),
                _fmt(s.certified_iou),
                _fmt(report.abstain_fraction),
            ]
        )
