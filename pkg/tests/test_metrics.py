import io

import numpy as np
import pytest

from certseg.core import CertifiedSegmentation, CertifyConfig, LabelMap
from certseg.errors import EmptyDatasetError, ShapeMismatchError
from certseg.metrics import (
    abstain_fraction,
    aggregate,
    certified_dice,
    certified_iou,
    image_report,
    write_report_csv,
)

from oracles import dice_iou_sets

CFG = CertifyConfig(sigma=0.25)


def cert_of(arr, k):
    arr = np.asarray(arr)
    return CertifiedSegmentation(arr.shape[0], arr.shape[1], k, arr, radius=0.17, config=CFG)


def gt_of(arr, k):
    arr = np.asarray(arr)
    return LabelMap(arr.shape[0], arr.shape[1], k, arr)


class TestWorkedExample:
    # 2x2 grid, class c=1, ABSTAIN=2 for k=2:
    # gt = [c, c, 0, 0], cert = [c, ABSTAIN, 0, c]
    GT = gt_of([[1, 1], [0, 0]], 2)
    CERT = cert_of([[1, 2], [0, 1]], 2)

    def test_dice_two_thirds(self):
        assert certified_dice(self.CERT, self.GT, 1) == pytest.approx(2.0 / 3.0, abs=1e-15)

    def test_iou_one_half(self):
        assert certified_iou(self.CERT, self.GT, 1) == pytest.approx(0.5, abs=1e-15)

    def test_against_set_oracle(self):
        d, i = dice_iou_sets(self.CERT.data.ravel().tolist(), self.GT.data.ravel().tolist(), 2, 1)
        assert certified_dice(self.CERT, self.GT, 1) == d
        assert certified_iou(self.CERT, self.GT, 1) == i


class TestEdgeCases:
    def test_perfect_match(self):
        gt = gt_of([[0, 1], [1, 0]], 2)
        cert = cert_of([[0, 1], [1, 0]], 2)
        assert certified_dice(cert, gt, 0) == 1.0
        assert certified_iou(cert, gt, 1) == 1.0

    def test_all_abstain_scores_one_with_full_abstention_flag(self):
        gt = gt_of([[0, 1], [1, 0]], 2)
        cert = cert_of([[2, 2], [2, 2]], 2)
        assert certified_dice(cert, gt, 1) == 1.0
        assert certified_iou(cert, gt, 1) == 1.0
        assert abstain_fraction(cert) == 1.0

    def test_disjoint_nonempty_sets(self):
        gt = gt_of([[1, 1], [1, 1]], 2)
        cert = cert_of([[0, 0], [0, 0]], 2)
        assert certified_dice(cert, gt, 1) == 0.0
        assert certified_iou(cert, gt, 1) == 0.0

    def test_abstain_fraction_counts(self):
        data = np.zeros((4, 4), dtype=np.int64)
        data[0, :3] = 2
        cert = cert_of(data, 2)
        assert abstain_fraction(cert) == 3 / 16

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            certified_dice(cert_of([[0]], 2), gt_of([[0, 1]], 2), 0)


class TestIdentitiesAndInvariances:
    def test_dice_iou_identity(self):
        rng = np.random.Generator(np.random.Philox(key=60))
        k = 3
        for _ in range(100):
            cert = cert_of(rng.integers(0, k + 1, size=(9, 9)), k)
            gt = gt_of(rng.integers(0, k, size=(9, 9)), k)
            for c in range(k):
                dice = certified_dice(cert, gt, c)
                iou = certified_iou(cert, gt, c)
                assert abs(dice - 2 * iou / (1 + iou)) < 1e-12
                assert dice >= iou

    def test_relabeling_invariance(self):
        rng = np.random.Generator(np.random.Philox(key=61))
        k = 4
        cert_arr = rng.integers(0, k + 1, size=(8, 8))
        gt_arr = rng.integers(0, k, size=(8, 8))
        perm = np.array([2, 0, 3, 1])
        inv_cert = np.where(cert_arr == k, k, perm[np.minimum(cert_arr, k - 1)])
        for c in range(k):
            d0 = certified_dice(cert_of(cert_arr, k), gt_of(gt_arr, k), c)
            d1 = certified_dice(cert_of(inv_cert, k), gt_of(perm[gt_arr], k), int(perm[c]))
            assert d0 == d1

    def test_no_abstain_reduces_to_plain_overlap(self):
        rng = np.random.Generator(np.random.Philox(key=62))
        k = 3
        cert_arr = rng.integers(0, k, size=(10, 10))
        gt_arr = rng.integers(0, k, size=(10, 10))
        for c in range(k):
            pred = cert_arr == c
            truth = gt_arr == c
            inter = (pred & truth).sum()
            denom = pred.sum() + truth.sum()
            plain = 1.0 if denom == 0 else 2 * inter / denom
            assert certified_dice(cert_of(cert_arr, k), gt_of(gt_arr, k), c) == plain


class TestAggregate:
    def _report(self, cert_arr, gt_arr, k=2):
        return image_report(cert_of(cert_arr, k), gt_of(gt_arr, k))

    def test_single_image_is_itself(self):
        r = self._report([[0, 1], [1, 2]], [[0, 1], [1, 0]])
        agg = aggregate([r])
        assert agg.per_class == r.per_class
        assert agg.abstain_fraction == r.abstain_fraction
        assert agg.image_count == 1

    def test_mean_of_two(self):
        r1 = self._report([[1, 1], [1, 1]], [[1, 1], [1, 1]])  # dice 1.0
        r2 = self._report([[1, 1], [0, 0]], [[1, 0], [0, 1]])  # dice 0.5 for class 1
        agg = aggregate([r1, r2])
        assert agg.per_class[1].certified_dice == pytest.approx(0.75)
        assert agg.image_count == 2

    def test_permutation_invariant(self):
        rng = np.random.Generator(np.random.Philox(key=63))
        reports = [
            self._report(rng.integers(0, 3, (5, 5)), rng.integers(0, 2, (5, 5)))
            for _ in range(6)
        ]
        a = aggregate(reports)
        b = aggregate(list(reversed(reports)))
        assert a == b

    def test_empty_rejected(self):
        with pytest.raises(EmptyDatasetError):
            aggregate([])


class TestCsv:
    def test_layout(self):
        r = image_report(cert_of([[0, 1], [1, 2]], 2), gt_of([[0, 1], [1, 0]], 2))
        buf = io.StringIO()
        write_report_csv(buf, r, dataset="ds", model="threshold:0.5", sigma=0.25, radius=0.1686)
        lines = buf.getvalue().strip().split("\n")
        assert lines[0] == "dataset,model,sigma,radius,class,dice,iou,abstain_fraction"
        assert len(lines) == 3  # one row per class
        assert lines[1].startswith("ds,threshold:0.5,0.25,0.1686,0,")
