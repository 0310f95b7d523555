import numpy as np
import pytest

from certseg.certifier import CERTIFICATION_PHASE, collect_samples
from certseg.core import CertifyConfig, Image, validate_image
from certseg.errors import DomainError
from certseg.models import PrototypeSegmenter, ThresholdSegmenter
from certseg.synth import (
    class_intensities,
    exact_smoothed_prob,
    generate_scene,
    input_for_smoothed_prob,
)

from oracles import phi


class TestGenerateScene:
    def test_deterministic(self):
        a = generate_scene(123, 32, 24, 3, 4)
        b = generate_scene(123, 32, 24, 3, 4)
        assert (a.image.data == b.image.data).all()
        assert (a.ground_truth.data == b.ground_truth.data).all()
        assert a.spec == b.spec

    def test_zero_shapes_is_all_background(self):
        scene = generate_scene(7, 16, 16, 3, 0)
        assert (scene.ground_truth.data == 0).all()
        assert (scene.image.data == 0.0).all()

    def test_image_is_valid(self):
        validate_image(generate_scene(1, 20, 20, 4, 5).image)

    def test_margins(self):
        for seed in range(8):
            gt = generate_scene(seed, 24, 40, 3, 6).ground_truth.data
            border = np.concatenate([gt[:2].ravel(), gt[-2:].ravel(), gt[:, :2].ravel(), gt[:, -2:].ravel()])
            assert (border == 0).all()

    def test_ground_truth_matches_rasterization_oracle(self):
        scene = generate_scene(42, 28, 22, 4, 5)
        gt = scene.ground_truth.data
        for y in range(28):
            for x in range(22):
                expect = 0
                for shape in scene.spec.shapes:  # later shapes overdraw
                    if shape.kind == "disk":
                        cy, cx, r = shape.params
                        inside = (y - cy) ** 2 + (x - cx) ** 2 <= r * r
                    else:
                        y0, x0, y1, x1 = shape.params
                        inside = y0 <= y <= y1 and x0 <= x <= x1
                    if inside:
                        expect = shape.class_id
                assert gt[y, x] == expect

    def test_clean_segmentation_reproduces_ground_truth(self):
        scene = generate_scene(9, 32, 32, 3, 4)
        seg = PrototypeSegmenter(scene.spec.class_intensities)
        assert (seg.segment(scene.image.data) == scene.ground_truth.data).all()

    def test_intensity_separation(self):
        for k in (2, 3, 7, 16):
            v = class_intensities(k)
            gaps = np.diff(np.sort(v.astype(np.float64)))
            assert (gaps >= 1.0 / k - 1e-9).all()

    def test_class_count_limits(self):
        with pytest.raises(DomainError):
            class_intensities(1)
        with pytest.raises(DomainError):
            class_intensities(100000)


class TestExactSmoothedProb:
    def test_at_threshold_is_half(self):
        assert exact_smoothed_prob(0.5, 0.5, 0.25) == 0.5

    def test_one_sigma_above(self):
        assert exact_smoothed_prob(0.75, 0.5, 0.25) == pytest.approx(phi(1.0), abs=1e-15)
        assert exact_smoothed_prob(0.75, 0.5, 0.25) == pytest.approx(0.8413447460685429, abs=1e-12)

    def test_small_sigma_limit(self):
        assert exact_smoothed_prob(0.6, 0.5, 1e-12) == 1.0

    def test_inverse(self):
        for target in (0.55, 0.7, 0.75, 0.9):
            x = input_for_smoothed_prob(target, 0.5, 0.3)
            assert exact_smoothed_prob(x, 0.5, 0.3) == pytest.approx(target, abs=1e-12)

    def test_rejects_bad_sigma(self):
        with pytest.raises(DomainError):
            exact_smoothed_prob(0.5, 0.5, 0.0)


class TestMonteCarloAgreement:
    def test_sampled_agreement_matches_closed_form(self):
        # 1-pixel threshold model, n = 1e5 draws, 6-sigma binomial band
        theta, sigma = 0.5, 0.25
        n = 100_000
        for target in (0.6, 0.75, 0.9):
            x_val = input_for_smoothed_prob(target, theta, sigma)
            img = Image.from_array(np.full((1, 1), np.float32(x_val)))
            model = ThresholdSegmenter([theta])
            cfg = CertifyConfig(sigma=sigma, n=n, seed=777)
            batch = collect_samples(model, None, img, cfg, n, CERTIFICATION_PHASE)
            agree = sum(int(lm.data[0, 0] == 1) for lm in batch.label_maps)
            g = exact_smoothed_prob(float(img.data[0, 0, 0]), theta, sigma)
            band = 6.0 * np.sqrt(g * (1 - g) / n)
            assert abs(agree / n - g) < band
