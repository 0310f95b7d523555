import numpy as np
import pytest

from certseg.core import (
    CertifiedSegmentation,
    CertifyConfig,
    Image,
    LabelMap,
    derive_stream_seed,
    derive_stream_seeds,
    validate_image,
)
from certseg.errors import DomainError, OutOfRangeError, ShapeMismatchError


class TestStreamSeeds:
    def test_deterministic(self):
        assert derive_stream_seed(17, 3, 9) == derive_stream_seed(17, 3, 9)

    def test_argument_order_matters(self):
        s = 0xDEADBEEF
        assert derive_stream_seed(s, 0, 1) != derive_stream_seed(s, 1, 0)

    def test_no_collisions_over_a_million_pairs(self):
        # hash-quality check: all (image, sample) pairs on a 1000x1000 grid
        # must map to distinct 64-bit seeds
        img = np.repeat(np.arange(1000, dtype=np.uint64), 1000)
        smp = np.tile(np.arange(1000, dtype=np.uint64), 1000)
        seeds = derive_stream_seeds(123456789, img, smp)
        assert np.unique(seeds).size == seeds.size

    def test_vectorized_matches_scalar(self):
        rng = np.random.Generator(np.random.Philox(key=7))
        masters = rng.integers(0, 2**64, 50, dtype=np.uint64)
        imgs = rng.integers(0, 2**32, 50, dtype=np.uint64)
        smps = rng.integers(0, 2**34, 50, dtype=np.uint64)
        for m, i, j in zip(masters, imgs, smps):
            vec = derive_stream_seeds(int(m), np.uint64(i), np.uint64(j))
            assert int(vec) == derive_stream_seed(int(m), int(i), int(j))

    def test_uint64_range(self):
        s = derive_stream_seed(2**64 - 1, 2**64 - 1, 2**64 - 1)
        assert 0 <= s < 2**64


class TestImage:
    def test_all_zeros_validates(self):
        img = Image(4, 4, 1, np.zeros(16, dtype=np.float32))
        assert validate_image(img) is img

    def test_out_of_range_element(self):
        data = np.zeros(16, dtype=np.float32)
        data[5] = 1.5
        with pytest.raises(OutOfRangeError):
            validate_image(Image(4, 4, 1, data))

    def test_nan_rejected(self):
        data = np.zeros(16, dtype=np.float32)
        data[0] = np.nan
        with pytest.raises(OutOfRangeError):
            validate_image(Image(4, 4, 1, data))

    def test_wrong_payload_length(self):
        with pytest.raises(ShapeMismatchError):
            Image(4, 4, 1, np.zeros(15, dtype=np.float32))

    def test_channels_must_be_1_or_3(self):
        with pytest.raises(DomainError):
            Image(4, 4, 2, np.zeros(32, dtype=np.float32))

    def test_from_array_2d(self):
        img = Image.from_array(np.full((3, 5), 0.5))
        assert img.shape == (3, 5, 1)
        assert img.data.dtype == np.float32

    def test_immutable(self):
        img = Image(2, 2, 1, np.zeros(4, dtype=np.float32))
        with pytest.raises(ValueError):
            img.data[0, 0, 0] = 1.0


class TestLabelMap:
    def test_basic(self):
        lm = LabelMap(2, 3, 4, np.arange(6) % 4)
        assert lm.shape == (2, 3)
        assert lm.data.dtype == np.uint16

    def test_label_out_of_range(self):
        with pytest.raises(OutOfRangeError):
            LabelMap(2, 2, 2, np.array([[0, 1], [2, 0]]))

    def test_needs_two_classes(self):
        with pytest.raises(DomainError):
            LabelMap(2, 2, 1, np.zeros((2, 2), dtype=np.int64))


class TestCertifyConfig:
    def test_defaults(self):
        cfg = CertifyConfig(sigma=0.25)
        assert (cfg.n0, cfg.n, cfg.alpha, cfg.tau) == (10, 100, 0.001, 0.75)
        assert cfg.denoise_mode == "none"

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"sigma": 0.0},
            {"sigma": -1.0},
            {"sigma": 0.25, "tau": 0.5},
            {"sigma": 0.25, "tau": 1.0},
            {"sigma": 0.25, "alpha": 0.0},
            {"sigma": 0.25, "n0": 0},
            {"sigma": 0.25, "seed": -1},
            {"sigma": 0.25, "seed": 2**64},
            {"sigma": 0.25, "denoise_mode": "twice"},
        ],
    )
    def test_invalid_rejected(self, kwargs):
        with pytest.raises(DomainError):
            CertifyConfig(**kwargs)

    def test_dict_round_trip(self):
        cfg = CertifyConfig(sigma=0.5, seed=42, denoise_mode="single_step")
        assert CertifyConfig.from_dict(cfg.to_dict()) == cfg


class TestCertifiedSegmentation:
    def test_abstain_sentinel_distinct_from_classes(self):
        cfg = CertifyConfig(sigma=0.25)
        data = np.array([[0, 1], [2, 3]])  # 3 == ABSTAIN for k=3
        cert = CertifiedSegmentation(2, 2, 3, data, radius=0.1, config=cfg)
        assert cert.abstain_value == 3
        assert cert.abstain_value not in range(cert.num_classes)
        assert cert.abstain_mask().sum() == 1

    def test_rejects_values_above_abstain(self):
        cfg = CertifyConfig(sigma=0.25)
        with pytest.raises(OutOfRangeError):
            CertifiedSegmentation(1, 2, 3, np.array([[0, 4]]), radius=0.1, config=cfg)
