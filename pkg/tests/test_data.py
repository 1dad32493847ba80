import numpy as np
import pytest

from ckarank.errors import ConfigurationError
from ckarank.experiments.data import (DEFAULT_TARGET_CORRUPTION, Corruption, Domain, SyntheticTaskConfig,
                                      corrupt, generate_dataset)

SRC = SyntheticTaskConfig(image_size=16, seed=11)
TGT = SRC.as_target(Corruption(noise_std=0.05, blur_radius=1, contrast_jitter=0.5, color_cast=0.5))


def test_deterministic():
    a, b = generate_dataset(TGT, 6), generate_dataset(TGT, 6)
    for name in ("images", "masks", "depth", "transparent"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_offset_selects_same_scenes():
    full = generate_dataset(SRC, 6)
    tail = generate_dataset(SRC, 3, offset=3)
    assert np.array_equal(full.images[3:], tail.images)


def test_domains_share_geometry_and_depth():
    s, t = generate_dataset(SRC, 8), generate_dataset(TGT, 8)
    assert np.array_equal(s.masks, t.masks)
    assert np.array_equal(s.depth, t.depth)
    assert np.array_equal(s.transparent, t.transparent)
    assert not np.allclose(s.images, t.images)


def test_shapes_and_ranges():
    ds = generate_dataset(TGT, 5)
    assert ds.images.shape == (5, 3, 16, 16)
    assert ds.depth.shape == (5, 1, 16, 16)
    assert ds.masks.dtype == np.uint8 and set(np.unique(ds.masks)) <= {0, 1}
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    assert ds.masks.reshape(5, -1).any(axis=1).all()


def test_metadata():
    ds = generate_dataset(TGT, 2, offset=4)
    assert ds.metadata["domain"] == "target"
    assert ds.metadata["offset"] == 4 and ds.metadata["n"] == 2
    assert ds.metadata["corruption"]["color_cast"] == 0.5


def test_transparent_fraction_zero():
    cfg = SyntheticTaskConfig(image_size=16, transparent_fraction=0.0)
    assert not generate_dataset(cfg, 20).transparent.any()
    assert not cfg.includes_transparent_analog


def test_seeds_differ():
    a = generate_dataset(SRC, 4)
    b = generate_dataset(SyntheticTaskConfig(image_size=16, seed=12), 4)
    assert not np.array_equal(a.masks, b.masks)


class TestConfig:
    def test_source_rejects_corruption(self):
        with pytest.raises(ConfigurationError):
            SyntheticTaskConfig(corruption=Corruption(noise_std=0.1))

    def test_target_needs_corruption(self):
        with pytest.raises(ConfigurationError):
            SyntheticTaskConfig(domain=Domain.TARGET)

    def test_negative_strength(self):
        with pytest.raises(ConfigurationError):
            Corruption(noise_std=-0.1)

    def test_bad_object_count(self):
        with pytest.raises(ConfigurationError):
            SyntheticTaskConfig(object_count=(3, 1))

    def test_corruption_from_dict(self):
        cfg = SyntheticTaskConfig(domain="target", corruption={"noise_std": 0.1})
        assert cfg.corruption == Corruption(noise_std=0.1)

    def test_default_target_is_nonzero(self):
        assert not DEFAULT_TARGET_CORRUPTION.is_zero
        assert SyntheticTaskConfig().as_target().domain is Domain.TARGET
        assert SyntheticTaskConfig().as_target().as_source().corruption.is_zero


class TestCorrupt:
    def test_zero_is_identity(self):
        img = np.random.default_rng(0).uniform(size=(3, 8, 8))
        assert np.array_equal(corrupt(img, Corruption(), np.random.default_rng(1)), img)

    def test_blur_of_constant_is_constant(self):
        img = np.full((3, 8, 8), 0.4)
        out = corrupt(img, Corruption(blur_radius=2), np.random.default_rng(1))
        assert np.allclose(out, 0.4)

    def test_cast_is_fixed_across_images(self):
        c = Corruption(color_cast=1.0)
        m1, g1, o1 = c.cast()
        m2, g2, o2 = c.cast()
        assert np.array_equal(m1, m2) and np.array_equal(g1, g2) and np.array_equal(o1, o2)
        img = np.full((3, 4, 4), 0.5)
        a = corrupt(img, c, np.random.default_rng(1))
        b = corrupt(img, c, np.random.default_rng(2))
        assert np.array_equal(a, b)

    def test_cast_matches_hand_transform(self):
        c = Corruption(color_cast=0.3)
        mixing, gain, offset = c.cast()
        img = np.random.default_rng(5).uniform(0.3, 0.7, size=(3, 4, 4))
        mixed = np.stack([sum((np.eye(3) + 0.3 * mixing)[i, j] * img[j] for j in range(3)) for i in range(3)])
        mean = mixed.mean(axis=(1, 2), keepdims=True)
        expected = np.clip(mean + (1 + 0.3 * gain) * (mixed - mean) + 0.3 * offset, 0, 1)
        assert np.allclose(corrupt(img, c, np.random.default_rng(0)), expected, atol=1e-12)

    def test_noise_std(self):
        img = np.full((3, 64, 64), 0.5)
        out = corrupt(img, Corruption(noise_std=0.05), np.random.default_rng(3))
        assert abs((out - 0.5).std() - 0.05) < 0.003
