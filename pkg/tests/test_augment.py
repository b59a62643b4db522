import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poscl.augment import (
    NO_AUGMENT,
    AugConfig,
    affine_warp,
    make_contrastive_batch,
    random_augment,
)
from poscl.errors import ConfigError
from poscl.volume_data import Slice2D, SliceBatch, extract_slice, generate_synthetic_volume


class ForcedRng:
    """Stands in for a Generator; ``uniform`` returns queued values."""

    def __init__(self, values):
        self.values = list(values)

    def uniform(self, lo=0.0, hi=1.0):
        return self.values.pop(0)


def _slice(pixels, position=0.4):
    return Slice2D(np.asarray(pixels, dtype=np.float64), position, "v7", "A", 3, (1.0, 1.0))


def test_zero_config_is_identity():
    px = np.random.default_rng(0).normal(size=(6, 5))
    out = random_augment(_slice(px), NO_AUGMENT, np.random.default_rng(1))
    assert out.pixels.tobytes() == px.tobytes()


def test_rotate_90_matches_hand_rotation():
    s = _slice([[1.0, 2.0], [3.0, 4.0]])
    cfg = AugConfig(max_translate=0.0, max_rotate=90.0, scale_range=(1.0, 1.0))
    out = random_augment(s, cfg, ForcedRng([0.0, 0.0, 90.0, 1.0]))
    # counter-clockwise quarter turn of [[1,2],[3,4]]
    np.testing.assert_allclose(out.pixels, [[2.0, 4.0], [1.0, 3.0]], atol=1e-12)


def test_translate_one_pixel_down_with_zero_fill():
    px = np.arange(1.0, 10.0).reshape(3, 3)
    out = affine_warp(px, translate=(1.0, 0.0))
    np.testing.assert_allclose(out, [[0, 0, 0], [1, 2, 3], [4, 5, 6]], atol=1e-12)


def test_scale_two_about_center():
    px = np.zeros((5, 5))
    px[2, 2] = 1.0
    px[2, 3] = 1.0
    out = affine_warp(px, scale=2.0)
    # centre fixed; the pixel one step right now sits two steps right
    assert out[2, 2] == 1.0 and out[2, 4] == 1.0
    assert out[2, 3] == 1.0  # halfway sample between two ones


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    translate=st.floats(0, 0.5),
    rotate=st.floats(0, 180),
    lo=st.floats(0.5, 1.0),
    hi=st.floats(1.0, 2.0),
)
def test_metadata_preserved_and_values_bounded(seed, translate, rotate, lo, hi):
    rng = np.random.default_rng(seed)
    s = _slice(rng.uniform(-1, 3, size=(8, 7)), position=rng.uniform(0, 1))
    out = random_augment(s, AugConfig(translate, rotate, (lo, hi)), rng)
    assert out.position == s.position
    assert (out.volume_id, out.family_id, out.slice_index) == (s.volume_id, s.family_id, s.slice_index)
    assert out.pixels.min() >= min(0.0, s.pixels.min()) - 1e-12
    assert out.pixels.max() <= max(0.0, s.pixels.max()) + 1e-12


@pytest.mark.parametrize(
    "kwargs",
    [dict(max_translate=0.6), dict(max_rotate=-1.0), dict(scale_range=(1.1, 1.2)), dict(scale_range=(0.8, 0.9))],
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        AugConfig(**kwargs)


class TestContrastiveBatch:
    @pytest.fixture
    def batch(self):
        v = generate_synthetic_volume("A", 0).without_labels()
        return SliceBatch(tuple(extract_slice(v, m) for m in (2, 9, 17)))

    def test_shape_and_interleaving(self, batch):
        aug = make_contrastive_batch(batch, AugConfig(), np.random.default_rng(0))
        assert aug.images.shape == (6, 16, 16)
        np.testing.assert_array_equal(aug.positions, np.repeat(batch.positions, 2))
        assert aug.slice_indices == (2, 2, 9, 9, 17, 17)

    def test_views_differ(self, batch):
        aug = make_contrastive_batch(batch, AugConfig(), np.random.default_rng(0))
        assert not np.array_equal(aug.images[0], aug.images[1])

    def test_deterministic(self, batch):
        a = make_contrastive_batch(batch, AugConfig(), np.random.default_rng(5))
        b = make_contrastive_batch(batch, AugConfig(), np.random.default_rng(5))
        assert a.images.tobytes() == b.images.tobytes()

    def test_empty_batch(self):
        with pytest.raises(ConfigError):
            make_contrastive_batch(SliceBatch(()), AugConfig(), np.random.default_rng(0))
