import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poscl.errors import ConfigError
from poscl.pairing import (
    PairingConfig,
    PairMask,
    build_gcl_mask,
    build_position_mask,
    build_simclr_mask,
    false_negative_stats,
)


def _pairs(mask):
    return {(int(i), int(j)) for i, j in zip(*np.nonzero(mask.positive))}


def brute_force_counts(strategy_positive, positions, t_true):
    """Enumerate every ordered pair; ``strategy_positive(i, j)`` is the mask rule."""
    fn = fp = 0
    for i, j in itertools.permutations(range(len(positions)), 2):
        similar = abs(positions[i] - positions[j]) < t_true
        pos = strategy_positive(i, j)
        fn += similar and not pos
        fp += pos and not similar
    return fn, fp


def two_volume_twins():
    """2 volumes x 20 uniformly spaced slices, each slice appearing as two views."""
    sources = [m / 20 for m in range(20)] * 2
    return np.repeat(sources, 2)


class TestPositionMask:
    def test_clusters(self):
        m = build_position_mask([0.10, 0.10, 0.12, 0.12, 0.50, 0.50], 0.1)
        expected = {(i, j) for i in range(4) for j in range(4) if i != j} | {(4, 5), (5, 4)}
        assert _pairs(m) == expected

    def test_non_transitive(self):
        m = build_position_mask([0.0, 0.08, 0.16], 0.1)
        assert m.positive[0, 1] and m.positive[1, 2]
        assert not m.positive[0, 2]

    def test_large_threshold_all_positive(self):
        m = build_position_mask([0.1, 0.3, 0.35, 0.5], 0.45)
        assert m.positive.sum() == 4 * 3

    def test_tie_is_negative(self):
        m = build_position_mask([0.25, 0.5], 0.25)
        assert not m.positive[0, 1]

    @pytest.mark.parametrize("t", [0.0, 1.0, -0.1, 1.5])
    def test_threshold_range(self, t):
        with pytest.raises(ConfigError):
            build_position_mask([0.1, 0.2], t)

    def test_positions_out_of_range(self):
        with pytest.raises(ConfigError):
            build_position_mask([0.1, 1.0], 0.1)


class TestSimclrMask:
    def test_twins_only(self):
        assert _pairs(build_simclr_mask(2)) == {(0, 1), (1, 0), (2, 3), (3, 2)}

    def test_row_sums(self):
        assert (build_simclr_mask(5).positive.sum(axis=1) == 1).all()

    @pytest.mark.parametrize("t", [0.01, 0.5, 0.99])
    def test_single_source_matches_position_mask(self, t):
        pos = [0.3, 0.3]
        assert np.array_equal(build_simclr_mask(1).positive, build_position_mask(pos, t).positive)


class TestGclMask:
    def test_boundary_false_negative(self):
        m = build_gcl_mask([0.24, 0.26], 4)
        assert not m.positive[0, 1]

    def test_single_partition(self):
        m = build_gcl_mask([0.0, 0.3, 0.9], 1)
        assert m.positive.sum() == 6

    def test_same_partition(self):
        assert build_gcl_mask([0.1, 0.2], 4).positive[0, 1]

    def test_last_partition_clamped(self):
        assert build_gcl_mask([0.99, 0.76], 4).positive[0, 1]


def test_pair_mask_validation():
    with pytest.raises(ConfigError):
        PairMask(np.array([[False, True], [False, False]]))
    with pytest.raises(ConfigError):
        PairMask(np.eye(2, dtype=bool))


def test_pairing_config_dispatch():
    pos = two_volume_twins()[:8]
    assert np.array_equal(PairingConfig("pcl", t=0.1).build(pos).positive, build_position_mask(pos, 0.1).positive)
    assert np.array_equal(PairingConfig("gcl", partitions=4).build(pos).positive, build_gcl_mask(pos, 4).positive)
    assert np.array_equal(PairingConfig("simclr").build(pos).positive, build_simclr_mask(4).positive)
    with pytest.raises(ConfigError):
        PairingConfig("moco")


positions_strategy = st.lists(st.floats(0, 0.999), min_size=2, max_size=24).map(
    lambda xs: np.repeat(xs, 2)
)


@settings(max_examples=60, deadline=None)
@given(pos=positions_strategy, t=st.floats(0.01, 0.99), S=st.integers(1, 8))
def test_masks_symmetric_irreflexive_and_twins_positive(pos, t, S):
    for m in (build_position_mask(pos, t), build_gcl_mask(pos, S), build_simclr_mask(len(pos) // 2)):
        assert np.array_equal(m.positive, m.positive.T)
        assert not m.positive.diagonal().any()
        for i in range(0, len(pos), 2):
            assert m.positive[i, i + 1]


@settings(max_examples=60, deadline=None)
@given(pos=st.lists(st.floats(0, 0.999), min_size=2, max_size=30), t1=st.floats(0.01, 0.99), t2=st.floats(0.01, 0.99))
def test_threshold_monotone(pos, t1, t2):
    lo, hi = sorted((t1, t2))
    small = build_position_mask(pos, lo).positive
    big = build_position_mask(pos, hi).positive
    assert not (small & ~big).any()


@settings(max_examples=40, deadline=None)
@given(pos=st.lists(st.floats(0, 0.999), min_size=2, max_size=20), seed=st.integers(0, 1000), t=st.floats(0.01, 0.99))
def test_permutation_equivariance(pos, seed, t):
    pos = np.array(pos)
    perm = np.random.default_rng(seed).permutation(len(pos))
    for build in (lambda p: build_position_mask(p, t), lambda p: build_gcl_mask(p, 4)):
        assert np.array_equal(build(pos[perm]).positive, build(pos).positive[np.ix_(perm, perm)])


class TestFalseNegatives:
    def test_pcl_matching_threshold_is_exact(self):
        pos = two_volume_twins()
        stats = false_negative_stats(build_position_mask(pos, 0.1), pos, 0.1)
        assert stats["false_neg_count"] == 0 and stats["false_pos_count"] == 0

    def test_simclr_misses_close_sources(self):
        pos = np.repeat([0.30, 0.33], 2)
        assert false_negative_stats(build_simclr_mask(2), pos, 0.1)["false_neg_count"] > 0

    def test_brute_force_ordering(self):
        pos = list(two_volume_twins())
        part = [min(int(p * 4), 3) for p in pos]
        pcl = brute_force_counts(lambda i, j: abs(pos[i] - pos[j]) < 0.1, pos, 0.1)
        gcl = brute_force_counts(lambda i, j: part[i] == part[j], pos, 0.1)
        simclr = brute_force_counts(lambda i, j: i // 2 == j // 2, pos, 0.1)
        assert pcl[0] == 0 < gcl[0] < simclr[0]

        for mask, expected in (
            (build_position_mask(pos, 0.1), pcl),
            (build_gcl_mask(pos, 4), gcl),
            (build_simclr_mask(len(pos) // 2), simclr),
        ):
            stats = false_negative_stats(mask, pos, 0.1)
            assert (stats["false_neg_count"], stats["false_pos_count"]) == expected
            assert stats["false_neg_rate"] == expected[0] / (80 * 79)

    def test_size_mismatch(self):
        with pytest.raises(Exception):
            false_negative_stats(build_simclr_mask(2), [0.1, 0.2], 0.1)
