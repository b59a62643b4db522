"""Positive-pair masks for positional (PCL), partition (GCL) and twin-only (SimCLR) pairing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError

STRATEGIES = ("pcl", "gcl", "simclr")


@dataclass(frozen=True, eq=False)
class PairMask:
    """Symmetric, irreflexive 2N x 2N positive-pair relation.

    Row ``i`` lists the positive set of sample ``i``.
    """

    positive: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.positive, dtype=bool)
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            raise DimensionError(f"pair mask must be square, got {p.shape}")
        if not np.array_equal(p, p.T):
            raise ConfigError("pair mask must be symmetric")
        if p.diagonal().any():
            raise ConfigError("pair mask must be irreflexive")
        p.setflags(write=False)
        object.__setattr__(self, "positive", p)

    @property
    def size(self):
        return self.positive.shape[0]

    def positives_of(self, i):
        return np.flatnonzero(self.positive[i])


@dataclass(frozen=True)
class PairingConfig:
    strategy: str = "pcl"
    t: float = 0.1
    partitions: int = 4

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown pairing strategy {self.strategy!r}; use one of {STRATEGIES}")
        if self.strategy == "pcl" and not 0 < self.t < 1:
            raise ConfigError(f"threshold t must lie in (0, 1), got {self.t}")
        if self.strategy == "gcl" and self.partitions < 1:
            raise ConfigError("partition count must be at least 1")

    def build(self, positions):
        if self.strategy == "pcl":
            return build_position_mask(positions, self.t)
        if self.strategy == "gcl":
            return build_gcl_mask(positions, self.partitions)
        if len(positions) % 2:
            raise DimensionError("twin pairing needs an even number of samples")
        return build_simclr_mask(len(positions) // 2)


def _positions(positions):
    p = np.asarray(positions, dtype=np.float64)
    if p.ndim != 1:
        raise DimensionError("positions must be a flat sequence")
    if p.size and (p.min() < 0 or p.max() >= 1):
        raise ConfigError("positions must lie in [0, 1)")
    return p


def _offdiag(relation):
    np.fill_diagonal(relation, False)
    return PairMask(relation)


def build_position_mask(positions, t):
    """Positive iff two samples' positions differ by strictly less than ``t``.

    Volume membership is ignored: close slices of different volumes pair up.
    """
    if not 0 < t < 1:
        raise ConfigError(f"threshold t must lie in (0, 1), got {t}")
    p = _positions(positions)
    return _offdiag(np.abs(p[:, None] - p[None, :]) < t)


def build_simclr_mask(N):
    if N < 1:
        raise ConfigError("need at least one source slice")
    twin = np.arange(2 * N) // 2
    return _offdiag(twin[:, None] == twin[None, :])


def partition_of(positions, S):
    p = np.asarray(positions, dtype=np.float64)
    return np.minimum(np.floor(p * S).astype(np.int64), S - 1)


def build_gcl_mask(positions, S):
    """Positive iff both samples fall in the same one of ``S`` equal position bins."""
    if S < 1:
        raise ConfigError("partition count must be at least 1")
    part = partition_of(_positions(positions), S)
    return _offdiag(part[:, None] == part[None, :])


def false_negative_stats(mask, positions, t_true):
    """Count disagreements with the ground-truth relation ``|dposition| < t_true``.

    Rates are over all 2N(2N-1) ordered off-diagonal pairs.
    """
    if not 0 < t_true < 1:
        raise ConfigError(f"t_true must lie in (0, 1), got {t_true}")
    p = _positions(positions)
    if p.size != mask.size:
        raise DimensionError(f"mask covers {mask.size} samples but {p.size} positions given")
    truth = np.abs(p[:, None] - p[None, :]) < t_true
    np.fill_diagonal(truth, False)
    pos = mask.positive
    fn = int(np.count_nonzero(truth & ~pos))
    fp = int(np.count_nonzero(pos & ~truth))
    pairs = p.size * (p.size - 1)
    return {
        "false_neg_count": fn,
        "false_neg_rate": fn / pairs if pairs else 0.0,
        "false_pos_count": fp,
        "false_pos_rate": fp / pairs if pairs else 0.0,
    }
