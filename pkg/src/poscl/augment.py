"""Position-preserving spatial augmentation and contrastive batch assembly."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .interp import bilinear


@dataclass(frozen=True)
class AugConfig:
    max_translate: float = 0.1
    max_rotate: float = 15.0
    scale_range: tuple = (0.9, 1.1)

    def __post_init__(self):
        if not 0 <= self.max_translate <= 0.5:
            raise ConfigError("max_translate must lie in [0, 0.5]")
        if self.max_rotate < 0:
            raise ConfigError("max_rotate must be non-negative")
        lo, hi = self.scale_range
        if not (0 < lo <= 1 <= hi):
            raise ConfigError("scale_range must satisfy 0 < lo <= 1 <= hi")


NO_AUGMENT = AugConfig(max_translate=0.0, max_rotate=0.0, scale_range=(1.0, 1.0))


@dataclass(frozen=True)
class AugBatch:
    """2N augmented images; rows 2i and 2i+1 are the two views of source slice i."""

    images: np.ndarray
    positions: np.ndarray
    volume_ids: tuple
    slice_indices: tuple

    def __len__(self):
        return len(self.positions)


def affine_warp(pixels, translate=(0.0, 0.0), angle=0.0, scale=1.0):
    """Translate, then rotate (degrees, counter-clockwise) and scale about the centre.

    Output pixels are pulled back through the inverse map and sampled
    bilinearly; anything that lands outside the input reads as 0.
    """
    h, w = pixels.shape
    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(angle)
    cos, sin = math.cos(theta), math.sin(theta)
    R, C = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dr, dc = (R - cr) / scale, (C - cc) / scale
    rows = cr + dr * cos + dc * sin - translate[0]
    cols = cc + dc * cos - dr * sin - translate[1]
    return bilinear(pixels, rows, cols, outside="zero")


def sample_params(cfg, shape, rng):
    h, w = shape
    t = cfg.max_translate
    # all four draws always happen so the stream stays aligned across configs
    tr = rng.uniform(-t, t) * h
    tc = rng.uniform(-t, t) * w
    angle = rng.uniform(-cfg.max_rotate, cfg.max_rotate)
    scale = rng.uniform(*cfg.scale_range)
    return (float(tr), float(tc)), float(angle), float(scale)


def random_augment(s, cfg, rng):
    """Randomly warp a slice; position and provenance are carried over untouched."""
    if s.pixels.size == 0:
        raise ConfigError("cannot augment an empty slice")
    translate, angle, scale = sample_params(cfg, s.pixels.shape, rng)
    return dataclasses.replace(s, pixels=affine_warp(s.pixels, translate, angle, scale), label=None)


def make_contrastive_batch(batch, cfg, rng):
    if len(batch) < 1:
        raise ConfigError("contrastive batch needs at least one source slice")
    images, positions, vids, idx = [], [], [], []
    for s in batch.slices:
        for _ in range(2):
            images.append(random_augment(s, cfg, rng).pixels)
            positions.append(s.position)
            vids.append(s.volume_id)
            idx.append(s.slice_index)
    return AugBatch(np.stack(images), np.array(positions), tuple(vids), tuple(idx))
