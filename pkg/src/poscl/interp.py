"""Bilinear sampling of 2D grids at arbitrary (row, col) coordinates."""

import numpy as np


def bilinear(img, rows, cols, outside="zero"):
    """Sample ``img`` at fractional coordinates.

    ``outside="zero"`` treats every pixel beyond the grid as 0 (zero fill);
    ``outside="clamp"`` repeats the edge pixels instead.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    if outside == "clamp":
        rows = np.clip(rows, 0, h - 1)
        cols = np.clip(cols, 0, w - 1)
    elif outside != "zero":
        raise ValueError(f"unknown outside mode {outside!r}")

    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0

    padded = np.zeros((h + 2, w + 2))
    padded[1:-1, 1:-1] = img

    def at(r, c):
        # indices shifted by one into the zero border; anything further out reads 0
        r = np.clip(r + 1, 0, h + 1)
        c = np.clip(c + 1, 0, w + 1)
        return padded[r, c]

    top = at(r0, c0) * (1 - fc) + at(r0, c0 + 1) * fc
    bottom = at(r0 + 1, c0) * (1 - fc) + at(r0 + 1, c0 + 1) * fc
    return top * (1 - fr) + bottom * fr


def nearest(grid, rows, cols, fill=0):
    """Nearest-neighbour lookup (for label grids); out-of-range reads ``fill``."""
    grid = np.asarray(grid)
    h, w = grid.shape
    r = np.floor(np.asarray(rows) + 0.5).astype(np.int64)
    c = np.floor(np.asarray(cols) + 0.5).astype(np.int64)
    inside = (r >= 0) & (r < h) & (c >= 0) & (c < w)
    out = np.full(r.shape, fill, dtype=grid.dtype)
    out[inside] = grid[r[inside], c[inside]]
    return out
