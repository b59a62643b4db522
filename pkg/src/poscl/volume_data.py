"""Synthetic volumetric phantoms, preprocessing, slice extraction and sampling.

Volumes are stored as ``(nx, ny, n)`` grids: ``intensities[:, :, m]`` is the
xy-plane slice ``m`` and its relative position along z is ``m / n``.
"""

from __future__ import annotations

import contextlib
import dataclasses
import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError
from .interp import bilinear

VVOL_MAGIC = "VVOL"
VVOL_VERSION = 1
SPLITS = ("pretrain", "labeled", "test")


# -- label access accounting --------------------------------------------------

_label_lock = threading.Lock()
_label_reads = 0


def label_access_count():
    """Total number of label-grid reads since import."""
    return _label_reads


class LabelProbe:
    """Counts label-grid reads made while the probe is open."""

    def __init__(self):
        self._start = None
        self._stop = None

    @property
    def reads(self):
        end = self._stop if self._stop is not None else _label_reads
        return end - self._start


@contextlib.contextmanager
def label_probe():
    probe = LabelProbe()
    probe._start = _label_reads
    try:
        yield probe
    finally:
        probe._stop = _label_reads


def _note_label_read():
    global _label_reads
    with _label_lock:
        _label_reads += 1


# -- data types -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Volume:
    intensities: np.ndarray
    spacing: tuple
    volume_id: str
    family_id: str
    num_classes: int
    _labels: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.intensities.ndim != 3:
            raise DimensionError(f"volume grid must be 3D, got {self.intensities.shape}")
        if self.intensities.shape[2] < 2:
            raise ConfigError("a volume needs at least 2 slices along z")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ConfigError(f"spacings must be three positive values, got {self.spacing}")
        if self._labels is not None:
            if self._labels.shape != self.intensities.shape:
                raise DimensionError(
                    f"labels {self._labels.shape} do not match intensities {self.intensities.shape}"
                )
            if self._labels.size and (self._labels.min() < 0 or self._labels.max() >= self.num_classes):
                raise ConfigError(f"labels must lie in [0, {self.num_classes})")

    @property
    def dims(self):
        return tuple(int(d) for d in self.intensities.shape)

    @property
    def n(self):
        return int(self.intensities.shape[2])

    @property
    def has_labels(self):
        return self._labels is not None

    @property
    def labels(self):
        if self._labels is not None:
            _note_label_read()
        return self._labels

    def without_labels(self):
        return dataclasses.replace(self, _labels=None)


@dataclass(frozen=True, eq=False)
class Slice2D:
    pixels: np.ndarray
    position: float
    volume_id: str
    family_id: str
    slice_index: int
    spacing: tuple
    label: np.ndarray | None = field(default=None, repr=False)


@dataclass(frozen=True)
class SliceBatch:
    slices: tuple

    def __len__(self):
        return len(self.slices)

    @property
    def positions(self):
        return np.array([s.position for s in self.slices])


@dataclass(frozen=True)
class PreprocessConfig:
    target_resolution: tuple = (1.0, 1.0)
    target_size: tuple = (16, 16)
    percentile_lo: float = 1.0
    percentile_hi: float = 99.0

    def __post_init__(self):
        if min(self.target_size) <= 0:
            raise ConfigError("target size must be positive")
        if min(self.target_resolution) <= 0:
            raise ConfigError("target resolution must be positive")
        if not 0 <= self.percentile_lo < self.percentile_hi <= 100:
            raise ConfigError("percentiles must satisfy 0 <= lo < hi <= 100")


# -- synthetic phantoms ---------------------------------------------------------


@dataclass(frozen=True)
class Structure:
    """An ellipsoid-like blob whose cross-section drifts along z.

    Coordinates are fractions of the in-plane extent; ``z_center`` and
    ``z_half`` are fractions of the volume depth.
    """

    start: tuple
    end: tuple
    z_center: float
    z_half: float
    radius: float
    intensity: tuple


@dataclass(frozen=True)
class FamilySpec:
    name: str
    dims: tuple
    spacing: tuple
    structures: tuple
    body_radius: tuple = (0.44, 0.40)
    body_intensity: float = 0.3
    noise_sd: float = 0.05
    center_jitter: float = 0.04
    radius_jitter: float = 0.10
    z_jitter: float = 0.04
    intensity_jitter: float = 0.05

    @property
    def num_classes(self):
        return len(self.structures) + 1


FAMILIES = {
    "A": FamilySpec(
        name="A",
        dims=(16, 16, 24),
        spacing=(1.0, 1.0, 2.0),
        structures=(
            Structure((0.38, 0.42), (0.58, 0.52), 0.45, 0.42, 0.22, (1.0, 0.75)),
            Structure((0.62, 0.30), (0.66, 0.62), 0.28, 0.30, 0.17, (0.55, 0.8)),
            Structure((0.34, 0.68), (0.46, 0.34), 0.76, 0.26, 0.18, (0.85, 0.65)),
        ),
    ),
    # a second acquisition family: coarser in-plane grid, fewer slices,
    # two structures with different geometry and contrast
    "B": FamilySpec(
        name="B",
        dims=(12, 12, 20),
        spacing=(1.25, 1.25, 2.5),
        structures=(
            Structure((0.42, 0.40), (0.55, 0.58), 0.40, 0.40, 0.24, (0.9, 0.7)),
            Structure((0.64, 0.64), (0.36, 0.66), 0.70, 0.30, 0.18, (0.6, 1.0)),
        ),
        body_radius=(0.46, 0.42),
        body_intensity=0.25,
        noise_sd=0.06,
    ),
}


def get_family(name):
    try:
        return FAMILIES[name]
    except KeyError:
        raise ConfigError(f"unknown family {name!r}; known: {sorted(FAMILIES)}") from None


def generate_synthetic_volume(family, seed):
    """Deterministic phantom for ``(family, seed)`` with per-voxel labels."""
    if isinstance(family, str):
        family = get_family(family)
    nx, ny, n = family.dims
    if min(nx, ny, n) < 4:
        raise ConfigError(f"phantom dims {family.dims} too small (need >= 4 voxels per axis)")
    if len(family.structures) < 1:
        raise ConfigError("a family needs at least one structure (num_classes >= 2)")

    rng = np.random.default_rng([int(seed), 0x5EED])
    xs = (np.arange(nx) + 0.5) / nx
    ys = (np.arange(ny) + 0.5) / ny
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    zs = (np.arange(n) + 0.5) / n

    vol = np.zeros((nx, ny, n))
    labels = np.zeros((nx, ny, n), dtype=np.uint16)

    body_scale = 1.0 + rng.uniform(-0.05, 0.05, size=2)
    rx, ry = np.array(family.body_radius) * body_scale
    for m, z in enumerate(zs):
        taper = 1.0 - 0.25 * (2 * z - 1) ** 2
        body = ((X - 0.5) / (rx * taper)) ** 2 + ((Y - 0.5) / (ry * taper)) ** 2 <= 1.0
        vol[:, :, m][body] = family.body_intensity

    peaks = []
    for k, s in enumerate(family.structures, start=1):
        shift = rng.uniform(-family.center_jitter, family.center_jitter, size=2)
        radius = s.radius * (1.0 + rng.uniform(-family.radius_jitter, family.radius_jitter))
        zc = s.z_center + rng.uniform(-family.z_jitter, family.z_jitter)
        level = rng.uniform(-family.intensity_jitter, family.intensity_jitter)
        start = np.array(s.start) + shift
        end = np.array(s.end) + shift
        best = (-1.0, 0, 0, 0)
        for m, z in enumerate(zs):
            u = (z - (zc - s.z_half)) / (2 * s.z_half)
            extent = 1.0 - ((z - zc) / s.z_half) ** 2
            if extent <= 0:
                continue
            t = float(np.clip(u, 0.0, 1.0))
            cx, cy = start + t * (end - start)
            r = radius * math.sqrt(extent)
            inside = (X - cx) ** 2 + (Y - cy) ** 2 <= r * r
            value = s.intensity[0] + t * (s.intensity[1] - s.intensity[0]) + level
            vol[:, :, m][inside] = value
            labels[:, :, m][inside] = k
            if r > best[0]:
                best = (r, int(np.clip(cx * nx, 0, nx - 1)), int(np.clip(cy * ny, 0, ny - 1)), m)
        peaks.append((k, best))

    # guarantee every class is present even when jitter shrinks a blob below a voxel
    for k, (_, ix, iy, m) in peaks:
        if not (labels == k).any():
            labels[ix, iy, m] = k
            vol[ix, iy, m] = family.structures[k - 1].intensity[0]

    vol = vol + rng.normal(0.0, family.noise_sd, size=vol.shape)
    vol = vol.astype(np.float32).astype(np.float64)
    return Volume(
        intensities=vol,
        spacing=tuple(float(s) for s in family.spacing),
        volume_id=f"{family.name}-{int(seed):05d}",
        family_id=family.name,
        num_classes=family.num_classes,
        _labels=labels,
    )


# -- preprocessing --------------------------------------------------------------


def percentile_normalize(v, lo=1.0, hi=99.0):
    """Clip to the [lo, hi] intensity percentiles and map that range onto [0, 1].

    Percentiles use linear interpolation at rank ``p/100 * (count - 1)``.
    A volume whose two percentiles coincide maps to all zeros.
    """
    x = v.intensities
    if x.size == 0:
        raise ConfigError("cannot normalize an empty volume")
    p_lo, p_hi = np.percentile(x, [lo, hi], method="linear")
    if p_hi == p_lo:
        out = np.zeros_like(x)
    else:
        out = (np.clip(x, p_lo, p_hi) - p_lo) / (p_hi - p_lo)
    return dataclasses.replace(v, intensities=out)


def extract_slice(v, m, with_labels=True):
    if not 0 <= m < v.n:
        raise IndexError(f"slice index {m} out of range for {v.n} slices")
    label = None
    if with_labels and v.has_labels:
        label = v.labels[:, :, m].copy()
    return Slice2D(
        pixels=v.intensities[:, :, m].copy(),
        position=m / v.n,
        volume_id=v.volume_id,
        family_id=v.family_id,
        slice_index=int(m),
        spacing=(float(v.spacing[0]), float(v.spacing[1])),
        label=label,
    )


def _resampled_extent(size, spacing, target):
    return max(1, int(round(size * spacing / target)))


def resample_pad(s, cfg):
    """Resample a slice to the target resolution, then zero-pad to the target size.

    Pixels are resampled bilinearly (edge-clamped), labels by nearest neighbour.
    Padding is symmetric with the odd pixel going to the bottom/right.  Slices
    that come out larger than the target size are rejected: no cropping.
    """
    h, w = s.pixels.shape
    th, tw = cfg.target_size
    fr = cfg.target_resolution
    nh = _resampled_extent(h, s.spacing[0], fr[0])
    nw = _resampled_extent(w, s.spacing[1], fr[1])
    if nh > th or nw > tw:
        raise ConfigError(
            f"slice resamples to {nh}x{nw}, larger than target size {th}x{tw}; "
            "increase the target size (cropping is not allowed)"
        )

    if (nh, nw) == (h, w):
        pixels = s.pixels
        label = s.label
    else:
        rows = (np.arange(nh) + 0.5) * (h / nh) - 0.5
        cols = (np.arange(nw) + 0.5) * (w / nw) - 0.5
        R, C = np.meshgrid(rows, cols, indexing="ij")
        pixels = bilinear(s.pixels, R, C, outside="clamp")
        label = None
        if s.label is not None:
            ri = np.clip(np.floor((np.arange(nh) + 0.5) * (h / nh)).astype(int), 0, h - 1)
            ci = np.clip(np.floor((np.arange(nw) + 0.5) * (w / nw)).astype(int), 0, w - 1)
            label = s.label[np.ix_(ri, ci)]

    if (nh, nw) == (th, tw):
        out_pixels = pixels.copy()
        out_label = None if label is None else label.copy()
    else:
        top, left = (th - nh) // 2, (tw - nw) // 2
        out_pixels = np.zeros((th, tw))
        out_pixels[top:top + nh, left:left + nw] = pixels
        out_label = None
        if label is not None:
            out_label = np.zeros((th, tw), dtype=label.dtype)
            out_label[top:top + nh, left:left + nw] = label
    return dataclasses.replace(
        s,
        pixels=out_pixels,
        label=out_label,
        spacing=(float(fr[0]), float(fr[1])),
    )


def preprocess(v, cfg, with_labels=True):
    """Percentile-normalize a volume and bring every slice onto the target grid."""
    v = percentile_normalize(v, cfg.percentile_lo, cfg.percentile_hi)
    keep_labels = with_labels and v.has_labels
    slices = [resample_pad(extract_slice(v, m, keep_labels), cfg) for m in range(v.n)]
    pixels = np.stack([s.pixels for s in slices], axis=2)
    labels = np.stack([s.label for s in slices], axis=2) if keep_labels else None
    return Volume(
        intensities=pixels,
        spacing=(float(cfg.target_resolution[0]), float(cfg.target_resolution[1]), v.spacing[2]),
        volume_id=v.volume_id,
        family_id=v.family_id,
        num_classes=v.num_classes,
        _labels=labels,
    )


# -- sampling --------------------------------------------------------------------


def sample_batch(pool, N, rng, with_labels=False):
    """Draw ``N`` distinct (volume, slice) pairs uniformly from ``pool``."""
    if N < 1:
        raise ConfigError("batch size must be at least 1")
    if not pool:
        raise ConfigError("cannot sample from an empty pool")
    counts = np.array([v.n for v in pool])
    total = int(counts.sum())
    if N > total:
        raise ConfigError(f"batch of {N} exceeds the {total} slices available")
    picks = rng.choice(total, size=N, replace=False)
    offsets = np.cumsum(counts) - counts
    vol_idx = np.searchsorted(offsets, picks, side="right") - 1
    return SliceBatch(
        tuple(
            extract_slice(pool[vi], int(p - offsets[vi]), with_labels)
            for vi, p in zip(vol_idx, picks)
        )
    )


# -- file formats ---------------------------------------------------------------


def write_volume(v, path):
    """Write a volume in the VVOL v1 format (JSON header line + raw LE arrays)."""
    header = {
        "magic": VVOL_MAGIC,
        "version": VVOL_VERSION,
        "dims": list(v.dims),
        "spacing": [float(s) for s in v.spacing],
        "has_labels": v.has_labels,
        "volume_id": v.volume_id,
        "family_id": v.family_id,
        "num_classes": int(v.num_classes),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(v.intensities.astype("<f4").tobytes(order="F"))
        if v.has_labels:
            fh.write(v.labels.astype("<u2").tobytes(order="F"))


def read_volume(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    newline = raw.find(b"\n")
    if newline < 0:
        raise ConfigError(f"{path}: missing VVOL header line")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: unreadable VVOL header ({exc})") from None
    if header.get("magic") != VVOL_MAGIC or header.get("version") != VVOL_VERSION:
        raise ConfigError(f"{path}: not a VVOL v1 file")
    dims = tuple(int(d) for d in header["dims"])
    count = int(np.prod(dims))
    body = raw[newline + 1:]
    expected = count * 4 + (count * 2 if header["has_labels"] else 0)
    if len(body) != expected:
        raise ConfigError(f"{path}: payload is {len(body)} bytes, expected {expected}")
    intens = np.frombuffer(body, dtype="<f4", count=count).reshape(dims, order="F")
    labels = None
    if header["has_labels"]:
        labels = np.frombuffer(body, dtype="<u2", count=count, offset=count * 4)
        labels = labels.reshape(dims, order="F").astype(np.uint16)
    return Volume(
        intensities=intens.astype(np.float64),
        spacing=tuple(float(s) for s in header["spacing"]),
        volume_id=header["volume_id"],
        family_id=header["family_id"],
        num_classes=int(header["num_classes"]),
        _labels=labels,
    )


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    family_id: str
    split: str


def write_manifest(entries, path):
    rows = [{"path": e.path, "family_id": e.family_id, "split": e.split} for e in entries]
    Path(path).write_text(json.dumps(rows, indent=1) + "\n")


def read_manifest(path):
    """Load a manifest; relative volume paths resolve against its directory."""
    path = Path(path)
    try:
        rows = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"manifest {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"manifest {path} is not valid JSON ({exc})") from None
    if not isinstance(rows, list):
        raise ConfigError(f"manifest {path} must be a JSON list")
    entries, seen = [], set()
    for row in rows:
        try:
            p, fam, split = row["path"], row["family_id"], row["split"]
        except (KeyError, TypeError):
            raise ConfigError(f"manifest {path}: entries need path, family_id, split") from None
        if split not in SPLITS:
            raise ConfigError(f"manifest {path}: unknown split {split!r}")
        full = (path.parent / p).resolve()
        if full in seen:
            raise ConfigError(f"manifest {path}: duplicate path {p}")
        if not full.exists():
            raise ConfigError(f"manifest {path}: missing volume file {p}")
        seen.add(full)
        entries.append(ManifestEntry(str(full), fam, split))
    return entries


def load_volumes(entries, splits=None):
    return [read_volume(e.path) for e in entries if splits is None or e.split in splits]
