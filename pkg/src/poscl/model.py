"""Dense encoder f, projection head g and a one-layer segmentation decoder.

Parameter names are prefixed by the part they belong to: ``enc.*`` (f),
``proj.*`` (g, used only while pretraining) and ``dec.*`` (segmentation).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError

CKPT_MAGIC = "PCLCKPT"
CKPT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    input_hw: tuple = (16, 16)
    hidden_dims: tuple = (256, 128)
    repr_dim: int = 64
    proj_dim: int = 32
    num_classes: int = 4

    def __post_init__(self):
        dims = [*self.input_hw, *self.hidden_dims, self.repr_dim, self.proj_dim, self.num_classes]
        if len(self.input_hw) != 2 or min(dims) < 1:
            raise ConfigError(f"all model dimensions must be >= 1: {self}")
        object.__setattr__(self, "input_hw", tuple(int(x) for x in self.input_hw))
        object.__setattr__(self, "hidden_dims", tuple(int(x) for x in self.hidden_dims))

    def to_dict(self):
        return {
            "input_hw": list(self.input_hw),
            "hidden_dims": list(self.hidden_dims),
            "repr_dim": self.repr_dim,
            "proj_dim": self.proj_dim,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            input_hw=tuple(d["input_hw"]),
            hidden_dims=tuple(d["hidden_dims"]),
            repr_dim=int(d["repr_dim"]),
            proj_dim=int(d["proj_dim"]),
            num_classes=int(d["num_classes"]),
        )


def layer_shapes(cfg):
    """Ordered ``(name, shape)`` for every parameter tensor."""
    h, w = cfg.input_hw
    widths = [h * w, *cfg.hidden_dims, cfg.repr_dim]
    shapes = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        shapes += [(f"enc.{i}.w", (a, b)), (f"enc.{i}.b", (b,))]
    shapes += [
        ("proj.0.w", (cfg.repr_dim, cfg.repr_dim)),
        ("proj.0.b", (cfg.repr_dim,)),
        ("proj.1.w", (cfg.repr_dim, cfg.proj_dim)),
        ("proj.1.b", (cfg.proj_dim,)),
        ("dec.w", (cfg.repr_dim, cfg.num_classes * h * w)),
        ("dec.b", (cfg.num_classes * h * w,)),
    ]
    return shapes


class Params:
    """Ordered named parameter tensors plus the seed they were drawn from."""

    def __init__(self, config, tensors, init_seed):
        self.config = config
        self.tensors = dict(tensors)
        self.init_seed = init_seed
        expected = dict(layer_shapes(config))
        for name, t in self.tensors.items():
            if name not in expected or t.shape != expected[name]:
                raise DimensionError(f"parameter {name} has shape {t.shape}, expected {expected.get(name)}")
        if list(self.tensors) != list(expected):
            raise ConfigError("parameter set does not match the config layout")

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def group(self, prefix):
        return [name for name in self.tensors if name.startswith(prefix)]

    def copy(self):
        return Params(
            self.config,
            {k: Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self.tensors.items()},
            self.init_seed,
        )


def init_params(cfg, seed):
    """Glorot-uniform weights and zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng([int(seed), 0xF00D])
    tensors = {}
    for name, shape in layer_shapes(cfg):
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return Params(cfg, tensors, int(seed))


def _dense(x, p, prefix):
    return x @ p[prefix + ".w"] + ad.repeat_rows(p[prefix + ".b"], x.shape[0])


def _flatten(p, images):
    images = images if isinstance(images, Tensor) else Tensor(images)
    h, w = p.config.input_hw
    if images.ndim != 3 or images.shape[1:] != (h, w):
        raise DimensionError(f"expected images of shape (B, {h}, {w}), got {list(images.shape)}")
    return ad.reshape(images, (images.shape[0], h * w))


def represent(p, images):
    """Encoder f: flatten, then dense+relu layers up to the representation."""
    x = _flatten(p, images)
    for i in range(len(p.config.hidden_dims) + 1):
        x = ad.relu(_dense(x, p, f"enc.{i}"))
    return x


def encode(p, images):
    """Return ``(h, z)``: representations and unit-norm projection embeddings."""
    h = represent(p, images)
    z = _dense(ad.relu(_dense(h, p, "proj.0")), p, "proj.1")
    z, _ = ad.l2_normalize_rows(z)
    return h, z


def segment(p, images):
    """Per-pixel class logits shaped (B, num_classes, H, W)."""
    h = represent(p, images)
    logits = _dense(h, p, "dec")
    H, W = p.config.input_hw
    return ad.reshape(logits, (h.shape[0], p.config.num_classes, H, W))


def cross_entropy(logits, labels):
    """Mean per-pixel cross-entropy of (B, C, H, W) logits against (B, H, W) labels."""
    labels = np.asarray(labels)
    B, C, H, W = logits.shape
    if labels.shape != (B, H, W):
        raise DimensionError(f"labels {labels.shape} do not match logits {list(logits.shape)}")
    if labels.min() < 0 or labels.max() >= C:
        raise ConfigError(f"labels must lie in [0, {C})")
    flat = ad.reshape(ad.transpose(logits, (0, 2, 3, 1)), (B * H * W, C))
    shift = flat.data.max(axis=1, keepdims=True)
    shifted = flat - Tensor(np.broadcast_to(shift, flat.shape))
    lse = ad.log(ad.sum(ad.exp(shifted), axis=1))
    log_prob = shifted - ad.repeat_cols(lse, C)
    onehot = np.zeros((B * H * W, C))
    onehot[np.arange(B * H * W), labels.reshape(-1)] = 1.0
    return ad.scale(ad.sum(ad.mul(log_prob, Tensor(onehot))), -1.0 / (B * H * W))


def predict(p, images, batch=64):
    """Arg-max label maps, evaluated in chunks without building large graphs."""
    images = np.asarray(images)
    out = []
    for start in range(0, len(images), batch):
        logits = segment(p, Tensor(images[start:start + batch])).data
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out).astype(np.int64)


# -- checkpoints --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Checkpoint:
    params: Params
    provenance: dict = dataclasses.field(default_factory=dict)

    @property
    def config(self):
        return self.params.config


def save_checkpoint(ckpt, path):
    """Single-line JSON header, then every tensor as little-endian float64 in header order."""
    p = ckpt.params
    header = {
        "magic": CKPT_MAGIC,
        "version": CKPT_VERSION,
        "config": p.config.to_dict(),
        "init_seed": p.init_seed,
        "provenance": ckpt.provenance,
        "tensors": [{"name": k, "shape": list(t.shape)} for k, t in p.items()],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for t in p.tensors.values():
            fh.write(t.data.astype("<f8").tobytes(order="C"))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    newline = raw.find(b"\n")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        raise ConfigError(f"{path}: unreadable checkpoint header ({exc})") from None
    if header.get("magic") != CKPT_MAGIC or header.get("version") != CKPT_VERSION:
        raise ConfigError(f"{path}: not a checkpoint file")
    cfg = EncoderConfig.from_dict(header["config"])
    offset = newline + 1
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        tensors[entry["name"]] = Tensor(data.astype(np.float64), requires_grad=True, name=entry["name"])
        offset += count * 8
    if offset != len(raw):
        raise ConfigError(f"{path}: {len(raw) - offset} trailing bytes after tensors")
    return Checkpoint(Params(cfg, tensors, header["init_seed"]), header["provenance"])
