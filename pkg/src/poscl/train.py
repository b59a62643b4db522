"""Contrastive pretraining, supervised fine-tuning, optimizers and Dice."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .augment import AugConfig, make_contrastive_batch
from .autodiff import Tensor, backward
from .errors import ConfigError, DimensionError, DomainError, NumericAbort
from .loss import LossConfig, pcl_loss
from .model import Checkpoint, EncoderConfig, cross_entropy, encode, init_params, predict, segment
from .pairing import PairingConfig
from .volume_data import PreprocessConfig, label_probe, preprocess, sample_batch

log = logging.getLogger(__name__)


def cosine_lr(step, total_steps, lr0):
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ConfigError(f"cosine_lr needs 0 <= step <= total_steps, got {step}/{total_steps}")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class SGD:
    """Plain gradient descent: ``w <- w - lr * g``."""

    def __init__(self):
        self.t = 0

    def step(self, named, lr):
        _check_grads(named, self.t)
        for t in named.values():
            t.data = t.data - lr * t.grad
        self.t += 1


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, named, lr):
        _check_grads(named, self.t)
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, t in named.items():
            g = t.grad
            m = self.beta1 * self.m.get(name, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind):
    if kind == "sgd":
        return SGD()
    if kind == "adam":
        return Adam()
    raise ConfigError(f"unknown optimizer {kind!r}")


def _check_grads(named, step):
    for name, t in named.items():
        if t.grad is None:
            raise NumericAbort(f"step {step}: no gradient for {name}", step=step, name=name)
        if t.grad.shape != t.data.shape:
            raise DimensionError(f"gradient of {name} has shape {t.grad.shape}, expected {t.data.shape}")
        if not np.isfinite(t.grad).all():
            raise NumericAbort(f"step {step}: non-finite gradient in {name}", step=step, name=name)


# -- pretraining ------------------------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    # full-scale setting: 200 epochs, batch 32, lr0 0.1 (collapses this dense net
    # under the summed loss, so the desk default is ten times smaller)
    epochs: int = 30
    batch: int = 16
    lr0: float = 0.01
    optimizer: str = "sgd"
    pairing: PairingConfig = PairingConfig()
    tau: float = 0.1
    seed: int = 0
    aug: AugConfig = AugConfig()
    model: EncoderConfig = EncoderConfig()
    preprocess: PreprocessConfig = PreprocessConfig()

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1:
            raise ConfigError("epochs and batch must be >= 1")
        if not self.lr0 > 0:
            raise ConfigError("lr0 must be positive")
        LossConfig(self.tau)


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    losses: list
    label_reads: int
    steps: int


def steps_per_epoch(total_slices, batch):
    return max(1, math.ceil(total_slices / batch))


def pretrain(volumes, cfg, on_step=None, fixed_batch=None, steps=None):
    """Contrastive pretraining of encoder + projection head on unlabeled slices.

    Labels are stripped before anything else touches the volumes; the label
    probe result is reported (and must be 0).  ``on_step(step, aug_batch,
    mask, report)`` observes every step.  ``fixed_batch`` reuses one sampled
    batch for every step and ``steps`` overrides the epoch-derived count;
    both exist for overfitting checks.
    """
    if not volumes:
        raise ConfigError("pretraining needs at least one volume")
    with label_probe() as probe:
        pool = [preprocess(v.without_labels(), cfg.preprocess, with_labels=False) for v in volumes]
        model_cfg = dataclasses.replace(cfg.model, input_hw=tuple(cfg.preprocess.target_size))
        params = init_params(model_cfg, cfg.seed)
        named = {k: params[k] for k in params.group("enc.") + params.group("proj.")}
        opt = make_optimizer(cfg.optimizer)
        loss_cfg = LossConfig(cfg.tau)
        rng = np.random.default_rng([cfg.seed, 1])

        total = sum(v.n for v in pool)
        n_steps = steps if steps is not None else cfg.epochs * steps_per_epoch(total, cfg.batch)
        batch = fixed_batch(pool, rng) if callable(fixed_batch) else fixed_batch
        losses = []
        for step in range(n_steps):
            src = batch if batch is not None else sample_batch(pool, cfg.batch, rng)
            aug = make_contrastive_batch(src, cfg.aug, rng)
            mask = cfg.pairing.build(aug.positions)
            try:
                _, z = encode(params, Tensor(aug.images))
                report = pcl_loss(z, mask, loss_cfg)
                backward(report.loss, wrt=list(named.values()))
            except DomainError as exc:
                raise NumericAbort(f"pretrain step {step}: {exc}", step=step) from exc
            if on_step is not None:
                on_step(step, aug, mask, report)
            losses.append(report.total)
            opt.step(named, cosine_lr(step, n_steps, cfg.lr0))

    if probe.reads:
        raise AssertionError(f"pretraining read labels {probe.reads} times")
    provenance = {
        "stage": "pretrain",
        "strategy": cfg.pairing.strategy,
        "t": cfg.pairing.t,
        "partitions": cfg.pairing.partitions,
        "tau": cfg.tau,
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "batch": cfg.batch,
        "lr0": cfg.lr0,
        "steps": n_steps,
        "families": sorted({v.family_id for v in volumes}),
    }
    return PretrainResult(Checkpoint(params, provenance), losses, probe.reads, n_steps)


# -- fine-tuning ----------------------------------------------------------------------


@dataclass(frozen=True)
class FinetuneConfig:
    # full-scale setting: 100 epochs, batch 5, lr 5e-5
    epochs: int = 50
    batch: int = 5
    lr: float = 1e-3
    optimizer: str = "adam"
    M: int = 2
    seed: int = 0
    model: EncoderConfig = EncoderConfig()
    preprocess: PreprocessConfig = PreprocessConfig()

    def __post_init__(self):
        if self.M < 1:
            raise ConfigError("M must be >= 1")
        if self.epochs < 1 or self.batch < 1:
            raise ConfigError("epochs and batch must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")


@dataclass
class FinetuneResult:
    params: object
    losses: list = field(default_factory=list)


def stack_slices(volumes):
    """All slices of preprocessed labeled volumes as (S, H, W) images and labels."""
    images = np.concatenate([np.moveaxis(v.intensities, 2, 0) for v in volumes])
    labels = np.concatenate([np.moveaxis(v.labels, 2, 0) for v in volumes]).astype(np.int64)
    return images, labels


def finetune(init, labeled, cfg):
    """Supervised segmentation training with per-pixel cross-entropy.

    ``init`` is a :class:`Checkpoint` whose encoder seeds the network, or
    ``None`` for random initialisation.  The decoder always starts fresh.
    """
    if not labeled:
        raise ConfigError("fine-tuning needs labeled volumes")
    missing = [v.volume_id for v in labeled if not v.has_labels]
    if missing:
        raise ConfigError(f"volumes without labels: {missing}")
    if cfg.M > len(labeled):
        raise ConfigError(f"M={cfg.M} exceeds the {len(labeled)} labeled volumes given")

    num_classes = max(v.num_classes for v in labeled)
    base = init.config if init is not None else cfg.model
    model_cfg = dataclasses.replace(
        base, input_hw=tuple(cfg.preprocess.target_size), num_classes=num_classes
    )
    params = init_params(model_cfg, cfg.seed)
    if init is not None:
        if init.config.input_hw != model_cfg.input_hw:
            raise DimensionError(f"checkpoint input {init.config.input_hw} != {model_cfg.input_hw}")
        for name in params.group("enc."):
            params.tensors[name] = Tensor(init.params[name].data.copy(), requires_grad=True, name=name)

    data = [preprocess(v, cfg.preprocess) for v in labeled[: cfg.M]]
    images, labels = stack_slices(data)
    named = {k: params[k] for k in params.group("enc.") + params.group("dec.")}
    opt = make_optimizer(cfg.optimizer)
    rng = np.random.default_rng([cfg.seed, 2])
    per_epoch = steps_per_epoch(len(images), cfg.batch)
    total = cfg.epochs * per_epoch
    losses = []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(images))
        for b in range(per_epoch):
            idx = order[b * cfg.batch:(b + 1) * cfg.batch]
            try:
                loss = cross_entropy(segment(params, Tensor(images[idx])), labels[idx])
                backward(loss, wrt=list(named.values()))
            except DomainError as exc:
                raise NumericAbort(f"finetune step {step}: {exc}", step=step) from exc
            losses.append(loss.item())
            opt.step(named, cosine_lr(step, total, cfg.lr))
            step += 1
    return FinetuneResult(params, losses)


# -- evaluation ---------------------------------------------------------------------


def dice(pred, truth, num_classes):
    """Foreground Dice per class (class 0 excluded) and their mean.

    A class absent from both prediction and truth scores 1.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    for name, arr in (("prediction", pred), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ConfigError(f"{name} labels outside [0, {num_classes})")
    per_class = []
    for c in range(1, num_classes):
        p, t = pred == c, truth == c
        denom = int(p.sum() + t.sum())
        per_class.append(1.0 if denom == 0 else 2.0 * int((p & t).sum()) / denom)
    return {"per_class": per_class, "mean": float(np.mean(per_class))}


def evaluate(params, volumes, cfg=PreprocessConfig()):
    """Average of per-volume 3D Dice over ``volumes``."""
    scores = []
    num_classes = params.config.num_classes
    for v in volumes:
        pv = preprocess(v, cfg)
        images, labels = stack_slices([pv])
        scores.append(dice(predict(params, images), labels, num_classes))
    per_class = np.mean([s["per_class"] for s in scores], axis=0)
    return {"per_class": [float(x) for x in per_class], "mean": float(np.mean(per_class))}
