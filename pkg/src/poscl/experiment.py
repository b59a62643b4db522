"""K-fold comparison of pretraining strategies, in-domain and transfer."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .augment import AugConfig
from .errors import ConfigError
from .model import EncoderConfig
from .pairing import PairingConfig, false_negative_stats
from .train import FinetuneConfig, PretrainConfig, evaluate, finetune, pretrain
from .volume_data import PreprocessConfig, load_volumes, read_manifest

PRETRAIN_STRATEGIES = ("pcl", "gcl", "simclr")
ALL_STRATEGIES = PRETRAIN_STRATEGIES + ("random",)
CSV_FIELDS = ("strategy", "M", "fold", "seed", "class", "dice")


@dataclass(frozen=True)
class ExperimentSpec:
    manifest: str | None = None
    pretrain_manifest: str | None = None
    strategies: tuple = ("pcl", "simclr", "random")
    m_list: tuple = (2,)
    folds: int = 5
    seeds: tuple = (0, 1, 2)
    split_seed: int = 0
    t: float = 0.1
    partitions: int = 4
    tau: float = 0.1
    t_true: float = 0.1
    pretrain_epochs: int = PretrainConfig.epochs
    pretrain_batch: int = PretrainConfig.batch
    pretrain_lr: float = PretrainConfig.lr0
    finetune_epochs: int = FinetuneConfig.epochs
    finetune_batch: int = FinetuneConfig.batch
    finetune_lr: float = FinetuneConfig.lr
    image_size: tuple = (16, 16)
    hidden_dims: tuple = (256, 128)
    repr_dim: int = 64
    proj_dim: int = 32

    def __post_init__(self):
        unknown = set(self.strategies) - set(ALL_STRATEGIES)
        if unknown:
            raise ConfigError(f"unknown strategies {sorted(unknown)}; choose from {ALL_STRATEGIES}")
        if not self.strategies:
            raise ConfigError("no strategies given")
        if self.folds < 2:
            raise ConfigError("need at least 2 folds")
        if not self.seeds or not self.m_list:
            raise ConfigError("seeds and m_list must be non-empty")
        for name in ("strategies", "m_list", "seeds", "image_size", "hidden_dims"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown experiment keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    def preprocess_config(self):
        return PreprocessConfig(target_size=tuple(self.image_size))

    def model_config(self):
        return EncoderConfig(
            input_hw=tuple(self.image_size),
            hidden_dims=self.hidden_dims,
            repr_dim=self.repr_dim,
            proj_dim=self.proj_dim,
        )

    def pretrain_config(self, strategy, seed):
        return PretrainConfig(
            epochs=self.pretrain_epochs,
            batch=self.pretrain_batch,
            lr0=self.pretrain_lr,
            pairing=PairingConfig(strategy, t=self.t, partitions=self.partitions),
            tau=self.tau,
            seed=seed,
            aug=AugConfig(),
            model=self.model_config(),
            preprocess=self.preprocess_config(),
        )

    def finetune_config(self, M, seed):
        return FinetuneConfig(
            epochs=self.finetune_epochs,
            batch=self.finetune_batch,
            lr=self.finetune_lr,
            M=M,
            seed=seed,
            model=self.model_config(),
            preprocess=self.preprocess_config(),
        )


def kfold_indices(n, K, seed=0):
    """Split ``range(n)`` into K disjoint, covering folds after a seeded shuffle."""
    if not 2 <= K <= n:
        raise ConfigError(f"cannot split {n} volumes into {K} folds")
    order = np.random.default_rng([seed, 3]).permutation(n)
    return [sorted(int(i) for i in part) for part in np.array_split(order, K)]


def summarize(values):
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    std = float(values.std(ddof=1)) if n > 1 else 0.0
    return {"mean": float(values.mean()), "std": std, "se": std / math.sqrt(n) if n else 0.0, "n": n}


@dataclass
class ExperimentReport:
    spec: dict
    rows: list
    summary: dict
    pretrain: dict
    label_reads: int
    wall_clock: float = 0.0
    extra: dict = field(default_factory=dict)

    def mean_dice(self, strategy, M):
        return self.summary[strategy][str(M)]["overall"]["mean"]

    def dice_values(self, strategy, M):
        return [
            r["dice"] for r in self.rows
            if r["strategy"] == strategy and r["M"] == M and r["class"] == "mean"
        ]

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for r in self.rows:
            writer.writerow([r["strategy"], r["M"], r["fold"], r["seed"], r["class"], repr(r["dice"])])
        return buf.getvalue()


def _fn_tracker(t_true):
    totals = {"false_neg_count": 0, "false_pos_count": 0, "pairs": 0}

    def hook(step, aug, mask, report):
        stats = false_negative_stats(mask, aug.positions, t_true)
        totals["false_neg_count"] += stats["false_neg_count"]
        totals["false_pos_count"] += stats["false_pos_count"]
        totals["pairs"] += mask.size * (mask.size - 1)

    return totals, hook


def _epoch_means(losses, epochs):
    per = max(1, len(losses) // epochs)
    return [float(np.mean(losses[i:i + per])) for i in range(0, per * epochs, per)]


def run_experiment(spec, volumes=None, pretrain_volumes=None, progress=None):
    """Run the fold x seed x M x strategy grid described by ``spec``.

    ``volumes`` / ``pretrain_volumes`` override the manifests (handy in
    tests).  Without a separate pretraining set, pretraining uses every
    volume of the fine-tuning family with labels stripped, shared by all folds.
    """
    started = time.perf_counter()
    if isinstance(spec, dict):
        spec = ExperimentSpec.from_dict(spec)
    if volumes is None:
        if spec.manifest is None:
            raise ConfigError("experiment needs a manifest or volumes")
        volumes = load_volumes(read_manifest(spec.manifest))
    if pretrain_volumes is None and spec.pretrain_manifest is not None:
        pretrain_volumes = load_volumes(read_manifest(spec.pretrain_manifest))

    labeled = [v for v in volumes if v.has_labels]
    if len(labeled) < spec.folds:
        raise ConfigError(f"{len(labeled)} labeled volumes cannot form {spec.folds} folds")
    transfer = pretrain_volumes is not None
    source = pretrain_volumes if transfer else volumes
    if transfer:
        src_fam = {v.family_id for v in pretrain_volumes}
        dst_fam = {v.family_id for v in labeled}
        if src_fam & dst_fam:
            raise ConfigError(f"transfer mode needs disjoint families, both contain {sorted(src_fam & dst_fam)}")

    folds = kfold_indices(len(labeled), spec.folds, spec.split_seed)
    for M in spec.m_list:
        smallest_pool = len(labeled) - max(len(f) for f in folds)
        if M > smallest_pool:
            raise ConfigError(f"M={M} exceeds the smallest fold training pool ({smallest_pool})")

    pretrained, pretrain_info, label_reads = {}, {}, 0
    for seed in spec.seeds:
        for strategy in spec.strategies:
            if strategy == "random":
                continue
            totals, hook = _fn_tracker(spec.t_true)
            result = pretrain(source, spec.pretrain_config(strategy, seed), on_step=hook)
            label_reads += result.label_reads
            pretrained[strategy, seed] = result.checkpoint
            pretrain_info[f"{strategy}/{seed}"] = {
                "loss_per_epoch": _epoch_means(result.losses, spec.pretrain_epochs),
                "false_neg_count": totals["false_neg_count"],
                "false_neg_rate": totals["false_neg_count"] / totals["pairs"],
                "false_pos_count": totals["false_pos_count"],
                "false_pos_rate": totals["false_pos_count"] / totals["pairs"],
            }
            if progress:
                progress(f"pretrained {strategy} seed={seed}")

    rows, finetune_losses, train_ids = [], {}, {}
    for seed in spec.seeds:
        for k, test_idx in enumerate(folds):
            test = [labeled[i] for i in test_idx]
            pool = [labeled[i] for i in range(len(labeled)) if i not in set(test_idx)]
            for M in spec.m_list:
                pick = np.random.default_rng([seed, k, M, 4]).choice(len(pool), size=M, replace=False)
                train_set = [pool[i] for i in sorted(pick)]
                train_ids[f"{M}/{k}/{seed}"] = [v.volume_id for v in train_set]
                for strategy in spec.strategies:
                    init = pretrained.get((strategy, seed))
                    result = finetune(init, train_set, spec.finetune_config(M, seed))
                    scores = evaluate(result.params, test, spec.preprocess_config())
                    finetune_losses[f"{strategy}/{M}/{k}/{seed}"] = [result.losses[0], result.losses[-1]]
                    for c, d in enumerate(scores["per_class"], start=1):
                        rows.append(dict(strategy=strategy, M=M, fold=k, seed=seed, **{"class": str(c)}, dice=d))
                    rows.append(dict(strategy=strategy, M=M, fold=k, seed=seed, **{"class": "mean"}, dice=scores["mean"]))
            if progress:
                progress(f"fold {k} seed={seed} done")

    summary = {}
    for strategy in spec.strategies:
        summary[strategy] = {}
        for M in spec.m_list:
            mine = [r for r in rows if r["strategy"] == strategy and r["M"] == M]
            classes = sorted({r["class"] for r in mine} - {"mean"}, key=int)
            summary[strategy][str(M)] = {
                "overall": summarize([r["dice"] for r in mine if r["class"] == "mean"]),
                "per_class": {c: summarize([r["dice"] for r in mine if r["class"] == c]) for c in classes},
                "per_fold": [
                    float(np.mean([r["dice"] for r in mine if r["class"] == "mean" and r["fold"] == k]))
                    for k in range(spec.folds)
                ],
            }

    return ExperimentReport(
        spec=spec.to_dict(),
        rows=rows,
        summary=summary,
        pretrain=pretrain_info,
        label_reads=label_reads,
        wall_clock=time.perf_counter() - started,
        extra={
            "folds": folds,
            "transfer": transfer,
            "train_volumes": train_ids,
            "finetune_loss_first_last": finetune_losses,
        },
    )


def format_table(report):
    """Plain-text mean(std) table, one row per strategy and one column per M."""
    ms = [str(m) for m in report.spec["m_list"]]
    lines = ["method    " + "".join(f"M={m:<12}" for m in ms)]
    for strategy, by_m in report.summary.items():
        cells = "".join(
            f"{by_m[m]['overall']['mean']:.3f}({by_m[m]['overall']['std']:.2f})  " for m in ms
        )
        lines.append(f"{strategy:<10}{cells}")
    return "\n".join(lines)


def slice_positions(volumes):
    """Every slice of every volume as two views, in AugBatch (twin) order."""
    sources = np.concatenate([np.arange(v.n) / v.n for v in volumes])
    return np.repeat(sources, 2)


def analyze_false_negatives(volumes, t_true, strategies=PRETRAIN_STRATEGIES, t=0.1, partitions=4):
    """Exact pair counts for each strategy treating all slices as one batch.

    No sampling is involved, so the counts are exact enumerations over the
    2S(2S-1) ordered pairs of S slices in two views each.
    """
    positions = slice_positions(volumes)
    out = {}
    for strategy in strategies:
        mask = PairingConfig(strategy, t=t, partitions=partitions).build(positions)
        out[strategy] = false_negative_stats(mask, positions, t_true)
    return out
