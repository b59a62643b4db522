"""Command line entry point: ``poscl <subcommand> ...``.

Exit codes: 0 on success, 2 for configuration/input errors, 3 when training
hits a numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, NumericAbort, PCLError
from .experiment import (
    PRETRAIN_STRATEGIES,
    ExperimentSpec,
    analyze_false_negatives,
    format_table,
    run_experiment,
)
from .model import Checkpoint, load_checkpoint, save_checkpoint
from .pairing import PairingConfig
from .train import FinetuneConfig, PretrainConfig, evaluate, finetune, pretrain
from .volume_data import (
    FAMILIES,
    SPLITS,
    ManifestEntry,
    generate_synthetic_volume,
    get_family,
    load_volumes,
    read_manifest,
    write_manifest,
    write_volume,
)

log = logging.getLogger("poscl")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _csv_list(cast):
    def parse(text):
        try:
            return [cast(x) for x in text.split(",") if x.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    return parse


def _write_json(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def cmd_generate_data(args):
    family = get_family(args.family)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not 0 <= args.test < args.volumes:
        raise ConfigError(f"--test must be in [0, {args.volumes})")
    entries = []
    for i in range(args.volumes):
        v = generate_synthetic_volume(family, args.seed + i)
        name = f"{v.volume_id}.vvol"
        write_volume(v, out / name)
        split = args.split or ("test" if i >= args.volumes - args.test else "labeled")
        entries.append(ManifestEntry(name, family.name, split))
    write_manifest(entries, out / "manifest.json")
    print(f"wrote {len(entries)} volumes of family {family.name} to {out}")


def cmd_pretrain(args):
    volumes = load_volumes(read_manifest(args.manifest))
    cfg = PretrainConfig(
        epochs=args.epochs,
        batch=args.batch,
        lr0=args.lr,
        pairing=PairingConfig(args.strategy, t=args.t, partitions=args.partitions),
        tau=args.tau,
        seed=args.seed,
    )
    result = pretrain(volumes, cfg)
    save_checkpoint(result.checkpoint, args.out)
    print(f"pretrained {args.strategy} for {result.steps} steps, final loss {result.losses[-1]:.4f}")


def cmd_finetune(args):
    entries = read_manifest(args.manifest)
    labeled = load_volumes(entries, splits=("labeled",))
    init = None if args.init.lower() == "none" else load_checkpoint(args.init)
    cfg = FinetuneConfig(epochs=args.epochs, lr=args.lr, M=args.m, seed=args.seed)
    result = finetune(init, labeled, cfg)
    provenance = {
        "stage": "finetune",
        "init": None if init is None else init.provenance,
        "M": args.m,
        "epochs": args.epochs,
        "lr": args.lr,
        "seed": args.seed,
        "volumes": [v.volume_id for v in labeled[: args.m]],
        "final_loss": result.losses[-1],
    }
    save_checkpoint(Checkpoint(result.params, provenance), args.out)
    print(f"fine-tuned on {args.m} volumes, final loss {result.losses[-1]:.4f}")


def cmd_evaluate(args):
    model = load_checkpoint(args.model)
    volumes = load_volumes(read_manifest(args.manifest), splits=(args.split,))
    if not volumes:
        raise ConfigError(f"manifest has no volumes in split {args.split!r}")
    scores = evaluate(model.params, volumes)
    report = {"split": args.split, "volumes": [v.volume_id for v in volumes], **scores}
    _write_json(report, args.out)
    print(f"mean Dice {scores['mean']:.4f} over {len(volumes)} volumes")


def _spec_from_args(args):
    spec = json.loads(Path(args.config).read_text()) if args.config else {}
    overrides = {
        "manifest": args.manifest,
        "pretrain_manifest": args.pretrain_manifest,
        "strategies": args.strategies,
        "m_list": args.m_list,
        "folds": args.folds,
        "seeds": args.seeds,
        "pretrain_epochs": args.pretrain_epochs,
        "finetune_epochs": args.finetune_epochs,
    }
    spec.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentSpec.from_dict(spec)


def cmd_compare(args):
    spec = _spec_from_args(args)
    report = run_experiment(spec, progress=log.info)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    out.with_suffix(".csv").write_text(report.to_csv())
    print(format_table(report))


def cmd_analyze_fn(args):
    volumes = load_volumes(read_manifest(args.manifest))
    stats = analyze_false_negatives(volumes, args.t_true, args.strategies, t=args.t, partitions=args.partitions)
    _write_json({"t_true": args.t_true, "t": args.t, "partitions": args.partitions, "stats": stats}, args.out)
    for strategy, s in stats.items():
        print(f"{strategy:<8} false negatives {s['false_neg_count']:>7d} ({s['false_neg_rate']:.4f})")


def build_parser():
    parser = argparse.ArgumentParser(prog="poscl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write synthetic phantoms and a manifest")
    p.add_argument("--family", choices=sorted(FAMILIES), default="A")
    p.add_argument("--volumes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test", type=int, default=0, help="mark the last N volumes as split 'test'")
    p.add_argument("--split", choices=SPLITS, help="put every volume in this split")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_data)

    d = PretrainConfig()
    p = sub.add_parser("pretrain", help="contrastive pretraining (labels are never read)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--strategy", choices=PRETRAIN_STRATEGIES, default="pcl")
    p.add_argument("--t", type=float, default=d.pairing.t)
    p.add_argument("--partitions", type=int, default=d.pairing.partitions)
    p.add_argument("--tau", type=float, default=d.tau)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch", type=int, default=d.batch)
    p.add_argument("--lr", type=float, default=d.lr0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    f = FinetuneConfig()
    p = sub.add_parser("finetune", help="supervised fine-tuning on the 'labeled' split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--init", required=True, help="checkpoint path, or 'none' for random init")
    p.add_argument("--m", type=int, default=f.M)
    p.add_argument("--epochs", type=int, default=f.epochs)
    p.add_argument("--lr", type=float, default=f.lr)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="Dice of a fine-tuned model")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="k-fold comparison of strategies; writes REPORT and REPORT.csv")
    p.add_argument("--manifest")
    p.add_argument("--pretrain-manifest", help="pretrain on another family (transfer mode)")
    p.add_argument("--config", help="JSON experiment spec; flags override it")
    p.add_argument("--strategies", type=_csv_list(str))
    p.add_argument("--m-list", type=_csv_list(int))
    p.add_argument("--folds", type=int)
    p.add_argument("--seeds", type=_csv_list(int))
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--finetune-epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("analyze-fn", help="exact false-negative counts per pairing strategy")
    p.add_argument("--manifest", required=True)
    p.add_argument("--t-true", type=float, default=0.1)
    p.add_argument("--strategies", type=_csv_list(str), default=list(PRETRAIN_STRATEGIES))
    p.add_argument("--t", type=float, default=0.1)
    p.add_argument("--partitions", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze_fn)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except NumericAbort as exc:
        print(f"error: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PCLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
