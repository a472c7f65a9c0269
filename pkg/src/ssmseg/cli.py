"""Command-line entry point.

Subcommands: ``synth`` (generate a synthetic dataset), ``train``,
``eval`` (metrics on a split), ``predict`` (write mask PNGs), and
``report`` (histogram/box-plot files from a metrics table).

Exit codes: 0 success, 2 configuration error, 3 data error,
4 numerical abort during training.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import ConfigError, RunConfig, apply_overrides, load_config_file
from .data import DataError, SplitManifest, load_dataset, split, synth_generate
from .losses import TrainingAbortError
from .metrics import evaluate_testset, predict_mask
from .nets import load_checkpoint
from .report import emit_report, read_metrics_csv
from .trainer import train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _add_shared(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--out", help="output directory")
    det = p.add_mutually_exclusive_group()
    det.add_argument("--deterministic", dest="deterministic", action="store_true",
                     default=None)
    det.add_argument("--no-deterministic", dest="deterministic", action="store_false")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssmseg",
                                     description="semi-supervised SSM/CNN segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset + manifest")
    p.add_argument("--cases", type=int, default=20)
    p.add_argument("--slices", type=int, default=10)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--size", type=int, default=224)
    _add_shared(p)

    p = sub.add_parser("train", help="run semi-supervised training")
    p.add_argument("--data", help="dataset root")
    p.add_argument("--manifest", help="split manifest path")
    p.add_argument("--classes", type=int)
    p.add_argument("--input-size", dest="input_size", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--labelled-batch", dest="labelled_batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--validate-every", dest="validate_every", type=int)
    p.add_argument("--no-semi", action="store_true")
    p.add_argument("--no-contra", action="store_true")
    _add_shared(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a subset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset root")
    p.add_argument("--manifest", help="split manifest path")
    p.add_argument("--subset", choices=("test", "validation", "labelled"),
                   default="test")
    p.add_argument("--formats", default="csv,png")
    _add_shared(p)

    p = sub.add_parser("predict", help="write predicted mask PNGs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset root")
    p.add_argument("--manifest", help="split manifest (optional, filters subset)")
    p.add_argument("--subset", choices=("test", "validation", "labelled", "unlabelled"),
                   default="test")
    _add_shared(p)

    p = sub.add_parser("report", help="emit histogram/box-plot files from metrics.csv")
    p.add_argument("--metrics", required=True, help="metrics.csv path")
    p.add_argument("--formats", default="csv,png")
    _add_shared(p)
    return parser


def _resolve(args) -> RunConfig:
    rc = load_config_file(args.config) if args.config else RunConfig()
    return apply_overrides(rc, args)


def _load_manifest(rc: RunConfig) -> SplitManifest:
    path = rc.manifest_path
    if path is None and rc.data_root:
        candidate = Path(rc.data_root) / "manifest.json"
        if candidate.exists():
            path = candidate
    if path is None:
        raise ConfigError("no manifest path given and none found next to the data")
    return SplitManifest.from_file(path)


def cmd_synth(args) -> int:
    rc = _resolve(args)
    if args.classes not in (2, 4):
        raise ConfigError(f"--classes must be 2 or 4, got {args.classes}")
    if args.cases < 1 or args.slices < 1 or args.size < 16:
        raise ConfigError("cases, slices, and size must be positive (size >= 16)")
    rc.classes = args.classes
    seed = args.seed if args.seed is not None else rc.train.get("seed", 1337)
    rc.train["seed"] = seed
    out = Path(rc.out_dir)
    synth_generate(args.cases, args.slices, args.classes, seed, out, image_size=args.size)
    rc.data_root = str(out)
    rc.manifest_path = str(out / "manifest.json")
    rc.write_resolved(out)
    print(rc.manifest_path)
    return EXIT_OK


def cmd_train(args) -> int:
    rc = _resolve(args)
    if not rc.data_root:
        raise ConfigError("no dataset root given (use --data or the config file)")
    manifest = _load_manifest(rc)
    if rc.classes is None:
        rc.classes = manifest.classes
    cfg = rc.train_config()
    rc.write_resolved(rc.out_dir)
    record, _ = train(cfg, rc.data_root, manifest, rc.out_dir)
    print(f"best iteration {record.iteration}: "
          f"val_dice_f1={record.val_dice_f1:.4f} val_dice_f2={record.val_dice_f2}")
    return EXIT_OK


def _subset_samples(rc: RunConfig, subset: str, classes: int):
    samples = load_dataset(rc.data_root, classes=classes)
    manifest = _load_manifest(rc)
    lab, unlab, val, test = split(samples, manifest)
    return {"labelled": lab, "unlabelled": unlab, "validation": val, "test": test}[subset]


def cmd_eval(args) -> int:
    rc = _resolve(args)
    if not rc.data_root:
        raise ConfigError("no dataset root given")
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise ConfigError(f"checkpoint {ckpt} does not exist")
    net, _ = load_checkpoint(ckpt)
    samples = _subset_samples(rc, args.subset, net.spec.classes)
    if not samples:
        raise DataError(f"subset {args.subset!r} is empty")
    rows, aggregate = evaluate_testset(net, samples)
    out = Path(rc.out_dir)
    formats = tuple(f.strip() for f in args.formats.split(","))
    emit_report(rows, out, formats=formats, aggregate=aggregate)
    rc.write_resolved(out)
    print(f"aggregate dice={aggregate.dice:.4f} hd95={aggregate.hd95:.4f} "
          f"asd={aggregate.asd:.4f} over {len(rows)} images -> {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_predict(args) -> int:
    rc = _resolve(args)
    if not rc.data_root:
        raise ConfigError("no dataset root given")
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise ConfigError(f"checkpoint {ckpt} does not exist")
    net, _ = load_checkpoint(ckpt)
    samples = _subset_samples(rc, args.subset, None)
    if not samples:
        raise DataError(f"subset {args.subset!r} is empty")
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        pred = predict_mask(net, s.image).astype(np.uint8)
        Image.fromarray(pred, mode="L").save(
            out / f"{s.case_id}_slice_{s.slice_index}_pred.png")
    rc.write_resolved(out)
    print(f"wrote {len(samples)} masks to {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    rc = _resolve(args)
    metrics_path = Path(args.metrics)
    if not metrics_path.exists():
        raise ConfigError(f"metrics file {metrics_path} does not exist")
    rows, aggregate = read_metrics_csv(metrics_path)
    if not rows:
        raise DataError(f"{metrics_path} holds no per-image rows")
    out = Path(rc.out_dir)
    formats = tuple(f.strip() for f in args.formats.split(","))
    written = emit_report(rows, out, formats=formats, aggregate=aggregate)
    rc.write_resolved(out)
    print("\n".join(str(p) for p in written))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except TrainingAbortError as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
