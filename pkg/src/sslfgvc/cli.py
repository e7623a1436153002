"""``sslfgvc`` command line: data generation, training, evaluation, heatmaps, verification.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
4 numeric failure (training diverged).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import PRESETS, ConfigError, config_digest, load_experiment, serialize_experiment
from .dataset import PixmapError, SplitSpec, generate_synthetic, load_directory, save_directory
from .explain import export_heatmap, grad_cam, rate_from_heatmaps
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .tensor import NonFiniteError
from .trainer import evaluate, train, write_metrics
from .verify import format_check, run_suite

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("sslfgvc")


class UsageError(Exception):
    pass


def _split_dir(data: Path, name: str) -> Path:
    sub = data / name
    return sub if sub.is_dir() else data


def cmd_gen_data(args) -> int:
    if args.classes < 2:
        raise UsageError("--classes must be at least 2")
    if args.per_class_train < 1 or args.per_class_test < 1:
        raise UsageError("--per-class-train and --per-class-test must be positive")
    try:
        train_set, test_set = generate_synthetic(args.classes, args.per_class_train, args.per_class_test,
                                                 args.size, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    save_directory(train_set, out / "train")
    save_directory(test_set, out / "test")
    print(f"wrote {len(train_set)} train and {len(test_set)} test images to {out}")
    return EXIT_OK


def _resolve_config(args):
    cfg = load_experiment(args.config) if args.config else PRESETS[args.preset]
    changes = {}
    if args.mode:
        changes["mode"] = args.mode
    if args.label_fraction is not None:
        changes["split"] = SplitSpec(args.label_fraction, cfg.split.seed)
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    if args.seed is not None:
        changes["seed"] = args.seed
    try:
        return cfg.with_overrides(**changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    print(serialize_experiment(cfg), end="")
    data = Path(args.data)
    train_set = load_directory(data / "train", "train")
    test_set = load_directory(data / "test", "test")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, history = train(cfg, train_set, test_set)
    write_metrics(history, out / "metrics.csv", out / "summary.json", cfg)
    save_checkpoint(model, out / "final.ckpt", model.epoch, config_digest(cfg))
    last = history[-1]
    print(f"final top1 {last.test_top1:.2f} top2 {last.test_top2:.2f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    test_set = load_directory(_split_dir(Path(args.data), "test"), "test")
    if test_set.num_classes != model.spec.num_classes:
        raise UsageError(f"data has {test_set.num_classes} classes, checkpoint {model.spec.num_classes}")
    top1, top2 = evaluate(model, test_set, args.aug_scale)
    print(f"{top1:.2f} / {top2:.2f}")
    return EXIT_OK


def cmd_cam(args) -> int:
    model = load_checkpoint(args.ckpt)
    n = model.spec.num_classes
    if args.class_index is not None and not 0 <= args.class_index < n:
        raise UsageError(f"--class {args.class_index} out of range for {n} classes")
    test_set = load_directory(_split_dir(Path(args.data), "test"), "test")
    samples = test_set.samples[:args.limit] if args.limit else test_set.samples
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    maps, boxes = [], []
    for s in samples:
        if args.class_index is None:
            with T.no_grad():
                scores = model.logits(np.ascontiguousarray(s.image.transpose(2, 0, 1)[None], dtype=np.float32))
            c = int(np.argmax(scores.data[0]))
        else:
            c = args.class_index
        hm = grad_cam(model, s.image, c, s.id)
        export_heatmap(hm, s.image, out / f"{s.id:06d}_cam.pgm", out / f"{s.id:06d}_overlay.ppm")
        maps.append(hm.values)
        boxes.append(s.glyph_box)
    print(f"wrote {len(samples)} heatmaps to {out}")
    if samples and all(b is not None for b in boxes):
        rate = rate_from_heatmaps(maps, boxes, samples[0].image.shape[:2])
        print(f"localization_rate {rate:.2f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    checks = run_suite(args.suite)
    for c in checks:
        print(format_check(c))
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_OK if not failed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sslfgvc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset as pixmap trees")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=20)
    g.add_argument("--per-class-train", type=int, default=100)
    g.add_argument("--per-class-test", type=int, default=50)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one configuration and write metrics and a checkpoint")
    t.add_argument("--config", help="experiment file; defaults to the chosen preset")
    t.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    t.add_argument("--data", required=True, help="directory holding train/ and test/")
    t.add_argument("--out", required=True)
    t.add_argument("--mode", choices=["baseline", "rotation", "pirl", "dcl", "db_gce"])
    t.add_argument("--label-fraction", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="print top-1 / top-2 accuracy of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--aug-scale", type=float, default=1.125)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("cam", help="export Grad-CAM heatmaps and report the localization rate")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    which = c.add_mutually_exclusive_group(required=True)
    which.add_argument("--class", dest="class_index", type=int)
    which.add_argument("--auto", action="store_true", help="use each sample's predicted class")
    c.add_argument("--limit", type=int, default=0, help="only the first N test samples (0 = all)")
    c.set_defaults(func=cmd_cam)

    v = sub.add_parser("verify", help="run the oracle and property suites")
    v.add_argument("--suite", choices=["grad", "perm", "loss", "all"], default="all")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, PixmapError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
