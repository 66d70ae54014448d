"""Command-line entry points.

Subcommands: gen-data, train, eval, predict, report. Configuration is
layered: built-in defaults, then an optional --config JSON file, then
--set section.field=value overrides, then dedicated flags (highest).

Exit codes: 0 success, 2 configuration/usage error, 3 I/O or data error,
4 numerical failure (a diagnostic snapshot is written next to the run).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from . import __version__
from .config import Config, apply_override, load_config, save_config
from .data import generate_corpus, load_dataset
from .errors import (CheckpointError, ConfigError, DataError, InputError,
                     NumericalError)
from .heads import export_mask_png
from .metrics import EvalReport, evaluate
from .model import build_model
from .trainer import Trainer, restore_trainer

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vilaco",
        description="Weakly supervised image forgery localization")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.FIELD=VALUE",
                       help="override one config field (repeatable)")

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    add_config_args(g)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--count", type=int, help="number of images")
    g.add_argument("--seed", type=int, help="corpus RNG seed")

    t = sub.add_parser("train", help="train a model on image-level labels")
    add_config_args(t)
    t.add_argument("--data", required=True, help="corpus dir or manifest.tsv")
    t.add_argument("--out", required=True, help="run directory (logs + checkpoints)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--resume", help="checkpoint to resume from")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    add_config_args(e)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", help="where to write report.json")

    p = sub.add_parser("predict", help="run one image through a checkpoint")
    add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", help="directory for the predicted mask PNG "
                                 "(default: alongside the image)")

    r = sub.add_parser("report", help="pretty-print a saved report.json")
    r.add_argument("report_json")
    return parser


def _load_cfg(args) -> Config:
    return load_config(getattr(args, "config", None),
                       getattr(args, "overrides", ()))


def _cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    if args.count is not None:
        apply_override(cfg, "gen.count", str(args.count))
    if args.seed is not None:
        apply_override(cfg, "gen.seed", str(args.seed))
    cfg.validate()
    manifest = generate_corpus(cfg.gen, args.out)
    print(f"wrote {cfg.gen.count} images to {manifest.parent} "
          f"(manifest: {manifest})")
    return EXIT_OK


def _cmd_train(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = load_dataset(args.data, split="train")

    if args.resume:
        # the checkpoint's own config governs a resumed run (bit-exact
        # continuation); only the epoch target may be extended
        trainer = restore_trainer(args.resume)
        cfg = trainer.cfg
        if args.epochs is not None:
            cfg.train.epochs = args.epochs
            cfg.validate()
    else:
        cfg = _load_cfg(args)
        for flag, key in (("epochs", "train.epochs"), ("lr", "train.lr"),
                          ("batch", "train.batch")):
            value = getattr(args, flag)
            if value is not None:
                apply_override(cfg, f"{key}={value}")
        cfg.validate()
        torch.manual_seed(cfg.train.seed)
        model = build_model(cfg)
        trainer = Trainer(model, cfg)
        save_config(cfg, out_dir / "config.json")

    tc = cfg.train
    print(f"train: {len(samples)} images | lr={tc.lr} batch={tc.batch} "
          f"epochs={tc.epochs} warmup={tc.warmup} "
          f"deterministic={tc.deterministic}")
    try:
        result = trainer.fit(samples, log_path=out_dir / "train.log",
                             checkpoint_dir=out_dir)
    except NumericalError as exc:
        snapshot = out_dir / "abort_snapshot.json"
        snapshot.write_text(json.dumps(
            {"error": str(exc), "diagnostics": exc.diagnostics}, indent=2) + "\n")
        print(f"numerical failure; diagnostics written to {snapshot}",
              file=sys.stderr)
        raise
    for stats in result.history[-3:]:
        print(stats.log_line())
    print(f"done: checkpoints in {out_dir}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    trainer = restore_trainer(args.checkpoint)
    samples = load_dataset(args.data, split="eval")
    report = evaluate(trainer.model, samples)
    print(report.table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.save_json(out / "report.json")
        print(f"report written to {out / 'report.json'}")
    return EXIT_OK


def _cmd_predict(args) -> int:
    image_path = Path(args.image)
    if not image_path.exists():
        raise DataError(f"input image not found: {image_path}")
    trainer = restore_trainer(args.checkpoint)
    from .data import _load_image

    image = _load_image(image_path)
    trainer.model.eval()
    with torch.no_grad():
        out = trainer.model(image.unsqueeze(0))
    coarse = float(out.coarse_prob[0])
    fine = float(out.fine_prob[0])
    out_dir = Path(args.out) if args.out else image_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    mask_path = export_mask_png(out.mask[0], image_path, out_dir)
    verdict = "fake" if coarse > 0.5 else "real"
    print(f"{image_path.name}: coarse={coarse:.4f} fine={fine:.4f} "
          f"({verdict}) mask -> {mask_path}")
    return EXIT_OK


def _cmd_report(args) -> int:
    path = Path(args.report_json)
    if not path.exists():
        raise DataError(f"report file not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from exc
    try:
        report = EvalReport(
            pixel_f1=payload["pixel_f1"], image_f1=payload["image_f1"],
            combined_f1=payload["combined_f1"],
            mean_iou_fake=payload["mean_iou_fake"],
            num_images=payload["num_images"], num_fake=payload["num_fake"])
    except KeyError as exc:
        raise DataError(f"{path} is missing field {exc}") from exc
    print(report.table())
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors already; pass its code through
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, InputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
