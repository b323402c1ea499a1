"""Command-line entry points: ``train``, ``eval``, ``viz-masks``, ``check``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import ConfigError, ExperimentConfig, parse_override
from .data import load_dataset, stack
from .metrics import ConfusionMatrix, evaluation_report
from .training import (TrainingAborted, build_seeded_model, load_checkpoint, make_splits,
                       predict_proba, train)
from .viz import export_masks, save_label_map

logger = logging.getLogger("dcanet")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3


def _resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = dict(parse_override(s) for s in (args.set or []))
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = args.seed
    return cfg.with_overrides(overrides) if overrides else cfg


def _echo_config(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")


def parse_scales(text):
    if text is None:
        return (1.0,)
    scales = tuple(float(s) for s in text.split(",") if s.strip())
    if not scales or any(s <= 0 for s in scales):
        raise ConfigError("--scales", f"expected a comma-separated list of positive numbers, got {text!r}")
    return scales


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    _echo_config(cfg, out)
    train_set, val_set = make_splits(cfg.data, cfg.model.num_classes)
    model = build_seeded_model(cfg.model, cfg.train.seed)
    logger.info("training %s (%d iterations) on %d images", cfg.model.structure, cfg.train.max_iter, len(train_set))
    try:
        result = train(model, train_set, cfg.train, out_dir=out, experiment=cfg)
    except TrainingAborted as e:
        logger.error("%s", e)
        return EXIT_ABORT
    cm = ConfusionMatrix(cfg.model.num_classes)
    images, labels, _ = stack(val_set)
    cm.update(predict_proba(model, images).argmax(1), labels)
    report = evaluation_report(cm, cfg.digest())
    (out / "val_report.json").write_text(json.dumps(report, indent=2) + "\n")
    logger.info("checkpoint %s; val mIoU %.4f", result.checkpoint, report["mean_iou"])
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        model, cfg, _ = load_checkpoint(args.checkpoint)
    except KeyError as e:
        logger.error("%s", e.args[0])
        return EXIT_FAIL
    scales = parse_scales(args.scales)
    cfg = cfg.with_overrides({"eval.scales": list(scales)})
    out = Path(args.out)
    _echo_config(cfg, out)
    if args.data:
        samples = load_dataset(args.data, cfg.model.num_classes)
    else:
        train_set, val_set = make_splits(cfg.data, cfg.model.num_classes)
        samples = train_set if args.split == "train" else val_set
    images, labels, _ = stack(samples)
    pred = predict_proba(model, images, scales).argmax(1)
    cm = ConfusionMatrix(cfg.model.num_classes).update(pred, labels)
    report = evaluation_report(cm, cfg.digest())
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    if args.save_predictions:
        for i, p in enumerate(pred):
            save_label_map(p, out / f"pred_{i:05d}.png")
    logger.info("mIoU %.4f, pixel acc %.4f over %d pixels (scales %s)",
                report["mean_iou"], report["pixel_acc"], report["num_pixels"], list(scales))
    return EXIT_OK


def cmd_viz_masks(args) -> int:
    model, cfg, _ = load_checkpoint(args.checkpoint)
    if cfg.model.structure in ("none", "crs"):
        logger.error("no masks in baseline: structure %r has no DCA modules", cfg.model.structure)
        return EXIT_FAIL
    out = Path(args.out)
    _echo_config(cfg, out)
    rgb = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.float32) / 255.0
    x = torch.from_numpy(rgb.transpose(2, 0, 1).copy())[None]
    with torch.no_grad():
        result = model(x)
    paths = export_masks([m[0].numpy() for m in result.masks], cfg.model.structure, out,
                         size=tuple(x.shape[-2:]), per_channel=args.per_channel)
    save_label_map(result.scores.argmax(1)[0].numpy(), out / "prediction.png")
    logger.info("wrote %d mask images to %s", len(paths), out)
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import format_table, run_checks

    results = run_checks(args.level)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_FAIL
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcanet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from an experiment config")
    p.add_argument("--config", help="JSON experiment config (defaults when omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-path override, repeatable")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory with manifest.json (default: config's val split)")
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--scales", help="comma-separated test scales, e.g. 0.5,0.75,1,1.25,1.5,1.75,2")
    p.add_argument("--out", required=True)
    p.add_argument("--save-predictions", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz-masks", help="export per-module attention masks for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--per-channel", action="store_true")
    p.set_defaults(func=cmd_viz_masks)

    p = sub.add_parser("check", help="run the verification suite")
    p.add_argument("--level", choices=("fast", "full"), default="fast")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        logger.error("invalid configuration: %s", e)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
