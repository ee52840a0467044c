# labelprop/commands/train.py

import logging
from pathlib import Path
from typing import Optional, Sequence

from labelprop.commands.common import check_trust, prepare_output, resolve_set, write_csv
from labelprop.core.config import RunConfig
from labelprop.core.exceptions import ConfigError, TrainingDivergedError
from labelprop.datasets import TrainSet, gt_set, read_train_set, write_train_set
from labelprop.imagery import get_palette, load_manifest
from labelprop.metrics import write_report
from labelprop.schemas import ManifestEntry
from labelprop.trainer import TinySegModel, evaluate, load_samples, load_snapshot, save_snapshot, train

logger = logging.getLogger(__name__)

TRAIN_LOG_FIELDS = ["epoch", "step", "train_loss", "val_miou", "tf"]


def register(subparsers, common):
    parser = subparsers.add_parser("train", parents=[common], help="train the segmentation model on a set")
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--set", dest="set_expr", help="set name or '+'-joined names inside --sets-dir")
    source.add_argument("--manifest", help="train directly on a manifest file")
    parser.add_argument("--sets-dir", help="directory of set manifests")
    parser.add_argument("--trust", type=float, help="trust factor for PGT samples (default: train.trust_factor)")
    parser.add_argument("--val", help="validation manifest evaluated after every epoch")
    parser.set_defaults(func=run)


def run_training(
    config: RunConfig,
    train_set: TrainSet,
    trust: float,
    val: Sequence[ManifestEntry],
    out: Path,
) -> Optional[float]:
    """Train one model into ``out``; returns the final mean IoU of the report."""
    palette = get_palette(config.palette)
    cfg = config.train.model_copy(update={"trust_factor": trust})
    samples = load_samples(train_set.samples, palette.num_classes, trust)
    val_samples = load_samples(val, palette.num_classes)

    write_train_set(out / "train_set.csv", train_set, trust)
    model = TinySegModel.initialize(palette.num_classes, cfg)
    logger.info("training on %s (%d samples, %d parameters, tf=%g)", train_set.name, len(samples),
                model.parameter_count, trust)
    model, log = train(model, samples, cfg, val_samples, snapshot_dir=out)

    save_snapshot(out / "model.snap", model)
    # report on the stored float32 weights
    model = load_snapshot(out / "model.snap")
    write_csv(
        out / "train_log.csv",
        TRAIN_LOG_FIELDS,
        ([r.epoch, r.step, repr(r.train_loss), "" if r.val_miou is None else repr(r.val_miou), r.tf] for r in log),
    )
    report_on = val_samples or samples
    try:
        conf = evaluate(model, report_on)
    except FloatingPointError as e:
        raise TrainingDivergedError(str(e), cfg.epochs, -1) from e
    return write_report(out / "report.csv", conf, palette.names)


def val_entries(path) -> Sequence[ManifestEntry]:
    if not path:
        return ()
    return gt_set(load_manifest(path), "val").samples


def run(args, config: RunConfig) -> int:
    trust = check_trust(config.train.trust_factor if args.trust is None else args.trust)
    if args.set_expr:
        train_set = resolve_set(args.sets_dir, args.set_expr)
    else:
        train_set = read_train_set(args.manifest)
    if len(train_set) == 0:
        raise ConfigError(f"training set {train_set.name} is empty")
    val = val_entries(args.val)
    out = prepare_output(args.out, args.overwrite, config)
    miou = run_training(config, train_set, trust, val, out)
    print(f"{train_set.name} tf={trust:g}: mean IoU {miou:.4f}")
    return 0
