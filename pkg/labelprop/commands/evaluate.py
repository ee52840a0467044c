# labelprop/commands/evaluate.py

from labelprop.commands.common import prepare_output
from labelprop.core.config import RunConfig
from labelprop.core.exceptions import DimensionMismatchError, EmptyEvaluationError
from labelprop.datasets import read_train_set
from labelprop.imagery import get_palette
from labelprop.metrics import write_report
from labelprop.trainer import evaluate, load_samples, load_snapshot


def register(subparsers, common):
    parser = subparsers.add_parser("eval", parents=[common], help="score a model snapshot on a manifest")
    parser.add_argument("--model", required=True, help="snapshot written by train")
    parser.add_argument("--manifest", required=True)
    parser.set_defaults(func=run)


def run(args, config: RunConfig) -> int:
    palette = get_palette(config.palette)
    model = load_snapshot(args.model)
    if model.num_classes != palette.num_classes:
        raise DimensionMismatchError(
            f"model predicts {model.num_classes} classes but palette '{config.palette}' has {palette.num_classes}"
        )
    entries = read_train_set(args.manifest).samples
    if not entries:
        raise EmptyEvaluationError(f"empty evaluation: {args.manifest} lists no images")
    out = prepare_output(args.out, args.overwrite, config)
    conf = evaluate(model, load_samples(entries, palette.num_classes))
    miou = write_report(out / "report.csv", conf, palette.names)
    print(f"mean IoU {miou:.4f}")
    return 0
