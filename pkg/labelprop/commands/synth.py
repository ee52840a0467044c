# labelprop/commands/synth.py

from labelprop.commands.common import prepare_output
from labelprop.core.config import RunConfig
from labelprop.datasets import synth_corpus
from labelprop.imagery import get_palette


def register(subparsers, common):
    parser = subparsers.add_parser(
        "synth", parents=[common], help="generate a synthetic video corpus with dense GT and exact flows"
    )
    parser.set_defaults(func=run)


def run(args, config: RunConfig) -> int:
    out = prepare_output(args.out, args.overwrite, config)
    corpus = synth_corpus(config.synth, out, get_palette(config.palette))
    cfg = config.synth
    print(
        f"corpus {out}: {len(corpus.sequences)} training + {len(corpus.val_sequences)} validation sequences, "
        f"{cfg.num_frames} frames of {cfg.width}x{cfg.height}, {cfg.num_objects} objects each"
    )
    return 0
