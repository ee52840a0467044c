# labelprop/commands/jitter.py

from labelprop.commands.common import prepare_output, set_path
from labelprop.core.config import RunConfig
from labelprop.datasets import build_agt_sets, gt_set, make_jitter_variants, write_train_set
from labelprop.imagery import get_palette, load_manifest


def register(subparsers, common):
    parser = subparsers.add_parser(
        "jitter", parents=[common], help="build the ambiguous-label sets AGT_1, AGT_1-2, AGT_1-3"
    )
    parser.add_argument("--gt", required=True, help="GT manifest")
    parser.set_defaults(func=run)


def run(args, config: RunConfig) -> int:
    gt = gt_set(load_manifest(args.gt))
    out = prepare_output(args.out, args.overwrite, config)
    palette = get_palette(config.palette)
    variants = make_jitter_variants(gt, config.jitter, out / "labels", palette.num_classes)
    write_train_set(set_path(out, gt.name), gt)
    for agt in build_agt_sets(gt, variants, config.jitter.copies):
        write_train_set(set_path(out, agt.name), agt)
        print(f"{agt.name}: {len(agt)} samples")
    return 0
