# labelprop/commands/make_sets.py

import logging

from labelprop.commands.common import prepare_output, set_path, write_csv
from labelprop.core.config import RunConfig
from labelprop.core.exceptions import ConfigError
from labelprop.datasets import (
    PgtIndex,
    accumulate,
    combine,
    gt_set,
    offset_composition,
    random_sets,
    rated_sets,
    sequential_sets,
    write_train_set,
)
from labelprop.imagery import load_manifest, load_ratings

logger = logging.getLogger(__name__)

SCHEMES = ("sequential", "rated", "random")


def register(subparsers, common):
    parser = subparsers.add_parser("make-sets", parents=[common], help="split a PGT index into five training sets")
    parser.add_argument("--scheme", choices=SCHEMES, required=True)
    parser.add_argument("--index", required=True, help="PGT index written by propagate")
    parser.add_argument("--ratings", help="id,rating CSV (rated scheme)")
    parser.add_argument("--gt", help="GT manifest; also writes GT+<set> and accumulated sets")
    parser.set_defaults(func=run)


def run(args, config: RunConfig) -> int:
    if args.scheme == "rated" and not args.ratings:
        raise ConfigError("the rated scheme needs --ratings")
    index = PgtIndex.from_manifest(load_manifest(args.index))
    num_sets = config.sets.num_sets

    if args.scheme == "sequential":
        sets = sequential_sets(index, num_sets)
    elif args.scheme == "rated":
        sets = rated_sets(index, load_ratings(args.ratings), num_sets)
    else:
        sets = random_sets(index, config.sets.seed, num_sets)

    out = prepare_output(args.out, args.overwrite, config)
    written = list(sets)
    if args.gt:
        gt = gt_set(load_manifest(args.gt))
        written.append(gt)
        written.extend(combine(gt, s) for s in sets)
        written.extend(accumulate(gt, sets, k) for k in range(2, num_sets + 1))

    for train_set in written:
        write_train_set(set_path(out, train_set.name), train_set)
        counts = train_set.counts()
        print(f"{train_set.name}: {len(train_set)} samples ({counts['gt']} GT, {counts['pgt']} PGT)")
    composition = offset_composition(sets)
    write_csv(out / "composition.csv", composition[0], composition[1:])
    for name, *counts, _ in composition[1:]:
        logger.info("%s offsets %s", name, dict(zip(composition[0][1:-1], counts)))
    logger.info("wrote %d set manifests to %s", len(written), out)
    return 0
