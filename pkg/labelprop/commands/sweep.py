# labelprop/commands/sweep.py

import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from labelprop.commands.common import check_trust, prepare_output, resolve_set, write_csv
from labelprop.commands.train import run_training, val_entries
from labelprop.core.config import RunConfig
from labelprop.core.exceptions import ConfigError, LabelPropError
from labelprop.metrics import format_table, write_table

logger = logging.getLogger(__name__)

Cell = Tuple[str, float, int]


def register(subparsers, common):
    parser = subparsers.add_parser("sweep", parents=[common], help="train every set x trust factor x seed cell")
    parser.add_argument("--sets-dir", required=True)
    parser.add_argument("--set", dest="sets", action="append", help="set expression (repeatable)")
    parser.add_argument("--trust", type=float, nargs="+", help="trust factors (default: sweep.trust_factors)")
    parser.add_argument("--val", help="validation manifest")
    parser.add_argument("--parallel", type=int, help="worker processes (default: sweep.parallel)")
    parser.set_defaults(func=run)


def cell_dir(out: Path, cell: Cell) -> Path:
    name, tf, seed = cell
    return out / "cells" / name / f"tf{tf:g}_seed{seed}"


def run_cell(config_json: str, sets_dir: str, val: Optional[str], out: str, cell: Cell) -> Optional[float]:
    """Runs in a worker process; failures come back as ``None``."""
    config = RunConfig.model_validate_json(config_json)
    name, tf, seed = cell
    target = cell_dir(Path(out), cell)
    target.mkdir(parents=True, exist_ok=True)
    try:
        cell_config = config.with_seed(seed)
        (target / "config.json").write_text(cell_config.resolved_json(), encoding="utf-8")
        return run_training(cell_config, resolve_set(sets_dir, name), tf, val_entries(val), target)
    except LabelPropError as e:
        logger.error("cell %s tf=%g seed=%d failed: %s", name, tf, seed, e.detail)
        (target / "FAILED").write_text(e.detail + "\n", encoding="utf-8")
        return None


def run(args, config: RunConfig) -> int:
    sets = args.sets or list(config.sweep.sets)
    if not sets:
        raise ConfigError("no sets to sweep; pass --set or configure sweep.sets")
    trust_factors = [check_trust(tf) for tf in (args.trust or config.sweep.trust_factors)]
    parallel = args.parallel or config.sweep.parallel
    for name in sets:
        resolve_set(args.sets_dir, name)
    out = prepare_output(args.out, args.overwrite, config)

    cells: List[Cell] = [(name, tf, seed) for name in sets for tf in trust_factors for seed in config.sweep.seeds]
    payload = (config.model_dump_json(), str(args.sets_dir), args.val, str(out))
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            futures = [pool.submit(run_cell, *payload, cell) for cell in cells]
            results = [f.result() for f in futures]
    else:
        results = [run_cell(*payload, cell) for cell in cells]

    write_csv(
        out / "cells.csv",
        ["set", "tf", "seed", "miou"],
        ([name, f"{tf:g}", seed, "" if r is None else repr(r)] for (name, tf, seed), r in zip(cells, results)),
    )
    by_cell: Dict[str, Dict[float, Optional[float]]] = {name: {} for name in sets}
    for name in sets:
        for tf in trust_factors:
            scores = [r for (n, t, _), r in zip(cells, results) if n == name and t == tf and r is not None]
            by_cell[name][tf] = float(np.mean(scores)) if scores else None
    table = format_table(by_cell, trust_factors)
    write_table(out / "sweep.csv", table)
    for row in table:
        print(",".join(row))

    failures = sum(r is None for r in results)
    if failures:
        logger.warning("%d of %d cells failed", failures, len(cells))
    return 0
