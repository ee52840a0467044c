# labelprop/commands/propagate.py

import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional

from labelprop.commands.common import prepare_output
from labelprop.core.config import RunConfig
from labelprop.core.exceptions import LabelPropError, PropagationError, RuntimeFailure
from labelprop.crf import (
    appearance_filename,
    copy_propagate,
    pgt_filename,
    propagate_sequence,
    write_propagation,
    write_run_log,
)
from labelprop.cues import ClassAppearanceModel, load_appearance
from labelprop.datasets import estimate_flow, oracle_rating, sequence_files
from labelprop.imagery import (
    FlowField,
    get_palette,
    load_image,
    load_labels,
    load_manifest,
    read_flow,
    relative_path,
    write_manifest,
    write_ratings,
)
from labelprop.schemas import ManifestEntry, Tier

logger = logging.getLogger(__name__)


def register(subparsers, common):
    parser = subparsers.add_parser(
        "propagate", parents=[common], help="propagate every GT labeling forward into PGT labelings"
    )
    parser.add_argument("--corpus", required=True, help="corpus manifest listing the GT frames")
    parser.add_argument("--sequences", nargs="*", help="restrict to these sequence ids")
    parser.add_argument(
        "--appearance", help="directory of <seq>_gmm.bin fits to reuse instead of refitting (see dump_marginals)"
    )
    parser.add_argument("--parallel", type=int, help="worker processes (default: propagate.parallel)")
    parser.set_defaults(func=run)


def _flows(config: RunConfig, seq_id: str, frames, gt_frame, paths) -> List[FlowField]:
    flows = []
    previous = gt_frame
    for t, path in enumerate(paths):
        if path.is_file():
            flows.append(read_flow(path))
        elif config.propagate.estimate_flow:
            flows.append(
                estimate_flow(previous, frames[t], config.propagate.flow_block, config.propagate.flow_search)
            )
        else:
            raise PropagationError(
                f"missing flow {path.name} and flow estimation is disabled", frame_index=t, seq_id=seq_id
            )
        previous = frames[t]
    return flows


def saved_appearance(appearance_dir, seq_id: str) -> Optional[ClassAppearanceModel]:
    if not appearance_dir:
        return None
    path = Path(appearance_dir) / appearance_filename(seq_id)
    if not path.is_file():
        logger.warning("no saved appearance fit for %s in %s; fitting from the GT frame", seq_id, appearance_dir)
        return None
    try:
        return load_appearance(path)
    except LabelPropError as e:
        raise PropagationError(e.detail, frame_index=0, seq_id=seq_id) from e


def propagate_entry(config: RunConfig, entry: ManifestEntry, root: Path, out: Path, appearance_dir=None):
    """Propagate one GT entry; returns (log rows, index entries, ratings)."""
    palette = get_palette(config.palette)
    depth = config.crf.depth
    image_path = root / entry.image
    gt_frame = load_image(image_path)
    gt_labels = load_labels(root / entry.labels, palette.num_classes)
    files = sequence_files(image_path, depth)
    missing = [p.name for p in files.frames if not p.is_file()]
    if missing:
        raise PropagationError(f"missing frames {missing}", seq_id=entry.seq)
    frames = [load_image(p) for p in files.frames]

    if config.propagate.mode == "copy":
        result = copy_propagate(gt_labels, depth, entry.seq)
    else:
        flows = _flows(config, entry.seq, frames, gt_frame, files.flows)
        result = propagate_sequence(
            gt_frame, gt_labels, frames, flows, config.crf, config.cue, entry.seq,
            appearance=saved_appearance(appearance_dir, entry.seq),
        )

    rows = write_propagation(result, out / "pgt", entry.seq, config.propagate.dump_marginals)
    index, ratings = [], []
    for frame_result, frame_path, truth_path in zip(result.frames, files.frames, files.truth):
        rating: Optional[int] = None
        if config.propagate.oracle_ratings and truth_path.is_file():
            rating = oracle_rating(frame_result.labels, load_labels(truth_path, palette.num_classes))
            ratings.append((f"{entry.seq}/{frame_result.offset}", rating))
        index.append(
            ManifestEntry(
                image=relative_path(frame_path, out),
                labels=f"pgt/{pgt_filename(entry.seq, frame_result.offset)}",
                tier=Tier.PGT,
                seq=entry.seq,
                offset=frame_result.offset,
                rating=rating,
            )
        )
    return rows, index, ratings


def propagate_worker(config_json: str, entry: ManifestEntry, root: str, out: str, appearance_dir: Optional[str]):
    """Runs in a worker process; a failure comes back as its detail string."""
    config = RunConfig.model_validate_json(config_json)
    try:
        return propagate_entry(config, entry, Path(root), Path(out), appearance_dir), None
    except LabelPropError as e:
        return None, e.detail


def run(args, config: RunConfig) -> int:
    manifest = load_manifest(args.corpus)
    out = prepare_output(args.out, args.overwrite, config)
    wanted = set(args.sequences or [])
    entries = [e for e in manifest.entries if e.tier == Tier.GT and (not wanted or e.seq in wanted)]
    parallel = args.parallel or config.propagate.parallel

    config_json = config.model_dump_json()
    jobs = [(config_json, entry, str(manifest.root), str(out), args.appearance) for entry in entries]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            futures = [pool.submit(propagate_worker, *job) for job in jobs]
            outcomes = [f.result() for f in futures]
    else:
        outcomes = [propagate_worker(*job) for job in jobs]

    log_rows, index, ratings, failed = [], [], [], []
    # entry order, whatever order the workers finished in
    for entry, (produced, error) in zip(entries, outcomes):
        if produced is None:
            logger.error("sequence %s failed: %s", entry.seq, error)
            failed.append(entry.seq)
            continue
        rows, items, rated = produced
        log_rows.extend(rows)
        index.extend(items)
        ratings.extend(rated)

    write_run_log(out / "run_log.csv", log_rows)
    write_manifest(out / "pgt_index.csv", index)
    if ratings:
        write_ratings(out / "ratings.csv", ratings)
    print(f"propagated {len(entries) - len(failed)}/{len(entries)} sequences, {len(index)} PGT labelings indexed")
    if failed:
        raise RuntimeFailure(f"{len(failed)} sequences failed: {', '.join(failed)}")
    return 0
