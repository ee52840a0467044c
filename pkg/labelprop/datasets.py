# labelprop/datasets.py
"""
Training-set construction over propagated labelings, ambiguous-label jitter,
synthetic video corpora and a block-matching flow estimator.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from labelprop.core.config import JitterConfig, SynthConfig
from labelprop.core.exceptions import DimensionMismatchError, ManifestError
from labelprop.imagery import (
    SYNTHETIC,
    VOID,
    DatasetManifest,
    FlowField,
    Frame,
    LabelMap,
    Palette,
    load_labels,
    load_manifest,
    relative_path,
    require_same_shape,
    write_flow,
    write_image,
    write_labels,
    write_manifest,
)
from labelprop.schemas import ManifestEntry, PgtItem, Tier

logger = logging.getLogger(__name__)

JITTER_SUFFIX = "@j"
COMPASS = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


def _absolute(entry: ManifestEntry, root: Path) -> ManifestEntry:
    return entry.model_copy(
        update={
            "image": (root / entry.image).resolve().as_posix(),
            "labels": (root / entry.labels).resolve().as_posix(),
        }
    )


# -----------------------------
# PGT INDEX AND TRAIN SETS
# -----------------------------
@dataclass(frozen=True)
class PgtIndex:
    items: Tuple[PgtItem, ...]

    def __post_init__(self):
        seen = set()
        for item in self.items:
            if item.item_id in seen:
                raise ManifestError(f"duplicate PGT item {item.item_id}")
            seen.add(item.item_id)

    def __len__(self):
        return len(self.items)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "PgtIndex":
        items = []
        for entry in manifest.entries:
            if entry.tier != Tier.PGT:
                continue
            if entry.rating is not None and entry.rating > 9:
                raise ManifestError(f"PGT item {entry.item_id} rated {entry.rating}; PGT ratings are 1..9")
            absolute = _absolute(entry, manifest.root)
            items.append(
                PgtItem(
                    seq=entry.seq,
                    offset=entry.offset,
                    image=absolute.image,
                    labels=absolute.labels,
                    rating=entry.rating,
                )
            )
        return cls(tuple(items))

    def sequences(self) -> List[str]:
        return sorted({item.seq for item in self.items})


@dataclass(frozen=True)
class TrainSet:
    """A named list of samples; image and label paths are absolute."""

    name: str
    samples: Tuple[ManifestEntry, ...] = ()

    def __post_init__(self):
        pairs = set()
        for sample in self.samples:
            pair = (sample.image, sample.labels)
            if pair in pairs:
                raise ManifestError(f"set {self.name}: duplicate sample {sample.image} / {sample.labels}")
            pairs.add(pair)

    def __len__(self):
        return len(self.samples)

    def counts(self) -> Dict[str, int]:
        gt = sum(1 for s in self.samples if s.tier == Tier.GT)
        return {"gt": gt, "pgt": len(self.samples) - gt}

    def pairs(self) -> set:
        return {(s.image, s.labels) for s in self.samples}


def gt_set(manifest: DatasetManifest, name: str = "GT") -> TrainSet:
    samples = tuple(_absolute(e, manifest.root) for e in manifest.entries if e.tier == Tier.GT)
    return TrainSet(name, samples)


def _pgt_set(name: str, items: Sequence[PgtItem]) -> TrainSet:
    return TrainSet(name, tuple(item.to_entry() for item in items))


def sequential_sets(index: PgtIndex, num_sets: int = 5) -> List[TrainSet]:
    """PGT_Sk holds every labeling propagated k frames away from its GT."""
    by_seq: Dict[str, Dict[int, PgtItem]] = {}
    for item in index.items:
        by_seq.setdefault(item.seq, {})[item.offset] = item
    problems = []
    for seq in sorted(by_seq):
        missing = [k for k in range(1, num_sets + 1) if k not in by_seq[seq]]
        if missing:
            problems.append(f"{seq} lacks offsets {missing}")
    if problems:
        raise ManifestError("incomplete sequences: " + "; ".join(problems))
    extra = sum(1 for item in index.items if item.offset > num_sets)
    if extra:
        logger.warning("ignoring %d PGT items beyond offset %d", extra, num_sets)
    return [
        _pgt_set(f"PGT_S{k}", [by_seq[seq][k] for seq in sorted(by_seq)])
        for k in range(1, num_sets + 1)
    ]


def rated_sets(index: PgtIndex, ratings: Dict[str, int], num_sets: int = 5) -> List[TrainSet]:
    """Sort by rating (best first, then seq, then offset) and cut into equal blocks."""
    rated = []
    unrated = []
    for item in index.items:
        rating = ratings.get(item.item_id, item.rating)
        if rating is None:
            unrated.append(item.item_id)
            continue
        if not 1 <= rating <= 9:
            raise ManifestError(f"PGT item {item.item_id} rated {rating}; PGT ratings are 1..9")
        rated.append((item, rating))
    if unrated:
        shown = ", ".join(unrated[:10])
        raise ManifestError(f"{len(unrated)} PGT items are unrated: {shown}")
    rated.sort(key=lambda pair: (-pair[1], pair[0].seq, pair[0].offset))
    ordered = [item.model_copy(update={"rating": rating}) for item, rating in rated]
    blocks = np.array_split(np.arange(len(ordered)), num_sets)
    return [_pgt_set(f"PGT_R{k + 1}", [ordered[i] for i in block]) for k, block in enumerate(blocks)]


def random_sets(index: PgtIndex, seed: int, num_sets: int = 5) -> List[TrainSet]:
    order = np.random.default_rng(seed).permutation(len(index))
    blocks = np.array_split(order, num_sets)
    return [_pgt_set(f"PGT_RND{k + 1}", [index.items[i] for i in block]) for k, block in enumerate(blocks)]


def offset_composition(sets: Sequence[TrainSet]) -> List[List]:
    """PGT sample counts per frame offset for every set.

    A header row ``set, 1..D, total`` (D the deepest offset present) followed
    by one row per set.
    """
    depth = max((s.offset for t in sets for s in t.samples if s.tier == Tier.PGT), default=0)
    rows: List[List] = [["set"] + [str(k) for k in range(1, depth + 1)] + ["total"]]
    for train_set in sets:
        offsets = np.array([s.offset for s in train_set.samples if s.tier == Tier.PGT], dtype=np.int64)
        counts = np.bincount(offsets, minlength=depth + 1)[1:]
        rows.append([train_set.name] + [int(c) for c in counts] + [int(counts.sum())])
    return rows


def _family(name: str) -> str:
    return name.rstrip("0123456789")


def combine(gt: TrainSet, pgt: TrainSet) -> TrainSet:
    return TrainSet(f"{gt.name}+{pgt.name}", gt.samples + pgt.samples)


def accumulate(gt: TrainSet, pgt_sets: Sequence[TrainSet], k: int) -> TrainSet:
    """GT followed by the first k PGT sets, e.g. ``GT+PGT_S(1-3)``."""
    if not 2 <= k <= len(pgt_sets):
        raise ValueError(f"k must be in 2..{len(pgt_sets)}, got {k}")
    samples = gt.samples
    for pgt in pgt_sets[:k]:
        samples = samples + pgt.samples
    return TrainSet(f"{gt.name}+{_family(pgt_sets[0].name)}(1-{k})", samples)


def write_train_set(path, train_set: TrainSet, trust: Optional[float] = None) -> None:
    """Manifest relative to ``path``; with ``trust`` set, PGT rows carry it and GT rows 1.0."""
    base = Path(path).parent
    base.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in train_set.samples:
        update = {"image": relative_path(s.image, base), "labels": relative_path(s.labels, base)}
        if trust is not None:
            update["trust"] = 1.0 if s.tier == Tier.GT else float(trust)
        rows.append(s.model_copy(update=update))
    write_manifest(path, rows, with_trust=trust is not None)


def read_train_set(path, name: Optional[str] = None) -> TrainSet:
    manifest = load_manifest(path)
    name = name or Path(path).stem
    return TrainSet(name, tuple(_absolute(e, manifest.root) for e in manifest.entries))


# -----------------------------
# AMBIGUOUS LABELS (JITTER)
# -----------------------------
@dataclass(frozen=True)
class _Region:
    cls: int
    mask: np.ndarray
    size: int


def _regions(labels: np.ndarray) -> List[_Region]:
    out = []
    for cls in np.unique(labels):
        if cls == VOID:
            continue
        components, count = ndimage.label(labels == cls)
        for region_id in range(1, count + 1):
            mask = components == region_id
            out.append(_Region(int(cls), mask, int(mask.sum())))
    return out


def _translate(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = mask.shape
    out = np.zeros_like(mask)
    out[max(0, dy):h + min(0, dy), max(0, dx):w + min(0, dx)] = mask[
        max(0, -dy):h + min(0, -dy), max(0, -dx):w + min(0, -dx)
    ]
    return out


def jitter_labels(
    labels: LabelMap, dilation_radius: int, shift_range: Tuple[int, int], seed: int
) -> LabelMap:
    """Dilate every connected region, then shift each by a random compass step.

    Where dilated regions overlap the larger region wins, then the lower
    class. Shifted regions are painted largest first so small objects stay
    visible; pixels nobody moves onto keep their dilated label.
    """
    lo, hi = shift_range
    if dilation_radius < 0:
        raise ValueError("dilation_radius must be >= 0")
    if not 0 <= lo <= hi <= 8:
        raise ValueError(f"shift range must lie within [0, 8], got {shift_range}")
    rng = np.random.default_rng(seed)
    source = labels.labels
    regions = _regions(source)
    void = source == VOID

    # weakest first, so the strongest claimant is painted last
    ranked = sorted(regions, key=lambda r: (r.size, -r.cls))
    dilated = np.array(source)
    supports = []
    for region in ranked:
        grown = region.mask
        if dilation_radius > 0:
            grown = ndimage.binary_dilation(region.mask, iterations=dilation_radius)
        grown = grown & ~void
        dilated[grown] = region.cls
        supports.append(grown)

    shifts = []
    for _ in ranked:
        step = COMPASS[rng.integers(len(COMPASS))]
        magnitude = int(rng.integers(lo, hi + 1))
        shifts.append((step[0] * magnitude, step[1] * magnitude))

    out = np.array(dilated)
    for region, support, (dy, dx) in reversed(list(zip(ranked, supports, shifts))):
        owned = support & (dilated == region.cls)
        moved = _translate(owned, dy, dx) & ~void
        out[moved] = region.cls
    return LabelMap(out, labels.num_classes)


def make_jitter_variants(gt: TrainSet, cfg: JitterConfig, out_dir, num_classes: int) -> Dict[str, List[ManifestEntry]]:
    """Write ``cfg.copies`` jittered label maps per GT sample.

    Variant k of sequence ``s`` is the PGT entry ``(s@j, k)`` sharing the GT
    image; every variant uses its own seed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    variants: Dict[str, List[ManifestEntry]] = {}
    for n, sample in enumerate(gt.samples):
        labels = load_labels(sample.labels, num_classes)
        entries = []
        for k in range(1, cfg.copies + 1):
            seed = cfg.seed * 1_000_003 + n * cfg.copies + k
            jittered = jitter_labels(labels, cfg.dilation_radius, (cfg.shift_min, cfg.shift_max), seed)
            target = (out_dir / f"{sample.seq}_j{k}.png").resolve()
            write_labels(target, jittered)
            entries.append(
                ManifestEntry(
                    image=sample.image,
                    labels=target.as_posix(),
                    tier=Tier.PGT,
                    seq=sample.seq + JITTER_SUFFIX,
                    offset=k,
                )
            )
        variants[sample.item_id] = entries
    return variants


def build_agt_sets(gt: TrainSet, variants: Dict[str, List[ManifestEntry]], copies: int = 3) -> List[TrainSet]:
    missing = [s.item_id for s in gt.samples if len(variants.get(s.item_id, ())) < copies]
    if missing:
        raise ManifestError(f"missing jitter variants for {', '.join(missing[:10])}")
    sets = []
    for k in range(1, copies + 1):
        extra = tuple(v for s in gt.samples for v in variants[s.item_id][:k])
        name = "AGT_1" if k == 1 else f"AGT_1-{k}"
        sets.append(TrainSet(name, gt.samples + extra))
    return sets


# -----------------------------
# SYNTHETIC CORPUS
# -----------------------------
@dataclass(frozen=True)
class _MovingObject:
    cls: int
    top: int
    left: int
    height: int
    width: int
    vy: int
    vx: int
    texture: np.ndarray


@dataclass(frozen=True)
class SynthCorpus:
    root: Path
    manifest: Path
    val_manifest: Path
    sequences: Tuple[str, ...] = ()
    val_sequences: Tuple[str, ...] = ()


def _start(rng: np.random.Generator, extent: int, size: int, speed: int, travel: int) -> int:
    if speed >= 0:
        return int(rng.integers(0, extent - size - speed * travel + 1))
    return int(rng.integers(-speed * travel, extent - size + 1))


def _velocity(rng: np.random.Generator, cfg: SynthConfig) -> int:
    speed = int(rng.integers(cfg.min_speed, cfg.max_speed + 1))
    return speed if rng.random() < 0.5 else -speed


def _textured(base, shape, sigma, rng) -> np.ndarray:
    noise = rng.normal(0.0, sigma, size=shape + (3,)) if sigma > 0 else np.zeros(shape + (3,))
    return np.asarray(base, dtype=np.float64) + noise


def render_sequence(cfg: SynthConfig, rng: np.random.Generator, palette: Palette = SYNTHETIC):
    """Frames, label maps and exact flows of one rigid-motion sequence."""
    h, w, travel = cfg.height, cfg.width, cfg.num_frames - 1
    horizon = h // 2
    sky, road = palette.index("Sky"), palette.index("Road")
    object_classes = [i for i in range(palette.num_classes) if i not in (sky, road)]

    background = np.empty((h, w, 3))
    background[:horizon] = _textured(palette.colors[sky], (horizon, w), cfg.noise_sigma, rng)
    background[horizon:] = _textured(palette.colors[road], (h - horizon, w), cfg.noise_sigma, rng)
    base_labels = np.full((h, w), road, dtype=np.uint8)
    base_labels[:horizon] = sky

    objects = []
    for _ in range(cfg.num_objects):
        cls = object_classes[int(rng.integers(len(object_classes)))]
        oh = int(rng.integers(cfg.min_object_size, cfg.max_object_size + 1))
        ow = int(rng.integers(cfg.min_object_size, cfg.max_object_size + 1))
        vy, vx = _velocity(rng, cfg), _velocity(rng, cfg)
        objects.append(
            _MovingObject(
                cls=cls,
                top=_start(rng, h, oh, vy, travel),
                left=_start(rng, w, ow, vx, travel),
                height=oh,
                width=ow,
                vy=vy,
                vx=vx,
                texture=_textured(palette.colors[cls], (oh, ow), cfg.noise_sigma, rng),
            )
        )

    frames, label_maps, flows = [], [], []
    for t in range(cfg.num_frames):
        image = background.copy()
        labels = base_labels.copy()
        motion = np.zeros((h, w, 2), dtype=np.float32)
        for obj in objects:  # later objects occlude earlier ones
            top, left = obj.top + obj.vy * t, obj.left + obj.vx * t
            window = (slice(top, top + obj.height), slice(left, left + obj.width))
            image[window] = obj.texture
            labels[window] = obj.cls
            motion[window] = (obj.vx, obj.vy)
        frames.append(Frame(np.clip(np.rint(image), 0, 255).astype(np.uint8)))
        label_maps.append(LabelMap(labels, palette.num_classes))
        if t < travel:
            flows.append(FlowField(motion))
    return frames, label_maps, flows


def frame_name(t: int) -> str:
    return f"frame_{t:02d}.png"


def labels_name(t: int) -> str:
    return f"labels_{t:02d}.png"


def flow_name(t: int) -> str:
    return f"flow_{t:02d}.flo"


def synth_corpus(cfg: SynthConfig, root, palette: Palette = SYNTHETIC) -> SynthCorpus:
    """Write ``<root>/<seq>/{frame,labels}_NN.png`` and ``flow_NN.flo`` plus manifests.

    ``manifest.csv`` lists the GT frame (frame 0) of every training sequence;
    ``val_manifest.csv`` lists every frame of the held-out sequences.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    total = cfg.num_sequences + cfg.num_val_sequences
    streams = np.random.SeedSequence(cfg.seed).spawn(total)
    train_ids = tuple(f"seq{i:03d}" for i in range(cfg.num_sequences))
    val_ids = tuple(f"val{i:03d}" for i in range(cfg.num_val_sequences))

    train_rows, val_rows = [], []
    for seq_id, stream in zip(train_ids + val_ids, streams):
        frames, label_maps, flows = render_sequence(cfg, np.random.default_rng(stream), palette)
        seq_dir = root / seq_id
        seq_dir.mkdir(exist_ok=True)
        for t, (frame, labels) in enumerate(zip(frames, label_maps)):
            write_image(seq_dir / frame_name(t), frame)
            write_labels(seq_dir / labels_name(t), labels)
        for t, flow in enumerate(flows):
            write_flow(seq_dir / flow_name(t), flow)

        if seq_id in train_ids:
            train_rows.append(
                ManifestEntry(image=f"{seq_id}/{frame_name(0)}", labels=f"{seq_id}/{labels_name(0)}",
                              tier=Tier.GT, seq=seq_id, offset=0)
            )
        else:
            for t in range(cfg.num_frames):
                val_rows.append(
                    ManifestEntry(image=f"{seq_id}/{frame_name(t)}", labels=f"{seq_id}/{labels_name(t)}",
                                  tier=Tier.GT, seq=f"{seq_id}_{t:02d}", offset=0)
                )

    corpus = SynthCorpus(root, root / "manifest.csv", root / "val_manifest.csv", train_ids, val_ids)
    write_manifest(corpus.manifest, train_rows)
    write_manifest(corpus.val_manifest, val_rows)
    logger.info("synthetic corpus at %s: %d train, %d val sequences", root, len(train_ids), len(val_ids))
    return corpus


@dataclass(frozen=True)
class SequenceFiles:
    """Frames and flows that follow a GT frame in its sequence directory."""

    frames: List[Path] = field(default_factory=list)
    flows: List[Path] = field(default_factory=list)
    truth: List[Path] = field(default_factory=list)


def sequence_files(image_path, depth: int) -> SequenceFiles:
    seq_dir = Path(image_path).parent
    return SequenceFiles(
        frames=[seq_dir / frame_name(t) for t in range(1, depth + 1)],
        flows=[seq_dir / flow_name(t) for t in range(depth)],
        truth=[seq_dir / labels_name(t) for t in range(1, depth + 1)],
    )


# -----------------------------
# FLOW ESTIMATION
# -----------------------------
def _candidates(search: int) -> List[Tuple[int, int]]:
    span = range(-search, search + 1)
    return sorted(((u, v) for u in span for v in span), key=lambda uv: (abs(uv[0]) + abs(uv[1]), uv))


def estimate_flow(prev: Frame, next: Frame, block: int = 8, search: int = 7) -> FlowField:
    """Integer block matching: each block of ``prev`` is found in ``next``.

    Candidates whose displaced block leaves the image are skipped. Ties go
    to the smaller |u| + |v|, then to the lexicographically smaller (u, v).
    """
    require_same_shape(prev, next, what="flow frames")
    if block < 1 or search < 0:
        raise DimensionMismatchError(f"invalid block {block} / search {search}")
    h, w = prev.shape
    a = prev.data.astype(np.float64)
    b = next.data.astype(np.float64)
    row_starts = np.arange(0, h, block)
    col_starts = np.arange(0, w, block)

    best = np.full((len(row_starts), len(col_starts)), np.inf)
    best_uv = np.zeros(best.shape + (2,), dtype=np.float32)
    for u, v in _candidates(search):
        shifted = np.full_like(a, np.nan)
        shifted[max(0, -v):h - max(0, v), max(0, -u):w - max(0, u)] = b[
            max(0, v):h - max(0, -v), max(0, u):w - max(0, -u)
        ]
        cost = np.abs(shifted - a).sum(axis=2)
        sad = np.add.reduceat(np.add.reduceat(cost, row_starts, axis=0), col_starts, axis=1)
        better = ~np.isnan(sad) & (sad < best)
        best[better] = sad[better]
        best_uv[better] = (u, v)

    vectors = np.repeat(np.repeat(best_uv, block, axis=0), block, axis=1)[:h, :w]
    return FlowField(vectors)


# -----------------------------
# ORACLE RATINGS
# -----------------------------
def oracle_rating(pgt: LabelMap, truth: LabelMap) -> int:
    """1..9 from pixel error: 9 below 0.5 %, one point lost per further 0.5 %."""
    require_same_shape(pgt, truth, what="rating inputs")
    scored = ~truth.void_mask
    if not scored.any():
        return 9
    error = float(np.mean(pgt.labels[scored] != truth.labels[scored]))
    return max(1, 9 - int(error / 0.005))
