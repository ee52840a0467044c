# labelprop/crf.py
"""
Label propagation energy and its mean-field minimization.

    E(S') = U_motion(S') + lambda1 * U_appearance(S') + lambda2 * V_potts(S')

``V_potts`` is a contrast-sensitive Potts term over a square neighbourhood;
each unordered pixel pair is counted once.
"""

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from labelprop.core.config import CrfConfig, CueConfig
from labelprop.core.exceptions import (
    DimensionMismatchError,
    InferenceError,
    LabelPropError,
    LabelRangeError,
    PropagationError,
)
from labelprop.cues import (
    ClassAppearanceModel,
    fit_appearance,
    histogram_field,
    neg_log_likelihood_field,
    save_appearance,
    sym_kl_field,
)
from labelprop.imagery import VOID, FlowField, Frame, LabelMap, require_same_shape, write_labels
from labelprop.schemas import PropagationLogRow

logger = logging.getLogger(__name__)

MARGINAL_MAGIC = b"LPQ1"
RUN_LOG_FIELDS = ["seq", "offset", "iters", "free_energy", "changed_pixels"]


# -----------------------------
# FIELDS AND RESULTS
# -----------------------------
@dataclass(frozen=True, eq=False)
class UnaryField:
    costs: np.ndarray  # (H, W, C)

    def __post_init__(self):
        costs = np.array(self.costs, dtype=np.float64)
        if costs.ndim != 3:
            raise DimensionMismatchError(f"unary costs must be (H, W, C), got {costs.shape}")
        costs.setflags(write=False)
        object.__setattr__(self, "costs", costs)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.costs.shape[:2]

    @property
    def num_classes(self) -> int:
        return self.costs.shape[2]


@dataclass(frozen=True, eq=False)
class MarginalField:
    q: np.ndarray  # (H, W, C)

    def __post_init__(self):
        q = np.array(self.q, dtype=np.float64)
        if q.ndim != 3:
            raise DimensionMismatchError(f"marginals must be (H, W, C), got {q.shape}")
        if (q < 0).any() or not np.allclose(q.sum(axis=2), 1.0, rtol=0.0, atol=1e-6):
            raise InferenceError("marginals must be nonnegative and sum to 1 per pixel")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.q.shape[:2]

    def argmax(self) -> LabelMap:
        # np.argmax returns the first maximum, so ties go to the lowest class index
        return LabelMap(np.argmax(self.q, axis=2).astype(np.uint8), self.q.shape[2])


@dataclass(frozen=True)
class FrameResult:
    offset: int
    labels: LabelMap
    marginals: MarginalField
    free_energy: float
    iterations: int
    changed_pixels: int


@dataclass(frozen=True)
class PropagationResult:
    frames: Tuple[FrameResult, ...]
    seq_id: Optional[str] = None
    appearance: Optional[ClassAppearanceModel] = None

    def __len__(self):
        return len(self.frames)


# -----------------------------
# NEIGHBOURHOOD
# -----------------------------
def neighborhood_offsets(radius: int) -> List[Tuple[int, int]]:
    return [
        (dy, dx)
        for dy in range(-radius, radius + 1)
        for dx in range(-radius, radius + 1)
        if (dy, dx) != (0, 0)
    ]


def forward_offsets(radius: int) -> List[Tuple[int, int]]:
    """One offset per unordered pair: later in raster order."""
    return [(dy, dx) for dy, dx in neighborhood_offsets(radius) if dy > 0 or (dy == 0 and dx > 0)]


def _overlap(dy: int, dx: int, h: int, w: int):
    """Slices (src, dst) such that src pixel p pairs with dst pixel p + (dy, dx)."""
    src = (slice(max(0, -dy), h - max(0, dy)), slice(max(0, -dx), w - max(0, dx)))
    dst = (slice(max(0, dy), h - max(0, -dy)), slice(max(0, dx), w - max(0, -dx)))
    return src, dst


def resolve_beta(cfg: CrfConfig, frame: Frame) -> float:
    """Fixed beta, or 1 / (2 * mean squared colour difference over neighbour pairs)."""
    if cfg.beta != "auto":
        return float(cfg.beta)
    colors = frame.normalized()
    h, w = frame.shape
    total, count = 0.0, 0
    for dy, dx in forward_offsets(cfg.neighborhood_radius):
        src, dst = _overlap(dy, dx, h, w)
        diff = colors[src] - colors[dst]
        total += float(np.sum(diff * diff))
        count += diff.shape[0] * diff.shape[1]
    if count == 0 or total == 0.0:
        return 0.0
    return 1.0 / (2.0 * total / count)


def _pair_weights(frame: Frame, beta: float, radius: int):
    """Per forward offset: (dy, dx, weights over the overlap region)."""
    colors = frame.normalized()
    h, w = frame.shape
    out = []
    for dy, dx in forward_offsets(radius):
        src, dst = _overlap(dy, dx, h, w)
        diff = colors[src] - colors[dst]
        weight = np.exp(-beta * np.sum(diff * diff, axis=2)) / math.hypot(dy, dx)
        out.append((dy, dx, weight))
    return out


def pairwise_cost(
    cfg: CrfConfig,
    frame: Frame,
    m: Tuple[int, int],
    n: Tuple[int, int],
    l_m: int,
    l_n: int,
    beta: Optional[float] = None,
) -> float:
    dy, dx = n[0] - m[0], n[1] - m[1]
    if (dy, dx) == (0, 0):
        raise ValueError("pairwise_cost needs two distinct pixels")
    if max(abs(dy), abs(dx)) > cfg.neighborhood_radius:
        raise ValueError(f"pixels {m} and {n} are not neighbours at radius {cfg.neighborhood_radius}")
    if l_m == l_n:
        return 0.0
    beta = resolve_beta(cfg, frame) if beta is None else beta
    colors = frame.normalized()
    diff = colors[m] - colors[n]
    return float(np.exp(-beta * np.dot(diff, diff)) / math.hypot(dy, dx))


# -----------------------------
# UNARIES
# -----------------------------
def motion_unary(
    prev_labels: LabelMap,
    prev_frame: Frame,
    next_frame: Frame,
    flow: FlowField,
    cue_cfg: Optional[CueConfig] = None,
    alpha: float = 1.0,
) -> UnaryField:
    """Weighted votes from every source pixel whose rounded flow lands on the target.

    cost(n, l) = sum over incoming n' of w(n', n) * [l != S(n')]; void sources
    cast no vote and pixels without incoming flow get a zero cost vector.
    """
    cue_cfg = cue_cfg or CueConfig()
    require_same_shape(prev_labels, prev_frame, next_frame, flow, what="motion unary inputs")
    h, w = prev_labels.shape
    num_classes = prev_labels.num_classes

    rows, cols = np.indices((h, w))
    target_row = np.floor(rows + flow.vectors[..., 1].astype(np.float64) + 0.5).astype(np.int64)
    target_col = np.floor(cols + flow.vectors[..., 0].astype(np.float64) + 0.5).astype(np.int64)
    valid = (
        (target_row >= 0) & (target_row < h) & (target_col >= 0) & (target_col < w)
        & (prev_labels.labels != VOID)
    )

    hist_prev = histogram_field(prev_frame, cue_cfg.patch_radius, cue_cfg.bins)
    hist_next = histogram_field(next_frame, cue_cfg.patch_radius, cue_cfg.bins)
    src_r, src_c = rows[valid], cols[valid]
    tgt_r, tgt_c = target_row[valid], target_col[valid]
    weights = np.exp(-alpha * sym_kl_field(hist_prev[src_r, src_c], hist_next[tgt_r, tgt_c]))

    target = tgt_r * w + tgt_c
    source_labels = prev_labels.labels[valid]
    costs = np.zeros((h * w, num_classes), dtype=np.float64)
    for cls in range(num_classes):
        costs[:, cls] = np.bincount(target, weights=weights * (source_labels != cls), minlength=h * w)
    return UnaryField(costs.reshape(h, w, num_classes))


def appearance_unary(
    model: ClassAppearanceModel, next_frame: Frame, num_classes: Optional[int] = None
) -> UnaryField:
    if num_classes is not None and num_classes != model.num_classes:
        raise DimensionMismatchError(
            f"appearance model has {model.num_classes} classes, expected {num_classes}"
        )
    h, w = next_frame.shape
    costs = neg_log_likelihood_field(model, next_frame.normalized().reshape(-1, 3))
    return UnaryField(costs.reshape(h, w, model.num_classes))


# -----------------------------
# ENERGY
# -----------------------------
def _check_energy_inputs(motion: UnaryField, appearance: UnaryField, frame: Frame) -> None:
    require_same_shape(motion, appearance, frame, what="energy inputs")
    if motion.num_classes != appearance.num_classes:
        raise DimensionMismatchError(
            f"unary class counts differ: {motion.num_classes} vs {appearance.num_classes}"
        )


def total_energy(
    labels: LabelMap,
    motion: UnaryField,
    appearance: UnaryField,
    frame: Frame,
    cfg: CrfConfig,
) -> float:
    _check_energy_inputs(motion, appearance, frame)
    require_same_shape(labels, frame, what="labels and frame")
    if labels.void_mask.any():
        raise LabelRangeError("energy is undefined for labelings containing VOID")
    s = labels.labels.astype(np.int64)
    if s.max() >= motion.num_classes:
        raise LabelRangeError(f"labeling uses classes beyond the {motion.num_classes} unary columns")

    pick = s[..., None]
    unary = float(np.take_along_axis(motion.costs, pick, axis=2).sum())
    unary += cfg.lambda1 * float(np.take_along_axis(appearance.costs, pick, axis=2).sum())

    h, w = frame.shape
    pairwise = 0.0
    for dy, dx, weight in _pair_weights(frame, resolve_beta(cfg, frame), cfg.neighborhood_radius):
        src, dst = _overlap(dy, dx, h, w)
        pairwise += float(np.sum(weight * (s[src] != s[dst])))
    return unary + cfg.lambda2 * pairwise


def _softmax_neg(u: np.ndarray) -> np.ndarray:
    z = np.exp(-(u - u.min(axis=-1, keepdims=True)))
    return z / z.sum(axis=-1, keepdims=True)


def _neighbour_table(frame: Frame, beta: float, radius: int):
    """Flat neighbour indices and weights for the full symmetric neighbourhood.

    Missing neighbours point at a dummy row ``N`` with weight 0.
    """
    h, w = frame.shape
    n = h * w
    offsets = neighborhood_offsets(radius)
    index = np.full((n, len(offsets)), n, dtype=np.int64)
    weight = np.zeros((n, len(offsets)), dtype=np.float64)
    colors = frame.normalized()
    flat_ids = np.arange(n).reshape(h, w)
    for k, (dy, dx) in enumerate(offsets):
        src, dst = _overlap(dy, dx, h, w)
        diff = colors[src] - colors[dst]
        wk = np.exp(-beta * np.sum(diff * diff, axis=2)) / math.hypot(dy, dx)
        index[flat_ids[src].ravel(), k] = flat_ids[dst].ravel()
        weight[flat_ids[src].ravel(), k] = wk.ravel()
    return index, weight


def _free_energy(q: np.ndarray, u: np.ndarray, pairs, lambda2: float, h: int, w: int) -> float:
    """sum q*u + lambda2 * sum_pairs w * P(labels differ) + sum q log q."""
    energy = float(np.sum(q * u))
    for dy, dx, weight in pairs:
        src, dst = _overlap(dy, dx, h, w)
        agree = np.sum(q[src] * q[dst], axis=2)
        energy += lambda2 * float(np.sum(weight * (1.0 - agree)))
    with np.errstate(divide="ignore", invalid="ignore"):
        entropy_terms = np.where(q > 0, q * np.log(q), 0.0)
    return energy + float(np.sum(entropy_terms))


def _update_phases(h: int, w: int, radius: int) -> List[np.ndarray]:
    """Flat pixel ids grouped by ``(row, col) mod (radius + 1)``; no two pixels of a phase are neighbours."""
    step = radius + 1
    rows, cols = np.divmod(np.arange(h * w), w)
    key = (rows % step) * step + cols % step
    return [ids for ids in (np.flatnonzero(key == k) for k in range(step * step)) if len(ids)]


def _raster_sweep(q, u_flat, index, weight, weight_sum, lam2: float, damping: float) -> float:
    max_change = 0.0
    for p in range(len(u_flat)):
        field = u_flat[p] + lam2 * (weight_sum[p] - weight[p] @ q[index[p]])
        new = np.exp(-(field - field.min()))
        new /= new.sum()
        if damping > 0.0:
            new = (1.0 - damping) * new + damping * q[p]
        change = float(np.abs(new - q[p]).sum())
        if change > max_change:
            max_change = change
        q[p] = new
    return max_change


def _phase_sweep(q, u_flat, index, weight, weight_sum, lam2: float, damping: float, phases) -> float:
    max_change = 0.0
    for ids in phases:
        agree = np.einsum("pk,pkc->pc", weight[ids], q[index[ids]])
        new = _softmax_neg(u_flat[ids] + lam2 * (weight_sum[ids, None] - agree))
        if damping > 0.0:
            new = (1.0 - damping) * new + damping * q[ids]
        max_change = max(max_change, float(np.abs(new - q[ids]).sum(axis=1).max()))
        q[ids] = new
    return max_change


def mean_field_infer(
    motion: UnaryField,
    appearance: UnaryField,
    frame: Frame,
    cfg: CrfConfig,
    init: Optional[MarginalField] = None,
) -> Tuple[LabelMap, MarginalField, List[float]]:
    """Sequential mean-field updates with optional damping.

    ``cfg.update_order`` picks raster order (one pixel at a time) or vectorized
    checkerboard phases; both are coordinate updates, so with damping 0 the
    free energy never increases.

    Returns the decoded labeling, the final marginals and the free-energy
    trace (initial value first, then one value per sweep).
    """
    _check_energy_inputs(motion, appearance, frame)
    h, w = frame.shape
    c = motion.num_classes
    u = motion.costs + cfg.lambda1 * appearance.costs
    if not np.isfinite(u).all():
        raise InferenceError("unary costs contain NaN or Inf")

    beta = resolve_beta(cfg, frame)
    pairs = _pair_weights(frame, beta, cfg.neighborhood_radius)
    index, weight = _neighbour_table(frame, beta, cfg.neighborhood_radius)
    weight_sum = weight.sum(axis=1)

    if init is not None:
        if init.q.shape != u.shape:
            raise DimensionMismatchError(f"init marginals {init.q.shape} do not match unaries {u.shape}")
        q0 = np.array(init.q)
    else:
        q0 = _softmax_neg(u)

    n = h * w
    q = np.zeros((n + 1, c), dtype=np.float64)
    q[:n] = q0.reshape(n, c)
    u_flat = u.reshape(n, c)
    lam2, damping = cfg.lambda2, cfg.damping

    phases = _update_phases(h, w, cfg.neighborhood_radius) if cfg.update_order == "checkerboard" else None

    trace = [_free_energy(q[:n].reshape(h, w, c), u, pairs, lam2, h, w)]
    for sweep in range(cfg.mf_iterations):
        if phases is None:
            max_change = _raster_sweep(q, u_flat, index, weight, weight_sum, lam2, damping)
        else:
            max_change = _phase_sweep(q, u_flat, index, weight, weight_sum, lam2, damping, phases)
        energy = _free_energy(q[:n].reshape(h, w, c), u, pairs, lam2, h, w)
        if damping == 0.0 and energy > trace[-1] + 1e-9 * max(1.0, abs(trace[-1])):
            raise InferenceError(f"free energy increased at sweep {sweep}: {trace[-1]} -> {energy}")
        trace.append(energy)
        logger.debug("mean-field sweep %d: free energy %.6f, max change %.2e", sweep, energy, max_change)
        if max_change < cfg.mf_tolerance:
            break

    marginals = MarginalField(q[:n].reshape(h, w, c))
    labels = marginals.argmax()
    start = LabelMap(np.argmax(q0, axis=2).astype(np.uint8), c)
    if total_energy(labels, motion, appearance, frame, cfg) > total_energy(start, motion, appearance, frame, cfg):
        logger.debug("decoded labeling is worse than the initialization; keeping the initialization")
        labels = start
    return labels, marginals, trace


# -----------------------------
# PROPAGATION
# -----------------------------
def propagate_sequence(
    gt_frame: Frame,
    gt_labels: LabelMap,
    frames: Sequence[Frame],
    flows: Sequence[FlowField],
    cfg: CrfConfig,
    cue_cfg: Optional[CueConfig] = None,
    seq_id: Optional[str] = None,
    seed: int = 0,
    appearance: Optional[ClassAppearanceModel] = None,
) -> PropagationResult:
    """Propagate the GT labeling through ``frames[0..depth-1]`` (frames 1..depth).

    ``flows[k]`` maps frame k to k+1, frame 0 being ``gt_frame``. The appearance
    model is fitted once on the GT pair unless a saved ``appearance`` is passed;
    every inferred labeling becomes the reference for the next step.
    """
    cue_cfg = cue_cfg or CueConfig()
    if len(frames) < cfg.depth or len(flows) < cfg.depth:
        raise PropagationError(
            f"need {cfg.depth} frames and flows, got {len(frames)} frames and {len(flows)} flows",
            seq_id=seq_id,
        )
    if appearance is not None:
        if appearance.num_classes != gt_labels.num_classes:
            raise PropagationError(
                f"saved appearance model has {appearance.num_classes} classes, labels have {gt_labels.num_classes}",
                frame_index=0,
                seq_id=seq_id,
            )
        model = appearance
    else:
        try:
            model = fit_appearance(gt_frame, gt_labels, cue_cfg.gmm_components, seed, cue_cfg)
        except LabelPropError as e:
            raise PropagationError(e.detail, frame_index=0, seq_id=seq_id) from e

    results = []
    reference, prev_frame = gt_labels, gt_frame
    for t in range(cfg.depth):
        next_frame = frames[t]
        try:
            motion = motion_unary(reference, prev_frame, next_frame, flows[t], cue_cfg, cfg.alpha)
            appearance = appearance_unary(model, next_frame, gt_labels.num_classes)
            labels, marginals, trace = mean_field_infer(motion, appearance, next_frame, cfg)
        except LabelPropError as e:
            raise PropagationError(e.detail, frame_index=t + 1, seq_id=seq_id) from e
        changed = int(np.count_nonzero(labels.labels != reference.labels))
        results.append(
            FrameResult(
                offset=t + 1,
                labels=labels,
                marginals=marginals,
                free_energy=trace[-1],
                iterations=len(trace) - 1,
                changed_pixels=changed,
            )
        )
        logger.info(
            "%s offset %d: %d sweeps, free energy %.3f, %d pixels changed",
            seq_id or "sequence", t + 1, len(trace) - 1, trace[-1], changed,
        )
        reference, prev_frame = labels, next_frame
    return PropagationResult(tuple(results), seq_id, model)


def copy_propagate(gt_labels: LabelMap, depth: int, seq_id: Optional[str] = None) -> PropagationResult:
    """Naive baseline: the GT labeling reused unchanged for every later frame."""
    c = gt_labels.num_classes
    q = np.full(gt_labels.shape + (c,), 1.0 / c)
    labelled = ~gt_labels.void_mask
    q[labelled] = np.eye(c)[gt_labels.labels[labelled]]
    marginals = MarginalField(q)
    labels = marginals.argmax()
    changed = int(np.count_nonzero(labels.labels != gt_labels.labels))
    frames = tuple(
        FrameResult(offset=t, labels=labels, marginals=marginals, free_energy=0.0, iterations=0,
                    changed_pixels=changed if t == 1 else 0)
        for t in range(1, depth + 1)
    )
    return PropagationResult(frames, seq_id)


# -----------------------------
# OUTPUT
# -----------------------------
def pgt_filename(seq_id: str, offset: int) -> str:
    return f"{seq_id}_p{offset}.png"


def appearance_filename(seq_id: str) -> str:
    return f"{seq_id}_gmm.bin"


def write_marginals(path, marginals: MarginalField) -> None:
    """Layout: magic ``LPQ1``, uint32 H, W, C, then float32 Q row-major."""
    h, w = marginals.shape
    c = marginals.q.shape[2]
    header = MARGINAL_MAGIC + np.array([h, w, c], dtype="<u4").tobytes()
    Path(path).write_bytes(header + marginals.q.astype("<f4").tobytes())


def read_marginals(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MARGINAL_MAGIC:
        raise InferenceError(f"{path}: not a marginal dump")
    h, w, c = (int(v) for v in np.frombuffer(raw, dtype="<u4", count=3, offset=4))
    return np.frombuffer(raw, dtype="<f4", count=h * w * c, offset=16).reshape(h, w, c).copy()


def write_propagation(
    result: PropagationResult, out_dir, seq_id: str, dump_marginals: bool = False
) -> List[PropagationLogRow]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if dump_marginals and result.appearance is not None:
        save_appearance(out_dir / appearance_filename(seq_id), result.appearance)
    rows = []
    for frame in result.frames:
        write_labels(out_dir / pgt_filename(seq_id, frame.offset), frame.labels)
        if dump_marginals:
            write_marginals(out_dir / f"{seq_id}_p{frame.offset}.q", frame.marginals)
        rows.append(
            PropagationLogRow(
                seq=seq_id,
                offset=frame.offset,
                iters=frame.iterations,
                free_energy=frame.free_energy,
                changed_pixels=frame.changed_pixels,
            )
        )
    return rows


def write_run_log(path, rows: Sequence[PropagationLogRow]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RUN_LOG_FIELDS)
        for row in rows:
            writer.writerow([row.seq, row.offset, row.iters, repr(row.free_energy), row.changed_pixels])
