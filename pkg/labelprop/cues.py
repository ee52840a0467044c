# labelprop/cues.py
"""
Evidence functions feeding the propagation energy.

* patch colour histograms and their symmetric KL similarity (motion cue)
* per-class diagonal Gaussian mixtures fitted by EM (appearance cue)

Pixel coordinates are ``(row, col)`` throughout.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from labelprop.core.config import CueConfig
from labelprop.core.exceptions import (
    DimensionMismatchError,
    InferenceError,
    LabelRangeError,
    RasterFormatError,
)
from labelprop.imagery import Frame, LabelMap, require_same_shape

logger = logging.getLogger(__name__)

SMOOTHING = 1e-3
SIDECAR_MAGIC = b"LPGMM001"
WEIGHT_TOLERANCE = 1e-6
_LOG_2PI = np.log(2.0 * np.pi)


# -----------------------------
# PATCH HISTOGRAMS
# -----------------------------
@dataclass(frozen=True, eq=False)
class PatchHistogram:
    """Per-channel marginal histograms; every channel sums to ``total_weight``."""

    bins_per_channel: int
    counts: np.ndarray
    total_weight: float

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.float64)
        if counts.shape != (3, self.bins_per_channel):
            raise ValueError(f"counts must be (3, {self.bins_per_channel}), got {counts.shape}")
        if (counts < 0).any():
            raise ValueError("histogram counts must be nonnegative")
        if not np.allclose(counts.sum(axis=1), self.total_weight, rtol=1e-9, atol=0.0):
            raise ValueError("every channel must sum to total_weight")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    def probabilities(self) -> np.ndarray:
        return self.counts / self.total_weight


def _bin_index(values: np.ndarray, bins: int) -> np.ndarray:
    return (values.astype(np.int64) * bins) >> 8


def _smooth(tally: np.ndarray, n, bins: int) -> np.ndarray:
    return (tally / n + SMOOTHING) / (1.0 + bins * SMOOTHING)


def patch_tally(frame: Frame, center: Tuple[int, int], radius: int, bins: int) -> np.ndarray:
    """Raw per-channel bin counts of the window clipped to the image."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if radius < 0:
        raise ValueError("radius must be >= 0")
    row, col = center
    if not (0 <= row < frame.height and 0 <= col < frame.width):
        raise RasterFormatError(f"patch center {center} outside {frame.height}x{frame.width} image")
    window = frame.data[
        max(0, row - radius) : min(frame.height, row + radius + 1),
        max(0, col - radius) : min(frame.width, col + radius + 1),
    ].reshape(-1, 3)
    idx = _bin_index(window, bins)
    return np.stack([np.bincount(idx[:, ch], minlength=bins) for ch in range(3)])


def patch_histogram(frame: Frame, center: Tuple[int, int], radius: int, bins: int) -> PatchHistogram:
    tally = patch_tally(frame, center, radius, bins)
    n = float(tally[0].sum())
    return PatchHistogram(bins, _smooth(tally.astype(np.float64), n, bins) * n, n)


def histogram_field(frame: Frame, radius: int, bins: int) -> np.ndarray:
    """Smoothed patch histograms for every pixel, shape ``(H, W, 3, bins)``.

    Window sums come from summed-area tables, so each entry equals the
    normalized ``patch_histogram`` at that pixel.
    """
    h, w = frame.shape
    onehot = np.zeros((h, w, 3, bins), dtype=np.float64)
    idx = _bin_index(frame.data, bins)
    rows, cols = np.indices((h, w))
    for ch in range(3):
        onehot[rows, cols, ch, idx[..., ch]] = 1.0

    sat = np.zeros((h + 1, w + 1, 3, bins), dtype=np.float64)
    sat[1:, 1:] = onehot.cumsum(axis=0).cumsum(axis=1)

    y0 = np.clip(np.arange(h) - radius, 0, h)
    y1 = np.clip(np.arange(h) + radius + 1, 0, h)
    x0 = np.clip(np.arange(w) - radius, 0, w)
    x1 = np.clip(np.arange(w) + radius + 1, 0, w)
    tally = (
        sat[y1][:, x1] - sat[y0][:, x1] - sat[y1][:, x0] + sat[y0][:, x0]
    )
    n = ((y1 - y0)[:, None] * (x1 - x0)[None, :]).astype(np.float64)
    return _smooth(tally, n[:, :, None, None], bins)


def sym_kl(a: PatchHistogram, b: PatchHistogram) -> float:
    """Half the sum of both KL directions, summed over the three channels."""
    if a.bins_per_channel != b.bins_per_channel:
        raise DimensionMismatchError(
            f"histogram bin counts differ: {a.bins_per_channel} vs {b.bins_per_channel}"
        )
    p, q = a.probabilities(), b.probabilities()
    if (p <= 0).any() or (q <= 0).any():
        raise ValueError("sym_kl needs strictly positive (smoothed) histograms")
    return float(0.5 * np.sum((p - q) * (np.log(p) - np.log(q))))


def sym_kl_field(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Vectorized ``sym_kl`` over leading axes of ``(..., 3, bins)`` probability arrays."""
    return 0.5 * np.sum((p - q) * (np.log(p) - np.log(q)), axis=(-2, -1))


def motion_weight(a: PatchHistogram, b: PatchHistogram, alpha: float = 1.0) -> float:
    return float(np.exp(-alpha * sym_kl(a, b)))


# -----------------------------
# APPEARANCE MODEL (GMM)
# -----------------------------
@dataclass(frozen=True, eq=False)
class GaussianComponent:
    weight: float
    mean: np.ndarray
    variance: np.ndarray  # diagonal of the covariance

    @property
    def covariance(self) -> np.ndarray:
        return np.diag(self.variance)


Mixture = Tuple[GaussianComponent, ...]


@dataclass(frozen=True, eq=False)
class ClassAppearanceModel:
    mixtures: Tuple[Optional[Mixture], ...]
    u_max: float = 50.0

    def __post_init__(self):
        for cls, mixture in enumerate(self.mixtures):
            if mixture is None:
                continue
            if not mixture:
                raise ValueError(f"class {cls} has an empty mixture; use None for an absent class")
            weights = np.array([c.weight for c in mixture], dtype=np.float64)
            if (weights < 0).any() or abs(weights.sum() - 1.0) > WEIGHT_TOLERANCE:
                raise ValueError(f"class {cls} component weights sum to {weights.sum():.9f}, expected 1")

    @property
    def num_classes(self) -> int:
        return len(self.mixtures)

    @property
    def classes_present(self) -> frozenset:
        return frozenset(c for c, m in enumerate(self.mixtures) if m is not None)

    def is_absent(self, cls: int) -> bool:
        return self.mixtures[cls] is None


def _log_density(x: np.ndarray, weights: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """``log w_k + log N(x; mu_k, diag var_k)`` for ``x`` of shape (N, 3) -> (N, K)."""
    diff = x[:, None, :] - means[None, :, :]
    quad = np.sum(diff * diff / variances[None, :, :], axis=2)
    log_norm = -0.5 * (np.sum(np.log(variances), axis=1) + 3 * _LOG_2PI)
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    return log_w[None, :] + log_norm[None, :] - 0.5 * quad


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        nxt = x[rng.choice(len(x), p=d2 / d2.sum())]
        centers.append(nxt)
        d2 = np.minimum(d2, np.sum((x - nxt) ** 2, axis=1))
    return np.array(centers, dtype=np.float64)


def _fit_mixture(x: np.ndarray, k: int, rng: np.random.Generator, cfg: CueConfig) -> Mixture:
    distinct = len(np.unique(x, axis=0))
    k = min(k, distinct)
    n = len(x)

    means = _kmeans_pp(x, k, rng)
    variances = np.tile(np.maximum(x.var(axis=0), cfg.variance_floor), (k, 1))
    weights = np.full(k, 1.0 / k)

    log_p = _log_density(x, weights, means, variances)
    ll = float(logsumexp(log_p, axis=1).mean())
    for iteration in range(cfg.em_max_iter):
        resp = np.exp(log_p - logsumexp(log_p, axis=1, keepdims=True))
        nk = resp.sum(axis=0)
        live = nk > 0
        weights = nk / n
        new_means = resp.T @ x
        new_means[live] /= nk[live, None]
        means = np.where(live[:, None], new_means, means)
        sq = np.zeros_like(variances)
        for j in np.flatnonzero(live):
            diff = x - means[j]
            sq[j] = resp[:, j] @ (diff * diff) / nk[j]
        variances = np.where(live[:, None], np.maximum(sq, cfg.variance_floor), variances)

        log_p = _log_density(x, weights, means, variances)
        new_ll = float(logsumexp(log_p, axis=1).mean())
        if new_ll < ll - 1e-9 * max(1.0, abs(ll)):
            raise InferenceError(f"EM log-likelihood decreased at iteration {iteration}: {ll} -> {new_ll}")
        gain, ll = new_ll - ll, new_ll
        if gain < cfg.em_tol:
            break

    keep = weights > 0
    weights = weights[keep] / weights[keep].sum()
    return tuple(
        GaussianComponent(float(w), m.copy(), v.copy())
        for w, m, v in zip(weights, means[keep], variances[keep])
    )


def fit_appearance(
    frame: Frame,
    labels: LabelMap,
    components_per_class: int,
    seed: int,
    cfg: Optional[CueConfig] = None,
) -> ClassAppearanceModel:
    """Fit one colour mixture per class present in the labelled frame."""
    cfg = cfg or CueConfig()
    if components_per_class < 1:
        raise ValueError("components_per_class must be >= 1")
    require_same_shape(frame, labels, what="frame and labels")
    colors = frame.normalized().reshape(-1, 3)
    flat = labels.labels.ravel()
    rng = np.random.default_rng(seed)
    threshold = max(components_per_class, cfg.min_class_pixels)

    mixtures: List[Optional[Mixture]] = []
    for cls in range(labels.num_classes):
        x = colors[flat == cls]
        if len(x) < threshold:
            logger.debug("class %d has %d pixels (< %d), marked absent", cls, len(x), threshold)
            mixtures.append(None)
            continue
        mixtures.append(_fit_mixture(x, components_per_class, rng, cfg))
    return ClassAppearanceModel(tuple(mixtures), cfg.u_max)


def _mixture_arrays(mixture: Mixture):
    weights = np.array([c.weight for c in mixture])
    means = np.array([c.mean for c in mixture])
    variances = np.array([c.variance for c in mixture])
    return weights, means, variances


def neg_log_likelihood_field(model: ClassAppearanceModel, colors: np.ndarray) -> np.ndarray:
    """``-log P(color | class)`` clamped to ``[0, u_max]``; colors (N, 3) -> (N, C)."""
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    out = np.full((len(colors), model.num_classes), model.u_max, dtype=np.float64)
    for cls, mixture in enumerate(model.mixtures):
        if mixture is None:
            continue
        nll = -logsumexp(_log_density(colors, *_mixture_arrays(mixture)), axis=1)
        out[:, cls] = np.clip(nll, 0.0, model.u_max)
    return out


def neg_log_likelihood(model: ClassAppearanceModel, cls: int, color: Sequence[float]) -> float:
    if not 0 <= cls < model.num_classes:
        raise LabelRangeError(f"class index {cls} out of range for {model.num_classes} classes")
    return float(neg_log_likelihood_field(model, np.asarray(color)[None, :])[0, cls])


# -----------------------------
# SIDECAR FILE
# -----------------------------
def save_appearance(path, model: ClassAppearanceModel) -> None:
    """Layout: magic, uint32 C, uint32 K, then per class uint32 n and n rows of
    (weight, mean[3], variance[3]) as little-endian float64. n = 0 marks an absent class."""
    k = max((len(m) for m in model.mixtures if m is not None), default=0)
    parts = [SIDECAR_MAGIC, np.array([model.num_classes, k], dtype="<u4").tobytes()]
    for mixture in model.mixtures:
        if mixture is None:
            parts.append(np.array([0], dtype="<u4").tobytes())
            continue
        parts.append(np.array([len(mixture)], dtype="<u4").tobytes())
        rows = np.array([[c.weight, *c.mean, *c.variance] for c in mixture], dtype="<f8")
        parts.append(rows.tobytes())
    parts.append(np.array([model.u_max], dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_appearance(path) -> ClassAppearanceModel:
    path = Path(path)
    if not path.is_file():
        raise RasterFormatError(f"appearance sidecar not found: {path}")
    raw = path.read_bytes()
    if raw[: len(SIDECAR_MAGIC)] != SIDECAR_MAGIC:
        raise RasterFormatError(f"{path}: not an appearance sidecar")
    pos = len(SIDECAR_MAGIC)

    def take(dtype: str, count: int) -> np.ndarray:
        nonlocal pos
        size = np.dtype(dtype).itemsize * count
        if pos + size > len(raw):
            raise RasterFormatError(f"{path}: truncated sidecar ({len(raw)} bytes, needed {pos + size})")
        values = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
        pos += size
        return values

    num_classes, _ = (int(v) for v in take("<u4", 2))
    mixtures: List[Optional[Mixture]] = []
    for _ in range(num_classes):
        n = int(take("<u4", 1)[0])
        if n == 0:
            mixtures.append(None)
            continue
        rows = take("<f8", 7 * n).reshape(n, 7)
        mixtures.append(tuple(GaussianComponent(float(r[0]), r[1:4].copy(), r[4:7].copy()) for r in rows))
    u_max = float(take("<f8", 1)[0])
    if pos != len(raw):
        raise RasterFormatError(f"{path}: {len(raw) - pos} trailing bytes")
    try:
        return ClassAppearanceModel(tuple(mixtures), u_max)
    except ValueError as e:
        raise RasterFormatError(f"{path}: {e}")
