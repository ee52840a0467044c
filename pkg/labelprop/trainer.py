# labelprop/trainer.py
"""
A small per-pixel segmentation network with exact backpropagation, trained
one sample at a time by SGD with momentum, weight decay and trust-factor
scaling of pseudo-labelled samples:

    GT:   g = grad + decay * theta
    PGT:  g = t_f * (grad + decay * theta)
    v' = momentum * v - lr * g;  theta' = theta + v'
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import logsumexp

from labelprop.core.config import TrainConfig
from labelprop.core.exceptions import (
    DimensionMismatchError,
    EmptyEvaluationError,
    LabelRangeError,
    ManifestError,
    RuntimeFailure,
    TrainingDivergedError,
)
from labelprop.imagery import Frame, LabelMap, load_image, load_labels, require_same_shape
from labelprop.metrics import ConfusionMatrix, accumulate, mean_iou
from labelprop.schemas import ManifestEntry, Tier, TrainLogRow

logger = logging.getLogger(__name__)

SNAPSHOT_MAGIC = "labelprop-snapshot v1"
LAYERS = ("conv1", "conv2", "conv3")
F4_MAX = float(np.finfo(np.float32).max)

Params = Dict[str, np.ndarray]


# -----------------------------
# MODEL
# -----------------------------
def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(H, W, Cin) -> (H*W, k*k*Cin) with zero padding that keeps H and W."""
    p = k // 2
    padded = np.pad(x, ((p, p), (p, p), (0, 0)))
    windows = sliding_window_view(padded, (k, k), axis=(0, 1))  # (H, W, Cin, k, k)
    h, w = x.shape[:2]
    return windows.transpose(0, 1, 3, 4, 2).reshape(h * w, -1)


def _col2im(cols: np.ndarray, shape: Tuple[int, int, int], k: int) -> np.ndarray:
    h, w, cin = shape
    p = k // 2
    cols = cols.reshape(h, w, k, k, cin)
    padded = np.zeros((h + 2 * p, w + 2 * p, cin))
    for i in range(k):
        for j in range(k):
            padded[i:i + h, j:j + w] += cols[:, :, i, j, :]
    return padded[p:p + h, p:p + w]


class TinySegModel:
    """conv(k) -> ReLU -> conv(k) -> ReLU -> conv(1x1), all float64."""

    def __init__(self, params: Params, kernel: int):
        self.params = {name: np.array(value, dtype=np.float64) for name, value in params.items()}
        self.kernel = kernel
        for name in LAYERS:
            if f"{name}.weight" not in self.params or f"{name}.bias" not in self.params:
                raise DimensionMismatchError(f"model is missing parameters for {name}")

    @classmethod
    def initialize(cls, num_classes: int, cfg: TrainConfig) -> "TinySegModel":
        """Seeded uniform fan-in initialization, zero biases."""
        rng = np.random.default_rng(cfg.init_seed)
        k = cfg.kernel
        shapes = {
            "conv1": (k, k, 3, cfg.hidden1),
            "conv2": (k, k, cfg.hidden1, cfg.hidden2),
            "conv3": (1, 1, cfg.hidden2, num_classes),
        }
        params = {}
        for name, shape in shapes.items():
            fan_in = shape[0] * shape[1] * shape[2]
            limit = np.sqrt(6.0 / fan_in)
            params[f"{name}.weight"] = rng.uniform(-limit, limit, size=shape)
            params[f"{name}.bias"] = np.zeros(shape[3])
        return cls(params, k)

    @property
    def num_classes(self) -> int:
        return self.params["conv3.weight"].shape[3]

    @property
    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def shapes(self) -> Dict[str, List[int]]:
        return {name: list(value.shape) for name, value in self.params.items()}

    def with_params(self, params: Params) -> "TinySegModel":
        return TinySegModel(params, self.kernel)

    def _conv(self, name: str, x: np.ndarray):
        weight = self.params[f"{name}.weight"]
        k = weight.shape[0]
        cols = _im2col(x, k)
        out = cols @ weight.reshape(-1, weight.shape[3]) + self.params[f"{name}.bias"]
        return out.reshape(x.shape[0], x.shape[1], -1), cols

    def run(self, x: np.ndarray):
        """Scores plus the cache ``backward`` needs."""
        a1, cols1 = self._conv("conv1", x)
        h1 = np.maximum(a1, 0.0)
        a2, cols2 = self._conv("conv2", h1)
        h2 = np.maximum(a2, 0.0)
        scores, cols3 = self._conv("conv3", h2)
        cache = {"x": x, "a1": a1, "h1": h1, "a2": a2, "h2": h2, "cols": (cols1, cols2, cols3)}
        return scores, cache

    def backward(self, cache, dscores: np.ndarray) -> Params:
        grads = {}
        inputs = (cache["x"], cache["h1"], cache["h2"])
        pre = (cache["a1"], cache["a2"])
        upstream = dscores
        for i in reversed(range(len(LAYERS))):
            name = LAYERS[i]
            weight = self.params[f"{name}.weight"]
            cols = cache["cols"][i]
            dout = upstream.reshape(-1, weight.shape[3])
            grads[f"{name}.weight"] = (cols.T @ dout).reshape(weight.shape)
            grads[f"{name}.bias"] = dout.sum(axis=0)
            if i == 0:
                break
            dcols = dout @ weight.reshape(-1, weight.shape[3]).T
            dinput = _col2im(dcols, inputs[i].shape, weight.shape[0])
            upstream = dinput * (pre[i - 1] > 0)
        return grads


def _as_input(frame: Frame) -> np.ndarray:
    return frame.normalized() - 0.5


def forward(model: TinySegModel, frame: Frame) -> np.ndarray:
    scores, _ = model.run(_as_input(frame))
    if not np.isfinite(scores).all():
        raise FloatingPointError("non-finite activations in forward pass")
    return scores


def predict(model: TinySegModel, frame: Frame) -> LabelMap:
    # argmax keeps the lowest class index on ties
    return LabelMap(np.argmax(forward(model, frame), axis=2).astype(np.uint8), model.num_classes)


# -----------------------------
# SAMPLES AND LOSS
# -----------------------------
@dataclass(frozen=True)
class TrainSample:
    frame: Frame
    labels: LabelMap
    tier: Tier = Tier.GT
    trust: float = 1.0

    def __post_init__(self):
        require_same_shape(self.frame, self.labels, what="sample frame and labels")
        if not 0.0 <= self.trust <= 1.0:
            raise ValueError(f"trust factor {self.trust} outside [0, 1]")
        if self.tier == Tier.GT and self.trust != 1.0:
            raise ValueError("GT samples always have trust 1")


def load_samples(
    entries: Sequence[ManifestEntry], num_classes: int, trust_factor: Optional[float] = None
) -> List[TrainSample]:
    """Load manifest rows (absolute paths).

    PGT rows take ``trust_factor`` when given, else their own trust column, else 1.
    """
    samples = []
    for entry in entries:
        trust = 1.0
        if entry.tier == Tier.PGT:
            if trust_factor is not None:
                trust = trust_factor
            elif entry.trust is not None:
                trust = entry.trust
        samples.append(
            TrainSample(load_image(entry.image), load_labels(entry.labels, num_classes), entry.tier, trust)
        )
    return samples


def _loss_terms(model: TinySegModel, sample: TrainSample, params: Optional[Params] = None):
    if sample.labels.num_classes != model.num_classes:
        raise DimensionMismatchError(
            f"labels have {sample.labels.num_classes} classes, model predicts {model.num_classes}"
        )
    scored = ~sample.labels.void_mask
    if not scored.any():
        raise LabelRangeError("label map is entirely void")
    net = model if params is None else model.with_params(params)
    scores, cache = net.run(_as_input(sample.frame))
    logits = scores[scored]
    targets = sample.labels.labels[scored].astype(np.int64)
    lse = logsumexp(logits, axis=1)
    loss = float(np.mean(lse - logits[np.arange(len(targets)), targets]))
    return net, scores, cache, scored, logits, targets, lse, loss


def loss_value(model: TinySegModel, sample: TrainSample, params: Optional[Params] = None) -> float:
    return _loss_terms(model, sample, params)[-1]


def loss_and_grad(model: TinySegModel, sample: TrainSample) -> Tuple[float, Params]:
    """Mean softmax cross-entropy over non-void pixels and its exact gradient."""
    net, scores, cache, scored, logits, targets, lse, loss = _loss_terms(model, sample)
    probs = np.exp(logits - lse[:, None])
    probs[np.arange(len(targets)), targets] -= 1.0
    dscores = np.zeros_like(scores)
    dscores[scored] = probs / len(targets)
    return loss, net.backward(cache, dscores)


# -----------------------------
# OPTIMIZER
# -----------------------------
@dataclass
class OptimState:
    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: Params = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "OptimState":
        return cls(cfg.learning_rate, cfg.momentum, cfg.weight_decay)


def sgd_step(state: OptimState, params: Params, grads: Params, tier: Tier, trust: float = 1.0) -> Tuple[OptimState, Params]:
    """One trust-scaled momentum step; returns the new state and parameters."""
    updated, velocity = {}, {}
    for name, theta in params.items():
        grad = grads[name]
        if grad.shape != theta.shape:
            raise DimensionMismatchError(f"gradient for {name} has shape {grad.shape}, expected {theta.shape}")
        if not np.isfinite(grad).all():
            raise FloatingPointError(f"non-finite gradient for {name}")
        g = grad + state.weight_decay * theta
        if tier == Tier.PGT:
            g = trust * g
        v = state.momentum * state.velocity.get(name, np.zeros_like(theta)) - state.learning_rate * g
        theta = theta + v
        if not np.isfinite(theta).all():
            raise FloatingPointError(f"non-finite parameters for {name} after the update")
        velocity[name] = v
        updated[name] = theta
    new_state = OptimState(state.learning_rate, state.momentum, state.weight_decay, velocity, state.step + 1)
    return new_state, updated


# -----------------------------
# TRAINING AND EVALUATION
# -----------------------------
def applied_trust(samples: Sequence[TrainSample]) -> float:
    """Mean trust carried by the PGT samples; 1 when the set holds only GT."""
    trusts = [s.trust for s in samples if s.tier == Tier.PGT]
    return float(np.mean(trusts)) if trusts else 1.0


def evaluate(model: TinySegModel, samples: Sequence[TrainSample]) -> ConfusionMatrix:
    if not samples:
        raise EmptyEvaluationError("empty evaluation: no samples to score")
    conf = ConfusionMatrix.empty(model.num_classes)
    for sample in samples:
        conf = accumulate(conf, predict(model, sample.frame), sample.labels)
    return conf


def train(
    model: TinySegModel,
    samples: Sequence[TrainSample],
    cfg: TrainConfig,
    val_samples: Sequence[TrainSample] = (),
    snapshot_dir=None,
) -> Tuple[TinySegModel, List[TrainLogRow]]:
    if not samples:
        raise ManifestError("training set is empty")
    rng = np.random.default_rng(cfg.shuffle_seed)
    state = OptimState.from_config(cfg)
    params = {name: value.copy() for name, value in model.params.items()}
    current = model
    log: List[TrainLogRow] = []
    applied = applied_trust(samples)

    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for index in rng.permutation(len(samples)):
            sample = samples[index]
            try:
                loss, grads = loss_and_grad(current, sample)
                if not np.isfinite(loss):
                    raise FloatingPointError(f"loss is {loss}")
                state, params = sgd_step(state, params, grads, sample.tier, sample.trust)
            except FloatingPointError as e:
                raise TrainingDivergedError(str(e), epoch, int(index)) from e
            current = model.with_params(params)
            losses.append(loss)

        val_miou = None
        if val_samples:
            try:
                val_miou = mean_iou(evaluate(current, val_samples))
            except FloatingPointError as e:
                raise TrainingDivergedError(str(e), epoch, -1) from e
        row = TrainLogRow(
            epoch=epoch,
            step=state.step,
            train_loss=float(np.mean(losses)),
            val_miou=val_miou,
            tf=applied,
        )
        log.append(row)
        logger.info(
            "epoch %d: step %d, loss %.4f, val mIoU %s",
            epoch, state.step, row.train_loss, "n/a" if val_miou is None else f"{val_miou:.4f}",
        )
        if snapshot_dir is not None and cfg.snapshot_every and epoch % cfg.snapshot_every == 0:
            save_snapshot(Path(snapshot_dir) / f"model_epoch{epoch:03d}.snap", current)
    return current, log


def grad_check(
    model: TinySegModel,
    sample: TrainSample,
    num_coords: int = 200,
    seed: int = 0,
    eps: float = 1e-4,
    analytic: Optional[Params] = None,
) -> float:
    """Max relative error between analytic and central-difference derivatives.

    Coordinates cycle over the parameter tensors so every layer is covered.
    Coordinates whose perturbation flips a rectifier are replaced by new draws.
    """
    if num_coords < 1:
        raise ValueError("num_coords must be >= 1")
    if analytic is None:
        _, analytic = loss_and_grad(model, sample)
    rng = np.random.default_rng(seed)
    names = list(model.params)
    x = _as_input(sample.frame)
    _, base = model.run(x)
    base_signs = (base["a1"] > 0, base["a2"] > 0)

    worst, checked, attempts = 0.0, 0, 0
    while checked < num_coords and attempts < 50 * num_coords:
        name = names[attempts % len(names)]
        attempts += 1
        flat = int(rng.integers(model.params[name].size))
        values = []
        kink = False
        for delta in (eps, -eps):
            params = {n: v.copy() for n, v in model.params.items()}
            params[name].flat[flat] += delta
            shifted = model.with_params(params)
            _, cache = shifted.run(x)
            signs = (cache["a1"] > 0, cache["a2"] > 0)
            if not all(np.array_equal(s, b) for s, b in zip(signs, base_signs)):
                kink = True
                break
            values.append(loss_value(model, sample, params))
        if kink:
            continue
        numeric = (values[0] - values[1]) / (2 * eps)
        exact = float(analytic[name].flat[flat])
        err = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-6)
        worst = max(worst, err)
        checked += 1
    logger.debug("grad check: %d coordinates, max relative error %.3e", checked, worst)
    return worst


# -----------------------------
# SNAPSHOTS
# -----------------------------
def save_snapshot(path, model: TinySegModel) -> None:
    """Text header line, then every tensor as little-endian float32 in header order."""
    bad = [name for name, value in model.params.items() if not np.isfinite(value).all()]
    if bad:
        raise RuntimeFailure(f"refusing to snapshot non-finite parameters: {bad}")
    overflow = [name for name, value in model.params.items() if np.abs(value).max(initial=0.0) > F4_MAX]
    if overflow:
        raise RuntimeFailure(f"parameters exceed the float32 snapshot range: {overflow}")
    header = {"kernel": model.kernel, "order": list(model.params), "shapes": model.shapes()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(f"{SNAPSHOT_MAGIC} {json.dumps(header, sort_keys=True)}\n".encode("utf-8"))
        for name in header["order"]:
            fh.write(model.params[name].astype("<f4").tobytes())


def load_snapshot(path) -> TinySegModel:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"snapshot not found: {path}")
    raw = path.read_bytes()
    line, _, payload = raw.partition(b"\n")
    text = line.decode("utf-8", errors="replace")
    if not text.startswith(SNAPSHOT_MAGIC + " "):
        raise ManifestError(f"{path}: not a model snapshot")
    try:
        header = json.loads(text[len(SNAPSHOT_MAGIC) + 1:])
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: corrupt snapshot header ({e})")
    params, offset = {}, 0
    for name in header["order"]:
        shape = tuple(header["shapes"][name])
        count = int(np.prod(shape))
        if offset + 4 * count > len(payload):
            raise ManifestError(f"{path}: truncated snapshot at {name}")
        params[name] = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 4 * count
    if offset != len(payload):
        raise ManifestError(f"{path}: {len(payload) - offset} trailing bytes")
    return TinySegModel(params, int(header["kernel"]))
