# labelprop/imagery.py
"""
Raster types and file I/O for frames, label maps, flow fields, ratings and
dataset manifests.

All raster types are immutable: their arrays are copied on construction and
flagged read-only, so they can be shared freely between threads.
"""

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError
from pydantic import ValidationError

from labelprop.core.exceptions import (
    DimensionMismatchError,
    FlowFormatError,
    LabelRangeError,
    ManifestError,
    RasterFormatError,
)
from labelprop.schemas import ManifestEntry, RatingRow, Tier

logger = logging.getLogger(__name__)

VOID = 255
FLO_MAGIC = np.float32(202021.25)
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
MANIFEST_FIELDS = ["image", "labels", "tier", "seq", "offset", "rating"]
RATING_FIELDS = ["id", "rating"]


def _frozen(array: np.ndarray, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


# -----------------------------
# RASTER TYPES
# -----------------------------
@dataclass(frozen=True, eq=False)
class Frame:
    """An 8-bit RGB image, row-major ``(height, width, 3)``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[2] != 3:
            raise RasterFormatError(f"frame data must be (H, W, 3), got {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise RasterFormatError("frame dimensions must be at least 1x1")
        if data.dtype != np.uint8:
            raise RasterFormatError(f"frame data must be 8-bit, got {data.dtype}")
        object.__setattr__(self, "data", _frozen(data, np.uint8))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape[:2]

    def normalized(self) -> np.ndarray:
        """Channels scaled to [0, 1] as float64."""
        return self.data.astype(np.float64) / 255.0


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-pixel class indices in ``0..num_classes-1`` or ``VOID``."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or labels.shape[0] < 1 or labels.shape[1] < 1:
            raise RasterFormatError(f"label map must be a non-empty 2-D raster, got {labels.shape}")
        if not 1 <= self.num_classes < VOID:
            raise LabelRangeError(f"num_classes must be in 1..{VOID - 1}, got {self.num_classes}")
        if labels.dtype != np.uint8:
            if labels.min() < 0 or labels.max() > VOID:
                raise LabelRangeError("label values must fit in 8 bits")
        labels = _frozen(labels, np.uint8)
        bad = (labels != VOID) & (labels >= self.num_classes)
        if bad.any():
            value = int(labels[bad][0])
            raise LabelRangeError(f"class index {value} out of range for {self.num_classes} classes")
        object.__setattr__(self, "labels", labels)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.labels.shape

    @property
    def void_mask(self) -> np.ndarray:
        return self.labels == VOID

    def classes_present(self) -> List[int]:
        values = np.unique(self.labels)
        return [int(v) for v in values if v != VOID]


@dataclass(frozen=True, eq=False)
class FlowField:
    """Forward motion ``(u, v)`` per pixel of frame t, in pixels, pointing to t+1."""

    vectors: np.ndarray

    def __post_init__(self):
        vectors = np.asarray(self.vectors)
        if vectors.ndim != 3 or vectors.shape[2] != 2:
            raise FlowFormatError(f"flow vectors must be (H, W, 2), got {vectors.shape}")
        if vectors.shape[0] < 1 or vectors.shape[1] < 1:
            raise FlowFormatError("flow dimensions must be at least 1x1")
        if not np.isfinite(vectors).all():
            raise FlowFormatError("flow contains NaN or Inf values")
        object.__setattr__(self, "vectors", _frozen(vectors, np.float32))

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width, 2), dtype=np.float32))

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.vectors.shape[:2]


def require_same_shape(*rasters, what: str = "rasters") -> None:
    shapes = {tuple(r.shape) for r in rasters}
    if len(shapes) > 1:
        raise DimensionMismatchError(f"{what} differ in dimensions: {sorted(shapes)}")


# -----------------------------
# PALETTES
# -----------------------------
@dataclass(frozen=True)
class Palette:
    entries: Tuple[Tuple[str, Tuple[int, int, int]], ...]

    def __post_init__(self):
        names = [name for name, _ in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("palette class names must be unique")

    @property
    def num_classes(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> List[str]:
        return [name for name, _ in self.entries]

    @property
    def colors(self) -> List[Tuple[int, int, int]]:
        return [rgb for _, rgb in self.entries]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def colorize(self, labels: LabelMap) -> Frame:
        lut = np.zeros((256, 3), dtype=np.uint8)
        for idx, (_, rgb) in enumerate(self.entries):
            lut[idx] = rgb
        return Frame(lut[labels.labels])


CAMVID = Palette(
    (
        ("Building", (128, 0, 0)),
        ("Tree", (128, 128, 0)),
        ("Sky", (128, 128, 128)),
        ("Car", (64, 0, 128)),
        ("Sign", (192, 128, 128)),
        ("Road", (128, 64, 128)),
        ("Pedestrian", (64, 64, 0)),
        ("Fence", (64, 64, 128)),
        ("Pole", (192, 192, 128)),
        ("Sidewalk", (0, 0, 192)),
        ("Bicycle", (0, 128, 192)),
    )
)

SYNTHETIC = Palette(
    (
        ("Sky", (110, 160, 220)),
        ("Road", (90, 90, 90)),
        ("Car", (200, 40, 40)),
        ("Pedestrian", (240, 200, 40)),
        ("Sign", (40, 180, 80)),
    )
)

PALETTES: Dict[str, Palette] = {"camvid": CAMVID, "synthetic": SYNTHETIC}


def get_palette(name: str) -> Palette:
    try:
        return PALETTES[name]
    except KeyError:
        raise ManifestError(f"unknown palette '{name}'; expected one of {sorted(PALETTES)}")


# -----------------------------
# IMAGES AND LABELS
# -----------------------------
def _png_bit_depth(path: Path) -> Optional[int]:
    """Bits per sample from the IHDR chunk; Pillow narrows 16-bit RGB to 8 bits silently."""
    with path.open("rb") as fh:
        head = fh.read(25)
    if len(head) < 25 or head[:8] != PNG_SIGNATURE or head[12:16] != b"IHDR":
        return None
    return head[24]


def _require_8bit(path: Path) -> None:
    depth = _png_bit_depth(path)
    if depth is not None and depth != 8:
        raise RasterFormatError(f"{path}: unsupported bit depth {depth}, expected 8 bits per channel")


def load_image(path) -> Frame:
    path = Path(path)
    if not path.is_file():
        raise RasterFormatError(f"image not found: {path}")
    _require_8bit(path)
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode == "RGB":
                data = np.asarray(img)
            elif img.mode == "RGBA":
                data = np.asarray(img)[..., :3]
            else:
                raise RasterFormatError(f"{path}: unsupported mode/bit depth '{img.mode}', expected 8-bit RGB")
    except (UnidentifiedImageError, OSError) as e:
        raise RasterFormatError(f"{path}: corrupt image stream ({e})")
    return Frame(data)


def write_image(path, frame: Frame) -> None:
    Image.fromarray(np.ascontiguousarray(frame.data)).save(Path(path), format="PNG")


def load_labels(path, num_classes: int) -> LabelMap:
    path = Path(path)
    if not path.is_file():
        raise RasterFormatError(f"label raster not found: {path}")
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode not in ("L", "P"):
                raise RasterFormatError(f"{path}: label raster must be 8-bit single channel, got '{img.mode}'")
            data = np.asarray(img)
    except (UnidentifiedImageError, OSError) as e:
        raise RasterFormatError(f"{path}: corrupt label stream ({e})")
    try:
        return LabelMap(data, num_classes)
    except LabelRangeError as e:
        raise LabelRangeError(f"{path}: {e.detail}")


def write_labels(path, labels: LabelMap) -> None:
    Image.fromarray(np.ascontiguousarray(labels.labels)).save(Path(path), format="PNG")


# -----------------------------
# FLOW (.flo)
# -----------------------------
def read_flow(path) -> FlowField:
    path = Path(path)
    if not path.is_file():
        raise FlowFormatError(f"flow file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 12:
        raise FlowFormatError(f"{path}: truncated header")
    magic = np.frombuffer(raw, dtype="<f4", count=1)[0]
    if magic != FLO_MAGIC:
        raise FlowFormatError(f"{path}: bad magic {float(magic)}")
    width, height = (int(v) for v in np.frombuffer(raw, dtype="<i4", count=2, offset=4))
    if width < 1 or height < 1:
        raise FlowFormatError(f"{path}: invalid dimensions {width}x{height}")
    expected = 12 + 8 * width * height
    if len(raw) < expected:
        raise FlowFormatError(f"{path}: truncated payload ({len(raw)} of {expected} bytes)")
    if len(raw) > expected:
        raise FlowFormatError(f"{path}: {len(raw) - expected} unexpected trailing bytes")
    vectors = np.frombuffer(raw, dtype="<f4", count=2 * width * height, offset=12)
    try:
        return FlowField(vectors.reshape(height, width, 2))
    except FlowFormatError as e:
        raise FlowFormatError(f"{path}: {e.detail}")


def write_flow(path, flow: FlowField) -> None:
    header = np.array([FLO_MAGIC], dtype="<f4").tobytes()
    header += np.array([flow.width, flow.height], dtype="<i4").tobytes()
    Path(path).write_bytes(header + flow.vectors.astype("<f4").tobytes())


# -----------------------------
# MANIFESTS
# -----------------------------
@dataclass(frozen=True)
class DatasetManifest:
    entries: Tuple[ManifestEntry, ...] = ()
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.entries)

    def counts(self) -> Tuple[int, int]:
        gt = sum(1 for e in self.entries if e.tier == Tier.GT)
        return gt, len(self.entries) - gt

    def resolve(self, relative: str) -> Path:
        return self.root / relative


def relative_path(target, base_dir) -> str:
    return Path(os.path.relpath(Path(target), Path(base_dir))).as_posix()


def _optional(value: Optional[str], cast):
    if value is None or value.strip() == "":
        return None
    return cast(value)


def load_manifest(path, check_paths: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if header not in (MANIFEST_FIELDS, MANIFEST_FIELDS + ["trust"]):
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_FIELDS)}[,trust], got {header}")
        entries: List[ManifestEntry] = []
        seen = set()
        for line_no, row in enumerate(reader, start=2):
            try:
                entry = ManifestEntry(
                    image=row["image"],
                    labels=row["labels"],
                    tier=row["tier"],
                    seq=row["seq"],
                    offset=int(row["offset"]),
                    rating=_optional(row["rating"], int),
                    trust=_optional(row.get("trust"), float),
                )
            except (ValidationError, ValueError, TypeError) as e:
                raise ManifestError(f"{path}:{line_no}: invalid row ({e})")
            if entry.key in seen:
                raise ManifestError(
                    f"{path}:{line_no}: duplicate key (seq={entry.seq}, offset={entry.offset}, tier={entry.tier.value})"
                )
            seen.add(entry.key)
            entries.append(entry)

    manifest = DatasetManifest(tuple(entries), path.parent)
    if check_paths:
        missing = []
        for entry in entries:
            for rel in (entry.image, entry.labels):
                if not manifest.resolve(rel).exists():
                    missing.append(rel)
        if missing:
            shown = ", ".join(missing[:10])
            more = f" (+{len(missing) - 10} more)" if len(missing) > 10 else ""
            raise ManifestError(f"{path}: {len(missing)} unresolvable paths: {shown}{more}")
    logger.debug("loaded manifest %s: %d GT, %d PGT", path, *manifest.counts())
    return manifest


def write_manifest(path, entries: Iterable[ManifestEntry], with_trust: bool = False) -> None:
    fields = MANIFEST_FIELDS + (["trust"] if with_trust else [])
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for e in entries:
            row = [e.image, e.labels, e.tier.value, e.seq, e.offset, "" if e.rating is None else e.rating]
            if with_trust:
                row.append("" if e.trust is None else repr(float(e.trust)))
            writer.writerow(row)


# -----------------------------
# RATINGS
# -----------------------------
def load_ratings(path) -> Dict[str, int]:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"ratings file not found: {path}")
    ratings: Dict[str, int] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RATING_FIELDS:
            raise ManifestError(f"{path}: header must be id,rating, got {reader.fieldnames}")
        for line_no, row in enumerate(reader, start=2):
            try:
                record = RatingRow(id=row["id"], rating=int(row["rating"]))
            except (ValidationError, ValueError, TypeError) as e:
                raise ManifestError(f"{path}:{line_no}: invalid rating row ({e})")
            if record.id in ratings:
                raise ManifestError(f"{path}:{line_no}: duplicate rating for {record.id}")
            ratings[record.id] = record.rating
    return ratings


def write_ratings(path, ratings: Sequence[Tuple[str, int]]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RATING_FIELDS)
        for item_id, rating in ratings:
            writer.writerow([item_id, rating])
