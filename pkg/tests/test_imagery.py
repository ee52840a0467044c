import struct
import zlib

import numpy as np
import pytest
from PIL import Image

from labelprop.core.exceptions import FlowFormatError, LabelRangeError, ManifestError, RasterFormatError
from labelprop.imagery import (
    CAMVID,
    FLO_MAGIC,
    SYNTHETIC,
    VOID,
    FlowField,
    Frame,
    LabelMap,
    get_palette,
    load_image,
    load_labels,
    load_manifest,
    load_ratings,
    read_flow,
    write_flow,
    write_image,
    write_labels,
    write_manifest,
    write_ratings,
)
from labelprop.schemas import ManifestEntry, Tier


class TestRasterTypes:
    def test_frame_rejects_grayscale(self):
        with pytest.raises(RasterFormatError):
            Frame(np.zeros((4, 4), dtype=np.uint8))

    def test_frame_rejects_16_bit(self):
        with pytest.raises(RasterFormatError):
            Frame(np.zeros((4, 4, 3), dtype=np.uint16))

    def test_frame_is_read_only(self, random_frame):
        frame = random_frame()
        with pytest.raises(ValueError):
            frame.data[0, 0, 0] = 1

    def test_label_out_of_range_names_the_class(self):
        with pytest.raises(LabelRangeError, match="class index 7 out of range for 5 classes"):
            LabelMap(np.full((2, 2), 7, dtype=np.uint8), 5)

    def test_void_is_allowed(self):
        labels = LabelMap(np.array([[0, VOID], [4, 1]], dtype=np.uint8), 5)
        assert labels.void_mask.sum() == 1
        assert labels.classes_present() == [0, 1, 4]

    def test_flow_rejects_nan(self):
        vectors = np.zeros((2, 2, 2), dtype=np.float32)
        vectors[1, 1, 0] = np.nan
        with pytest.raises(FlowFormatError):
            FlowField(vectors)


def _png_chunk(kind: bytes, data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + kind + data + struct.pack(">I", zlib.crc32(kind + data))


def _rgb48_png(width: int, height: int, value: int) -> bytes:
    """A PNG with 16 bits per RGB channel, every sample equal to ``value``."""
    header = struct.pack(">IIBBBBB", width, height, 16, 2, 0, 0, 0)
    row = b"\x00" + struct.pack(">H", value) * 3 * width
    return (
        b"\x89PNG\r\n\x1a\n"
        + _png_chunk(b"IHDR", header)
        + _png_chunk(b"IDAT", zlib.compress(row * height))
        + _png_chunk(b"IEND", b"")
    )


class TestImageFiles:
    def test_png_round_trip(self, tmp_path, random_frame):
        frame = random_frame(5, 7)
        write_image(tmp_path / "f.png", frame)
        np.testing.assert_array_equal(load_image(tmp_path / "f.png").data, frame.data)

    def test_rgba_drops_alpha(self, tmp_path):
        rgba = np.zeros((3, 3, 4), dtype=np.uint8)
        rgba[..., 0] = 200
        rgba[..., 3] = 17
        Image.fromarray(rgba).save(tmp_path / "a.png")
        frame = load_image(tmp_path / "a.png")
        assert frame.data.shape == (3, 3, 3)
        assert (frame.data[..., 0] == 200).all()

    def test_grayscale_image_rejected(self, tmp_path):
        Image.fromarray(np.zeros((3, 3), dtype=np.uint8)).save(tmp_path / "g.png")
        with pytest.raises(RasterFormatError, match="unsupported mode"):
            load_image(tmp_path / "g.png")

    def test_16_bit_rgb_png_rejected(self, tmp_path):
        (tmp_path / "deep.png").write_bytes(_rgb48_png(3, 2, 0x1234))
        with pytest.raises(RasterFormatError, match="bit depth 16"):
            load_image(tmp_path / "deep.png")

    def test_corrupt_stream_rejected(self, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"not a png at all")
        with pytest.raises(RasterFormatError):
            load_image(tmp_path / "bad.png")

    def test_label_values_checked_on_load(self, tmp_path):
        write_labels(tmp_path / "l.png", LabelMap(np.array([[0, 4]], dtype=np.uint8), 5))
        assert load_labels(tmp_path / "l.png", 5).labels.tolist() == [[0, 4]]
        with pytest.raises(LabelRangeError):
            load_labels(tmp_path / "l.png", 3)


class TestFlowFiles:
    def test_round_trip(self, tmp_path, rng):
        flow = FlowField(rng.normal(size=(4, 6, 2)).astype(np.float32))
        write_flow(tmp_path / "a.flo", flow)
        np.testing.assert_array_equal(read_flow(tmp_path / "a.flo").vectors, flow.vectors)

    def test_header_layout(self, tmp_path):
        write_flow(tmp_path / "a.flo", FlowField.zeros(2, 3))
        raw = (tmp_path / "a.flo").read_bytes()
        assert np.frombuffer(raw[:4], dtype="<f4")[0] == FLO_MAGIC
        assert np.frombuffer(raw[4:12], dtype="<i4").tolist() == [3, 2]
        assert len(raw) == 12 + 8 * 6

    def test_truncated_payload(self, tmp_path):
        write_flow(tmp_path / "a.flo", FlowField.zeros(2, 3))
        raw = (tmp_path / "a.flo").read_bytes()
        (tmp_path / "b.flo").write_bytes(raw[:-4])
        with pytest.raises(FlowFormatError, match="truncated payload"):
            read_flow(tmp_path / "b.flo")

    def test_bad_magic(self, tmp_path):
        raw = np.array([1.0], dtype="<f4").tobytes() + np.array([1, 1], dtype="<i4").tobytes() + bytes(8)
        (tmp_path / "c.flo").write_bytes(raw)
        with pytest.raises(FlowFormatError, match="bad magic"):
            read_flow(tmp_path / "c.flo")

    def test_nan_payload(self, tmp_path):
        header = np.array([FLO_MAGIC], dtype="<f4").tobytes() + np.array([1, 1], dtype="<i4").tobytes()
        (tmp_path / "d.flo").write_bytes(header + np.array([np.nan, 0.0], dtype="<f4").tobytes())
        with pytest.raises(FlowFormatError):
            read_flow(tmp_path / "d.flo")


def _write_pair(tmp_path, name):
    write_image(tmp_path / f"{name}.png", Frame(np.zeros((2, 2, 3), dtype=np.uint8)))
    write_labels(tmp_path / f"{name}_l.png", LabelMap(np.zeros((2, 2), dtype=np.uint8), 5))
    return f"{name}.png", f"{name}_l.png"


class TestManifests:
    def test_load_written_manifest(self, tmp_path):
        image, labels = _write_pair(tmp_path, "a")
        entries = [
            ManifestEntry(image=image, labels=labels, tier=Tier.GT, seq="s1", offset=0),
            ManifestEntry(image=image, labels=labels, tier=Tier.PGT, seq="s1", offset=1, rating=7),
        ]
        write_manifest(tmp_path / "m.csv", entries)
        manifest = load_manifest(tmp_path / "m.csv")
        assert manifest.entries == tuple(entries)
        assert manifest.counts() == (1, 1)

    def test_trust_column_is_optional(self, tmp_path):
        image, labels = _write_pair(tmp_path, "a")
        entry = ManifestEntry(image=image, labels=labels, tier=Tier.PGT, seq="s1", offset=2, trust=0.7)
        write_manifest(tmp_path / "m.csv", [entry], with_trust=True)
        assert load_manifest(tmp_path / "m.csv").entries[0].trust == pytest.approx(0.7)

    def test_duplicate_key_rejected(self, tmp_path):
        image, labels = _write_pair(tmp_path, "a")
        entry = ManifestEntry(image=image, labels=labels, tier=Tier.GT, seq="s1", offset=0)
        write_manifest(tmp_path / "m.csv", [entry, entry])
        with pytest.raises(ManifestError, match="duplicate key"):
            load_manifest(tmp_path / "m.csv")

    def test_gt_with_offset_rejected(self, tmp_path):
        image, labels = _write_pair(tmp_path, "a")
        (tmp_path / "m.csv").write_text(
            f"image,labels,tier,seq,offset,rating\n{image},{labels},gt,s1,2,\n", encoding="utf-8"
        )
        with pytest.raises(ManifestError, match=":2:"):
            load_manifest(tmp_path / "m.csv")

    def test_bad_header_rejected(self, tmp_path):
        (tmp_path / "m.csv").write_text("image,labels\n", encoding="utf-8")
        with pytest.raises(ManifestError, match="header"):
            load_manifest(tmp_path / "m.csv")

    def test_unresolvable_paths_reported(self, tmp_path):
        entry = ManifestEntry(image="nope.png", labels="nope_l.png", tier=Tier.GT, seq="s1", offset=0)
        write_manifest(tmp_path / "m.csv", [entry])
        with pytest.raises(ManifestError, match="2 unresolvable paths"):
            load_manifest(tmp_path / "m.csv")
        assert len(load_manifest(tmp_path / "m.csv", check_paths=False)) == 1


class TestRatingsAndPalettes:
    def test_ratings_round_trip(self, tmp_path):
        write_ratings(tmp_path / "r.csv", [("s1/1", 9), ("s1/2", 3)])
        assert load_ratings(tmp_path / "r.csv") == {"s1/1": 9, "s1/2": 3}

    def test_duplicate_rating_rejected(self, tmp_path):
        (tmp_path / "r.csv").write_text("id,rating\ns1/1,9\ns1/1,8\n", encoding="utf-8")
        with pytest.raises(ManifestError, match="duplicate"):
            load_ratings(tmp_path / "r.csv")

    def test_palettes(self):
        assert CAMVID.num_classes == 11
        assert get_palette("synthetic") is SYNTHETIC
        with pytest.raises(ManifestError):
            get_palette("cityscapes")

    def test_colorize_renders_void_black(self):
        labels = LabelMap(np.array([[0, VOID]], dtype=np.uint8), SYNTHETIC.num_classes)
        image = SYNTHETIC.colorize(labels)
        assert tuple(image.data[0, 0]) == SYNTHETIC.colors[0]
        assert tuple(image.data[0, 1]) == (0, 0, 0)
