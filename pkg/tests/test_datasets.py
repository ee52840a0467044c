from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from labelprop.core.config import JitterConfig
from labelprop.core.exceptions import ManifestError
from labelprop.datasets import (
    COMPASS,
    PgtIndex,
    TrainSet,
    accumulate,
    build_agt_sets,
    combine,
    estimate_flow,
    jitter_labels,
    make_jitter_variants,
    offset_composition,
    oracle_rating,
    random_sets,
    rated_sets,
    read_train_set,
    render_sequence,
    sequence_files,
    sequential_sets,
    synth_corpus,
    write_train_set,
)
from labelprop.imagery import VOID, Frame, LabelMap, load_labels, load_manifest, write_image, write_labels
from labelprop.schemas import ManifestEntry, PgtItem, Tier


def _index(seqs=("s1", "s2", "s3"), depth=5, root="/data"):
    return PgtIndex(
        tuple(
            PgtItem(seq=seq, offset=k, image=f"{root}/{seq}/f{k}.png", labels=f"{root}/pgt/{seq}_p{k}.png")
            for seq in seqs
            for k in range(1, depth + 1)
        )
    )


def _gt(seqs=("s1", "s2", "s3"), root="/data"):
    return TrainSet(
        "GT",
        tuple(
            ManifestEntry(image=f"{root}/{seq}/f0.png", labels=f"{root}/{seq}/l0.png", tier=Tier.GT, seq=seq, offset=0)
            for seq in seqs
        ),
    )


class TestSetSchemes:
    def test_sequential_sets_group_by_offset(self):
        sets = sequential_sets(_index())
        assert [s.name for s in sets] == [f"PGT_S{k}" for k in range(1, 6)]
        for k, train_set in enumerate(sets, start=1):
            assert len(train_set) == 3
            assert {s.offset for s in train_set.samples} == {k}

    def test_sequential_sets_report_missing_offsets(self):
        items = tuple(i for i in _index().items if i.item_id != "s2/3")
        with pytest.raises(ManifestError, match=r"s2 lacks offsets \[3\]"):
            sequential_sets(PgtIndex(items))

    def test_rated_sets_are_ordered_blocks(self, rng):
        index = _index(seqs=[f"s{i}" for i in range(5)])
        ratings = {item.item_id: int(rng.integers(1, 10)) for item in index.items}
        sets = rated_sets(index, ratings)
        assert [s.name for s in sets] == [f"PGT_R{k}" for k in range(1, 6)]
        assert [len(s) for s in sets] == [5] * 5
        for better, worse in zip(sets, sets[1:]):
            assert min(ratings[s.item_id] for s in better.samples) >= max(ratings[s.item_id] for s in worse.samples)

    def test_rated_sets_need_every_rating(self):
        index = _index()
        ratings = {item.item_id: 5 for item in index.items[1:]}
        with pytest.raises(ManifestError, match="1 PGT items are unrated"):
            rated_sets(index, ratings)

    def test_rated_ties_break_by_sequence_then_offset(self):
        index = _index(seqs=("b", "a"), depth=5)
        sets = rated_sets(index, {item.item_id: 4 for item in index.items})
        assert [s.item_id for s in sets[0].samples] == ["a/1", "a/2"]

    @pytest.mark.parametrize("num_items", [5, 11, 23])
    def test_random_sets_partition(self, num_items):
        items = _index(seqs=[f"s{i}" for i in range(num_items)], depth=1)
        sets = random_sets(items, seed=9)
        sizes = [len(s) for s in sets]
        assert sum(sizes) == num_items and max(sizes) - min(sizes) <= 1
        union = set().union(*(s.pairs() for s in sets))
        assert len(union) == num_items
        again = random_sets(items, seed=9)
        assert [s.pairs() for s in sets] == [s.pairs() for s in again]

    def test_combine_and_accumulate(self):
        gt, pgt_sets = _gt(), sequential_sets(_index())
        assert combine(gt, pgt_sets[0]).name == "GT+PGT_S1"
        acc = accumulate(gt, pgt_sets, 3)
        assert acc.name == "GT+PGT_S(1-3)"
        assert acc.counts() == {"gt": 3, "pgt": 9}
        with pytest.raises(ValueError):
            accumulate(gt, pgt_sets, 1)

    def test_full_scale_counts(self, rng):
        index = _index(seqs=[f"s{i:03d}" for i in range(367)])
        ratings = {item.item_id: int(rng.integers(1, 10)) for item in index.items}
        all_pairs = {(i.image, i.labels) for i in index.items}
        for sets in (sequential_sets(index), rated_sets(index, ratings), random_sets(index, seed=1)):
            assert [len(s) for s in sets] == [367] * 5
            assert set().union(*(s.pairs() for s in sets)) == all_pairs
        gt = _gt(seqs=[f"s{i:03d}" for i in range(367)])
        counts = accumulate(gt, sequential_sets(index), 5).counts()
        assert counts == {"gt": 367, "pgt": 1835}

    def test_duplicate_samples_rejected(self):
        gt = _gt()
        with pytest.raises(ManifestError, match="duplicate sample"):
            combine(gt, gt)

    def test_offset_composition_of_rated_sets(self):
        index = _index(seqs=("a", "b", "c", "d"))
        # quality falls with offset, except sequence d which stays perfect
        ratings = {item.item_id: 9 if item.seq == "d" else 11 - 2 * item.offset for item in index.items}
        sets = rated_sets(index, ratings)
        rows = offset_composition(sets)
        assert rows[0] == ["set", "1", "2", "3", "4", "5", "total"]
        assert [row[-1] for row in rows[1:]] == [4] * 5
        assert rows[1][1:6] == [4, 0, 0, 0, 0]
        assert rows[2][1:6] == [0, 1, 1, 1, 1]
        assert rows[5][1:6] == [0, 0, 0, 1, 3]
        totals = np.sum([row[1:6] for row in rows[1:]], axis=0)
        assert totals.tolist() == [4] * 5

    def test_offset_composition_ignores_gt(self):
        gt, pgt_sets = _gt(), sequential_sets(_index())
        rows = offset_composition([combine(gt, pgt_sets[1])])
        assert rows[1] == ["GT+PGT_S2", 0, 3, 3]
        assert rows[0] == ["set", "1", "2", "total"]


class TestSetFiles:
    def test_write_and_read_with_trust(self, tmp_path):
        gt, pgt = _gt(root=tmp_path.as_posix()), sequential_sets(_index(root=tmp_path.as_posix()))[0]
        combined = combine(gt, pgt)
        for sample in combined.samples:
            for target in (sample.image, sample.labels):
                Path(target).parent.mkdir(parents=True, exist_ok=True)
                Path(target).touch()
        path = tmp_path / "sets" / "GT+PGT_S1.csv"
        write_train_set(path, combined, trust=0.6)
        entries = load_manifest(path, check_paths=False).entries
        assert entries[0].image == "../s1/f0.png"
        assert {e.trust for e in entries if e.tier == Tier.GT} == {1.0}
        assert {e.trust for e in entries if e.tier == Tier.PGT} == {0.6}
        back = read_train_set(path)
        assert back.name == "GT+PGT_S1"
        assert back.counts() == {"gt": 3, "pgt": 3}


def _square(size=16, top=5, side=6, cls=2):
    labels = np.zeros((size, size), dtype=np.uint8)
    labels[top:top + side, top:top + side] = cls
    return labels


class TestJitter:
    def test_no_dilation_no_shift_is_identity(self):
        labels = LabelMap(_square(), 5)
        out = jitter_labels(labels, 0, (0, 0), seed=1)
        np.testing.assert_array_equal(out.labels, labels.labels)

    def test_larger_region_wins_contested_pixels(self):
        out = jitter_labels(LabelMap(_square(), 5), 1, (0, 0), seed=1)
        assert np.count_nonzero(out.labels == 2) == 16
        assert (out.labels[6:10, 6:10] == 2).all()

    def test_shifted_object_lands_on_a_compass_step(self):
        out = jitter_labels(LabelMap(_square(side=4, top=6), 5), 0, (3, 3), seed=4)
        landed = [
            (dy, dx) for dy, dx in COMPASS
            if (out.labels[6 + 3 * dy:10 + 3 * dy, 6 + 3 * dx:10 + 3 * dx] == 2).all()
        ]
        assert landed

    def test_void_is_never_painted(self, rng):
        data = rng.integers(0, 3, size=(12, 12)).astype(np.uint8)
        data[:, 5] = VOID
        out = jitter_labels(LabelMap(data, 3), 2, (1, 4), seed=0)
        np.testing.assert_array_equal(out.void_mask, data == VOID)

    def test_same_seed_same_labels(self, rng):
        labels = LabelMap(rng.integers(0, 4, size=(10, 10)).astype(np.uint8), 4)
        first = jitter_labels(labels, 1, (2, 4), seed=12)
        second = jitter_labels(labels, 1, (2, 4), seed=12)
        np.testing.assert_array_equal(first.labels, second.labels)

    def test_bad_shift_range(self):
        with pytest.raises(ValueError):
            jitter_labels(LabelMap(_square(), 5), 1, (3, 9), seed=0)

    def test_agt_sets(self, tmp_path):
        samples = []
        for seq in ("s1", "s2"):
            write_image(tmp_path / f"{seq}.png", Frame(np.zeros((16, 16, 3), dtype=np.uint8)))
            write_labels(tmp_path / f"{seq}_l.png", LabelMap(_square(), 5))
            samples.append(
                ManifestEntry(image=(tmp_path / f"{seq}.png").as_posix(), labels=(tmp_path / f"{seq}_l.png").as_posix(),
                              tier=Tier.GT, seq=seq, offset=0)
            )
        gt = TrainSet("GT", tuple(samples))
        variants = make_jitter_variants(gt, JitterConfig(), tmp_path / "jitter", 5)
        assert sorted(variants) == ["s1/0", "s2/0"]
        assert [v.item_id for v in variants["s1/0"]] == ["s1@j/1", "s1@j/2", "s1@j/3"]
        assert load_labels(variants["s2/0"][0].labels, 5).shape == (16, 16)
        sets = build_agt_sets(gt, variants)
        assert [s.name for s in sets] == ["AGT_1", "AGT_1-2", "AGT_1-3"]
        assert [len(s) for s in sets] == [4, 6, 8]


def _rectangles(draw_seed: int, size: int = 24) -> np.ndarray:
    rng = np.random.default_rng(draw_seed)
    labels = np.zeros((size, size), dtype=np.uint8)
    for _ in range(int(rng.integers(1, 4))):
        h, w = (int(v) for v in rng.integers(3, 9, size=2))
        top, left = int(rng.integers(0, size - h)), int(rng.integers(0, size - w))
        labels[top:top + h, left:left + w] = int(rng.integers(1, 5))
    return labels


def _boundary_pixels(labels: np.ndarray) -> int:
    edge = np.zeros(labels.shape, dtype=bool)
    edge[1:] |= labels[1:] != labels[:-1]
    edge[:-1] |= labels[:-1] != labels[1:]
    edge[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    edge[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    return int(edge.sum())


class TestJitterBounds:
    @settings(max_examples=40, deadline=None)
    @given(layout=st.integers(0, 2**31 - 1), seed=st.integers(0, 2**31 - 1))
    def test_changes_stay_near_region_borders(self, layout, seed):
        cfg = JitterConfig()
        source = _rectangles(layout)
        out = jitter_labels(LabelMap(source, 5), cfg.dilation_radius, (cfg.shift_min, cfg.shift_max), seed)
        reach = cfg.dilation_radius + cfg.shift_max
        window = 2 * reach + 1
        mixed = (ndimage.maximum_filter(source, size=window, mode="nearest")
                 != ndimage.minimum_filter(source, size=window, mode="nearest"))
        changed = out.labels != source
        assert not (changed & ~mixed).any()
        assert changed.sum() <= _boundary_pixels(source) * reach

    @settings(max_examples=40, deadline=None)
    @given(layout=st.integers(0, 2**31 - 1), seed=st.integers(0, 2**31 - 1))
    def test_no_class_is_invented(self, layout, seed):
        source = _rectangles(layout)
        out = jitter_labels(LabelMap(source, 5), 2, (1, 5), seed)
        assert set(np.unique(out.labels)) <= set(np.unique(source))


class TestSyntheticCorpus:
    def test_flow_carries_labels_forward(self, tiny_synth):
        frames, labels, flows = render_sequence(tiny_synth, np.random.default_rng(0))
        assert len(frames) == len(labels) == 4 and len(flows) == 3
        for t, flow in enumerate(flows):
            rows, cols = np.nonzero(np.abs(flow.vectors).sum(axis=2))
            target_rows = rows + flow.vectors[rows, cols, 1].astype(int)
            target_cols = cols + flow.vectors[rows, cols, 0].astype(int)
            np.testing.assert_array_equal(
                labels[t + 1].labels[target_rows, target_cols], labels[t].labels[rows, cols]
            )

    def test_corpus_layout(self, tmp_path, tiny_synth):
        corpus = synth_corpus(tiny_synth, tmp_path / "a")
        assert corpus.sequences == ("seq000", "seq001")
        assert corpus.val_sequences == ("val000",)
        manifest = load_manifest(corpus.manifest)
        assert manifest.counts() == (2, 0)
        val = load_manifest(corpus.val_manifest)
        assert [e.seq for e in val.entries] == [f"val000_{t:02d}" for t in range(4)]
        files = sequence_files(tmp_path / "a" / "seq001" / "frame_00.png", 3)
        assert all(p.is_file() for p in files.frames + files.flows + files.truth)

    def test_corpus_is_reproducible(self, tmp_path, tiny_synth):
        synth_corpus(tiny_synth, tmp_path / "a")
        synth_corpus(tiny_synth, tmp_path / "b")
        for name in ("seq001/frame_03.png", "seq000/flow_02.flo", "val000/labels_01.png"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestFlowAndRatings:
    def test_block_matching_recovers_translation(self, rng):
        prev = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
        nxt = np.roll(prev, shift=(-1, 2), axis=(0, 1))
        flow = estimate_flow(Frame(prev), Frame(nxt), block=8, search=3)
        np.testing.assert_array_equal(flow.vectors[8:24, 8:24, 0], 2.0)
        np.testing.assert_array_equal(flow.vectors[8:24, 8:24, 1], -1.0)

    def test_identical_frames_give_zero_flow(self, random_frame):
        frame = random_frame(16, 16)
        assert not estimate_flow(frame, frame, block=4, search=2).vectors.any()

    def test_oracle_rating(self):
        truth = LabelMap(np.zeros((10, 10), dtype=np.uint8), 2)
        assert oracle_rating(truth, truth) == 9
        one_wrong = np.zeros((10, 10), dtype=np.uint8)
        one_wrong[0, 0] = 1
        assert oracle_rating(LabelMap(one_wrong, 2), truth) == 7
        assert oracle_rating(LabelMap(np.ones((10, 10), dtype=np.uint8), 2), truth) == 1
