"""Tests for dataset loading, the synthetic walker generator and batch sampling."""

import logging
import math
from collections import Counter

import cv2
import numpy as np
import pytest

from app.models.schemas import Condition, GeneratorConfig
from app.services.data import (
    DatasetError,
    DatasetIndex,
    SilhouetteSequence,
    WalkerShape,
    clip_from_sequence,
    export_dataset,
    load_dataset,
    render_frame,
    resolve_train_count,
    sample_batch,
    synthesize,
)


def _sequence(identity: str, view: int = 0, frames: int = 3, value: int = 1) -> SilhouetteSequence:
    return SilhouetteSequence(
        id=identity,
        condition=Condition.NM,
        seq=1,
        view=view,
        frames=np.full((frames, 4, 4), value, dtype=np.uint8),
    )


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


SMALL = GeneratorConfig(
    n_ids=4,
    views=(0, 90, 180),
    conditions=(Condition.NM, Condition.BG),
    frames=3,
    resolution=(32, 24),
    seed=3,
    nm_sequences=1,
    sequences_per_condition=1,
)


class TestSynthesize:
    """Deterministic walker rendering."""

    def test_same_seed_same_pixels(self):
        """One generator config always renders the same frames."""
        first = synthesize(SMALL)
        second = synthesize(SMALL)
        assert [s.key for s in first.sequences] == [s.key for s in second.sequences]
        for a, b in zip(first.sequences, second.sequences):
            np.testing.assert_array_equal(a.frames, b.frames)

    def test_different_seed_different_pixels(self):
        """Changing the seed changes the walkers."""
        first = synthesize(SMALL)
        second = synthesize(SMALL.model_copy(update={"seed": 4}))
        assert any(not np.array_equal(a.frames, b.frames) for a, b in zip(first.sequences, second.sequences))

    def test_counts_and_binary_frames(self):
        """One non-empty binary sequence per identity, condition and view."""
        index = synthesize(SMALL)
        assert len(index.sequences) == 4 * 2 * 3
        for sequence in index.sequences:
            assert sequence.frames.shape == (3, 32, 24)
            assert set(np.unique(sequence.frames)) <= {0, 1}
            assert sequence.frames.any()

    def test_nm_gets_more_sequences(self):
        """NM uses nm_sequences, other conditions sequences_per_condition."""
        index = synthesize(SMALL.model_copy(update={"nm_sequences": 3}))
        counts = Counter(s.condition for s in index.sequences)
        assert counts[Condition.NM] == 4 * 3 * 3
        assert counts[Condition.BG] == 4 * 1 * 3

    def test_identities_differ_more_than_phases(self):
        """Average silhouette overlap is higher within an identity than across identities."""
        shapes = [WalkerShape.draw(np.random.default_rng([11, n])) for n in range(10)]
        phases = np.linspace(0.0, 2.0 * math.pi, 6, endpoint=False)
        resolution = (64, 44)
        intra, inter = [], []
        for shape in shapes:
            frames = [render_frame(shape, p, Condition.NM, 0, resolution) for p in phases]
            intra.extend(_iou(frames[i], frames[j]) for i in range(len(frames)) for j in range(i + 1, len(frames)))
        for i in range(len(shapes)):
            for j in range(i + 1, len(shapes)):
                for p in phases:
                    a = render_frame(shapes[i], p, Condition.NM, 0, resolution)
                    b = render_frame(shapes[j], p, Condition.NM, 0, resolution)
                    inter.append(_iou(a, b))
        assert np.mean(intra) > np.mean(inter)

    def test_carrying_condition_adds_pixels(self):
        """A bag or a coat only adds foreground."""
        shape = WalkerShape.draw(np.random.default_rng(5))
        plain = render_frame(shape, 0.3, Condition.NM, 0, (64, 44))
        bag = render_frame(shape, 0.3, Condition.BG, 0, (64, 44))
        coat = render_frame(shape, 0.3, Condition.CL, 0, (64, 44))
        assert bag.sum() > plain.sum()
        assert coat.sum() > plain.sum()


class TestDiskRoundTrip:
    """Export then load through the on-disk layout."""

    def test_export_then_load(self, tmp_path):
        """Frames written to the CASIA-B layout load back unchanged."""
        index = synthesize(SMALL)
        written = export_dataset(index, tmp_path)
        assert written == 4 * 2 * 3 * 3
        assert (tmp_path / "001" / "nm-01" / "090" / "000.png").is_file()

        loaded = load_dataset(tmp_path, resolution=(32, 24), train_ids=2)
        assert len(loaded.sequences) == 24
        assert loaded.train_ids == ("001", "002")
        assert loaded.test_ids == ("003", "004")
        for original, restored in zip(index.sequences, loaded.sequences):
            assert original.key == restored.key
            np.testing.assert_array_equal(original.frames, restored.frames)

    def test_missing_root(self, tmp_path):
        """A missing data root is a dataset error."""
        with pytest.raises(DatasetError):
            load_dataset(tmp_path / "absent")

    def test_empty_root(self, tmp_path):
        """A root with no sequences is a dataset error."""
        with pytest.raises(DatasetError, match="no sequences found"):
            load_dataset(tmp_path)

    def test_binarizes_and_resizes(self, tmp_path):
        """Grey levels are thresholded and frames resized to the requested resolution."""
        view_dir = tmp_path / "001" / "nm-01" / "000"
        view_dir.mkdir(parents=True)
        image = np.zeros((8, 6), dtype=np.uint8)
        image[:, :3] = 200
        image[:, 3:] = 100
        cv2.imwrite(str(view_dir / "000.png"), image)
        other = tmp_path / "002" / "nm-01" / "000"
        other.mkdir(parents=True)
        cv2.imwrite(str(other / "000.png"), image)

        index = load_dataset(tmp_path, resolution=(8, 6))
        frame = index.sequences[0].frames[0]
        np.testing.assert_array_equal(frame[:, :3], 1)
        np.testing.assert_array_equal(frame[:, 3:], 0)

        resized = load_dataset(tmp_path, resolution=(4, 6))
        assert resized.sequences[0].resolution == (4, 6)

    def test_unreadable_frame_is_skipped(self, tmp_path, caplog):
        """Undecodable frames are dropped with a warning."""
        for identity in ("001", "002"):
            view_dir = tmp_path / identity / "bg-01" / "018"
            view_dir.mkdir(parents=True)
            cv2.imwrite(str(view_dir / "000.png"), np.full((4, 4), 255, dtype=np.uint8))
        (tmp_path / "001" / "bg-01" / "018" / "001.png").write_bytes(b"not an image")

        with caplog.at_level(logging.WARNING):
            index = load_dataset(tmp_path, resolution=(4, 4))
        assert index.sequences[0].frames.shape[0] == 1
        assert "unreadable frame" in caplog.text


class TestDatasetIndex:
    """Subject-disjoint splits."""

    def test_default_split_is_half(self):
        """Without a preset the first half of the identities trains."""
        assert resolve_train_count(None, 24) == 12

    def test_presets(self):
        """st, mt and lt map to 24, 62 and 74 training identities."""
        assert resolve_train_count("st", 124) == 24
        assert resolve_train_count("mt", 124) == 62
        assert resolve_train_count("lt", 124) == 74

    def test_split_must_leave_test_identities(self):
        """A split that leaves no test identity is refused."""
        with pytest.raises(DatasetError):
            resolve_train_count(4, 4)
        with pytest.raises(DatasetError):
            resolve_train_count("lt", 24)

    def test_overlapping_splits_rejected(self):
        """An identity cannot be in both splits."""
        with pytest.raises(DatasetError):
            DatasetIndex(sequences=(_sequence("001"),), train_ids=("001",), test_ids=("001",))

    def test_splits_are_disjoint(self):
        """No identity appears in both the train and the test sequences."""
        index = synthesize(SMALL)
        train = {s.id for s in index.split("train")}
        test = {s.id for s in index.split("test")}
        assert train and test
        assert not train & test

    def test_grouped_by_identity_condition_and_view(self):
        """Every sequence lands in its (id, condition, view) group, sequence numbers ascending."""
        index = synthesize(SMALL.model_copy(update={"nm_sequences": 3}))
        groups = index.grouped()
        assert len(groups) == 4 * 2 * 3
        assert sum(len(members) for members in groups.values()) == len(index.sequences)
        for (identity, condition, view), members in groups.items():
            assert all((s.id, s.condition, s.view) == (identity, condition, view) for s in members)
        assert [s.seq for s in groups[("001", Condition.NM, 90)]] == [1, 2, 3]
        assert [s.seq for s in groups[("004", Condition.BG, 180)]] == [1]

    def test_non_binary_frames_rejected(self):
        """Frames must hold only 0 and 1."""
        with pytest.raises(ValueError):
            _sequence("001", value=2)


class TestSampling:
    """``P x K`` batches and clip extraction."""

    def test_clip_loops_short_sequences(self):
        """Sequences shorter than the clip repeat from the start."""
        frames = np.arange(5.0).reshape(5, 1, 1)
        clip = clip_from_sequence(frames, 12)
        np.testing.assert_array_equal(clip.reshape(-1), [0, 1, 2, 3, 4, 0, 1, 2, 3, 4, 0, 1])

    def test_clip_wraps_from_start(self):
        """A late start wraps around to frame 0."""
        frames = np.arange(4.0).reshape(4, 1, 1)
        np.testing.assert_array_equal(clip_from_sequence(frames, 3, start=3).reshape(-1), [3, 0, 1])

    def test_batch_layout(self):
        """A P x K batch has K clips of each of P training labels."""
        config = GeneratorConfig(
            n_ids=10, views=(0, 90), conditions=(Condition.NM,), frames=4, resolution=(16, 12), nm_sequences=2
        )
        index = synthesize(config, train_ids=8)
        batch = sample_batch(index, 8, 8, 6, np.random.default_rng(0))
        assert batch.clips.shape == (64, 6, 16, 12)
        assert len(batch) == 64
        assert sorted(Counter(batch.labels.tolist()).values()) == [8] * 8
        assert set(batch.labels.tolist()) <= set(range(8))

    def test_clips_only_contain_source_frames(self):
        """Every sampled frame comes from a sequence of the sampled identity and view."""
        index = synthesize(SMALL, train_ids=2)
        batch = sample_batch(index, 2, 3, 5, np.random.default_rng(1))
        lookup = {s.key: s for s in index.sequences}
        for clip, identity, condition, view in zip(batch.clips, batch.ids, batch.conditions, batch.views):
            candidates = [
                s for key, s in lookup.items() if key[0] == identity and key[1].value == condition and key[3] == view
            ]
            for frame in clip:
                assert any(any(np.array_equal(frame, f) for f in s.frames) for s in candidates)

    def test_too_few_identities(self):
        """Asking for more identities than the split holds is refused."""
        index = DatasetIndex.from_sequences([_sequence("001"), _sequence("002")], train_ids=1)
        with pytest.raises(DatasetError):
            sample_batch(index, 2, 1, 2, np.random.default_rng(0))

    def test_identities_drawn_uniformly(self):
        """Each training identity is drawn with equal probability."""
        index = DatasetIndex.from_sequences([_sequence(f"{n:03d}", frames=1) for n in range(1, 9)], train_ids=4)
        rng = np.random.default_rng(2)
        counts = Counter()
        draws = 5000
        for _ in range(draws):
            counts.update(sample_batch(index, 2, 1, 1, rng).ids)
        for identity in index.train_ids:
            assert counts[identity] / draws == pytest.approx(0.5, abs=0.03)
