"""Silhouette sequences: on-disk loading, a synthetic walker generator and ``P x K`` sampling.

On-disk layout (CASIA-B style)::

    root/<ID>/<condition>-<seq>/<view>/<frame>.png

e.g. ``001/nm-01/090/000.png``. Frames are 8-bit grayscale PNG or PGM.
"""
from __future__ import annotations

import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np

from app.models.schemas import Condition, GeneratorConfig

logger = logging.getLogger(__name__)

BINARY_THRESHOLD = 128
FRAME_SUFFIXES = (".png", ".pgm")
SPLIT_PRESETS = {"st": 24, "mt": 62, "lt": 74}
SUPERSAMPLE = 4

_SEQUENCE_DIR = re.compile(r"^(?P<condition>[a-zA-Z]+)-(?P<seq>\d+)$")


class DatasetError(RuntimeError):
    """Raised when a dataset is empty or cannot satisfy a request."""


@dataclass(frozen=True, eq=False)
class SilhouetteSequence:
    id: str
    condition: Condition
    seq: int
    view: int
    frames: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ValueError(f"sequence {self.key} needs at least one H x W frame, got {self.frames.shape}")
        if not np.isin(self.frames, (0, 1)).all():
            raise ValueError(f"sequence {self.key} has non-binary pixels")

    @property
    def key(self) -> tuple[str, Condition, int, int]:
        return (self.id, self.condition, self.seq, self.view)

    @property
    def resolution(self) -> tuple[int, int]:
        return (int(self.frames.shape[1]), int(self.frames.shape[2]))


@dataclass(frozen=True)
class DatasetIndex:
    """Immutable set of sequences with a subject-disjoint train/test split."""

    sequences: tuple[SilhouetteSequence, ...]
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        overlap = set(self.train_ids) & set(self.test_ids)
        if overlap:
            raise DatasetError(f"identities in both splits: {sorted(overlap)[:5]}")
        known = set(self.train_ids) | set(self.test_ids)
        stray = {s.id for s in self.sequences} - known
        if stray:
            raise DatasetError(f"identities outside every split: {sorted(stray)[:5]}")

    @classmethod
    def from_sequences(cls, sequences: Iterable[SilhouetteSequence], train_ids: int | str | None) -> DatasetIndex:
        ordered = tuple(sorted(sequences, key=lambda s: (s.id, s.condition.value, s.seq, s.view)))
        if not ordered:
            raise DatasetError("no sequences found")
        ids = sorted({s.id for s in ordered})
        n_train = resolve_train_count(train_ids, len(ids))
        return cls(sequences=ordered, train_ids=tuple(ids[:n_train]), test_ids=tuple(ids[n_train:]))

    def split(self, name: str) -> tuple[SilhouetteSequence, ...]:
        if name not in ("train", "test"):
            raise ValueError(f"unknown split {name!r}")
        members = set(self.train_ids if name == "train" else self.test_ids)
        return tuple(s for s in self.sequences if s.id in members)

    def grouped(self) -> dict[tuple[str, Condition, int], list[SilhouetteSequence]]:
        """Sequences keyed by (id, condition, view), sequence numbers ascending."""
        groups: dict[tuple[str, Condition, int], list[SilhouetteSequence]] = defaultdict(list)
        for sequence in self.sequences:
            groups[(sequence.id, sequence.condition, sequence.view)].append(sequence)
        return dict(groups)

    def by_identity(self, name: str = "train") -> dict[str, list[SilhouetteSequence]]:
        groups: dict[str, list[SilhouetteSequence]] = defaultdict(list)
        for sequence in self.split(name):
            groups[sequence.id].append(sequence)
        return dict(groups)

    @property
    def num_classes(self) -> int:
        return len(self.train_ids)


@dataclass(frozen=True)
class Batch:
    """``P x K`` clips with contiguous class labels and per-clip metadata."""

    clips: np.ndarray
    labels: np.ndarray
    ids: tuple[str, ...] = ()
    conditions: tuple[str, ...] = ()
    views: tuple[int, ...] = ()

    def __len__(self) -> int:
        return int(self.clips.shape[0])


def resolve_train_count(train_ids: int | str | None, n_ids: int) -> int:
    """Number of identities in the training split; the rest is the test split."""
    if train_ids is None:
        count = max(1, n_ids // 2)
    elif isinstance(train_ids, str):
        if train_ids not in SPLIT_PRESETS:
            raise DatasetError(f"unknown split preset {train_ids!r}")
        count = SPLIT_PRESETS[train_ids]
    else:
        count = int(train_ids)
    if not 1 <= count < n_ids:
        raise DatasetError(f"cannot put {count} of {n_ids} identities in the training split")
    return count


def clip_from_sequence(frames: np.ndarray, length: int, start: int = 0) -> np.ndarray:
    """``length`` frames from ``start``, wrapping cyclically."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[0] < 1:
        raise ValueError(f"expected a non-empty N x H x W sequence, got {frames.shape}")
    indices = (start + np.arange(length)) % frames.shape[0]
    return frames[indices]


# ----------------------------------------------------------------------
# Loading
# ----------------------------------------------------------------------
def read_frame(path: Path, resolution: tuple[int, int]) -> np.ndarray | None:
    image = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if image is None:
        return None
    height, width = resolution
    if image.shape != (height, width):
        image = cv2.resize(image, (width, height), interpolation=cv2.INTER_NEAREST)
    return (image >= BINARY_THRESHOLD).astype(np.uint8)


def load_dataset(
    root: Path,
    resolution: tuple[int, int] = (64, 44),
    train_ids: int | str | None = None,
) -> DatasetIndex:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")

    sequences = []
    for id_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for seq_dir in sorted(p for p in id_dir.iterdir() if p.is_dir()):
            match = _SEQUENCE_DIR.match(seq_dir.name)
            if match is None:
                logger.warning("Skipping %s: not a <condition>-<seq> directory", seq_dir)
                continue
            try:
                condition = Condition(match["condition"].upper())
            except ValueError:
                logger.warning("Skipping %s: unknown condition %s", seq_dir, match["condition"])
                continue
            for view_dir in sorted(p for p in seq_dir.iterdir() if p.is_dir()):
                if not view_dir.name.isdigit():
                    logger.warning("Skipping %s: view is not a number", view_dir)
                    continue
                frames = []
                for frame_path in sorted(view_dir.iterdir()):
                    if frame_path.suffix.lower() not in FRAME_SUFFIXES:
                        continue
                    frame = read_frame(frame_path, resolution)
                    if frame is None:
                        logger.warning("Skipping unreadable frame %s", frame_path)
                        continue
                    frames.append(frame)
                if not frames:
                    logger.warning("Dropping empty sequence %s", view_dir)
                    continue
                sequences.append(
                    SilhouetteSequence(
                        id=id_dir.name,
                        condition=condition,
                        seq=int(match["seq"]),
                        view=int(view_dir.name),
                        frames=np.stack(frames),
                    )
                )

    if not sequences:
        raise DatasetError(f"no sequences found under {root}")
    index = DatasetIndex.from_sequences(sequences, train_ids)
    logger.info(
        "Loaded %d sequences from %s (%d train / %d test identities)",
        len(index.sequences),
        root,
        len(index.train_ids),
        len(index.test_ids),
    )
    return index


def export_dataset(index: DatasetIndex, root: Path) -> int:
    """Write every sequence as PNG frames in the on-disk layout; returns the frame count."""
    root = Path(root)
    written = 0
    for sequence in index.sequences:
        view_dir = root / sequence.id / f"{sequence.condition.value.lower()}-{sequence.seq:02d}" / f"{sequence.view:03d}"
        view_dir.mkdir(parents=True, exist_ok=True)
        for number, frame in enumerate(sequence.frames):
            cv2.imwrite(str(view_dir / f"{number:03d}.png"), (frame * 255).astype(np.uint8))
            written += 1
    logger.info("Exported %d sequences (%d frames) to %s", len(index.sequences), written, root)
    return written


# ----------------------------------------------------------------------
# Synthetic walkers
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class WalkerShape:
    """Per-identity body proportions and gait rhythm, relative to canvas size."""

    torso_width: float
    torso_height: float
    head_radius: float
    leg_length: float
    arm_length: float
    limb_width: float
    leg_swing: float
    arm_swing: float
    knee_bend: float
    period: float
    bob: float

    @classmethod
    def draw(cls, rng: np.random.Generator) -> WalkerShape:
        return cls(
            torso_width=rng.uniform(0.16, 0.34),
            torso_height=rng.uniform(0.22, 0.32),
            head_radius=rng.uniform(0.05, 0.08),
            leg_length=rng.uniform(0.17, 0.23),
            arm_length=rng.uniform(0.12, 0.18),
            limb_width=rng.uniform(0.035, 0.07),
            leg_swing=rng.uniform(0.25, 0.6),
            arm_swing=rng.uniform(0.15, 0.5),
            knee_bend=rng.uniform(0.1, 0.6),
            period=rng.uniform(9.0, 16.0),
            bob=rng.uniform(0.0, 0.02),
        )


def _point(x: float, y: float) -> tuple[int, int]:
    return (int(round(x)), int(round(y)))


def render_frame(
    shape: WalkerShape,
    phase: float,
    condition: Condition,
    view: int,
    resolution: tuple[int, int],
) -> np.ndarray:
    """One binary ``H x W`` silhouette of a walker at gait ``phase`` (radians)."""
    height, width = resolution
    canvas_h, canvas_w = height * SUPERSAMPLE, width * SUPERSAMPLE
    canvas = np.zeros((canvas_h, canvas_w), dtype=np.uint8)
    scale = float(canvas_h)
    limb = max(1, int(round(shape.limb_width * scale)))

    cx = canvas_w / 2.0
    hip_y = canvas_h * 0.58 - shape.bob * scale * abs(math.sin(phase))
    torso_w = shape.torso_width * scale / 2.0
    torso_h = shape.torso_height * scale
    shoulder_y = hip_y - torso_h * 0.85
    torso_center = _point(cx, hip_y - torso_h / 2.0)
    torso_axes = _point(torso_w, torso_h / 2.0)

    torso = np.zeros_like(canvas)
    cv2.ellipse(torso, torso_center, torso_axes, 0, 0, 360, 255, -1)
    if condition is Condition.CL:
        coat = cv2.getStructuringElement(cv2.MORPH_ELLIPSE, (limb * 2 + 1, limb * 2 + 1))
        torso = cv2.dilate(torso, coat)
    canvas = cv2.bitwise_or(canvas, torso)

    head = _point(cx, hip_y - torso_h - shape.head_radius * scale * 0.8)
    cv2.circle(canvas, head, int(round(shape.head_radius * scale)), 255, -1)

    thigh = shape.leg_length * scale
    for sign in (1.0, -1.0):
        swing = sign * shape.leg_swing * math.sin(phase)
        knee = (cx + thigh * math.sin(swing), hip_y + thigh * math.cos(swing))
        bend = swing - shape.knee_bend * max(0.0, math.sin(phase + sign * math.pi / 2.0))
        foot = (knee[0] + thigh * math.sin(bend), knee[1] + thigh * math.cos(bend))
        cv2.line(canvas, _point(cx, hip_y), _point(*knee), 255, limb)
        cv2.line(canvas, _point(*knee), _point(*foot), 255, limb)

        arm_angle = -sign * shape.arm_swing * math.sin(phase)
        hand = (cx + shape.arm_length * scale * math.sin(arm_angle), shoulder_y + shape.arm_length * scale * math.cos(arm_angle))
        cv2.line(canvas, _point(cx, shoulder_y), _point(*hand), 255, max(1, limb - 1))

    if condition is Condition.BG:
        bag = _point(cx + torso_w * 1.05, hip_y - torso_h * 0.1)
        cv2.ellipse(canvas, bag, _point(torso_w * 0.35, torso_h * 0.25), 0, 0, 360, 255, -1)

    canvas = _apply_view(canvas, view)
    small = cv2.resize(canvas, (width, height), interpolation=cv2.INTER_AREA)
    return (small >= BINARY_THRESHOLD).astype(np.uint8)


def _apply_view(canvas: np.ndarray, view: int) -> np.ndarray:
    """Horizontal shear plus width scaling; views past 90 degrees are mirrored."""
    canvas_h, canvas_w = canvas.shape
    radians = math.radians(view)
    sx = max(0.35, abs(math.cos(radians)))
    if view > 90:
        sx = -sx
    shear = 0.25 * math.sin(radians)
    cx, cy = canvas_w / 2.0, canvas_h / 2.0
    matrix = np.array([[sx, shear, cx - sx * cx - shear * cy], [0.0, 1.0, 0.0]], dtype=np.float64)
    return cv2.warpAffine(canvas, matrix, (canvas_w, canvas_h), flags=cv2.INTER_NEAREST)


def _sequence_counts(config: GeneratorConfig) -> dict[Condition, int]:
    return {
        condition: config.nm_sequences if condition is Condition.NM else config.sequences_per_condition
        for condition in config.conditions
    }


def synthesize(config: GeneratorConfig, train_ids: int | str | None = None) -> DatasetIndex:
    """Render every (identity, condition, sequence, view) of the generator document."""
    sequences = []
    counts = _sequence_counts(config)
    for number in range(config.n_ids):
        identity = f"{number + 1:03d}"
        shape = WalkerShape.draw(np.random.default_rng([config.seed, number]))
        for condition, count in counts.items():
            for seq in range(1, count + 1):
                stream = list(Condition).index(condition)
                offset = np.random.default_rng([config.seed, number, stream, seq]).uniform(0.0, 2.0 * math.pi)
                for view in config.views:
                    phases = offset + 2.0 * math.pi * np.arange(config.frames) / shape.period
                    frames = np.stack(
                        [render_frame(shape, float(p), condition, view, config.resolution) for p in phases]
                    )
                    sequences.append(
                        SilhouetteSequence(id=identity, condition=condition, seq=seq, view=view, frames=frames)
                    )
    split = train_ids if train_ids is not None else config.train_ids
    index = DatasetIndex.from_sequences(sequences, split)
    logger.info(
        "Synthesized %d sequences for %d identities (seed %d)", len(index.sequences), config.n_ids, config.seed
    )
    return index


# ----------------------------------------------------------------------
# Sampling
# ----------------------------------------------------------------------
def sample_batch(
    index: DatasetIndex,
    identities: int,
    per_identity: int,
    length: int,
    rng: np.random.Generator,
) -> Batch:
    """``identities`` train identities without replacement, ``per_identity`` sequences each.

    Sequences are drawn with replacement only when an identity has fewer than
    ``per_identity``. Longer sequences are cropped at a random start, shorter
    ones looped.
    """
    groups = index.by_identity("train")
    train_ids = [i for i in index.train_ids if i in groups]
    if len(train_ids) < identities:
        raise DatasetError(f"batch needs {identities} identities but the train split has {len(train_ids)}")
    label_of = {identity: label for label, identity in enumerate(index.train_ids)}

    chosen = rng.choice(len(train_ids), size=identities, replace=False)
    clips, labels, ids, conditions, views = [], [], [], [], []
    for position in chosen:
        identity = train_ids[int(position)]
        pool: Sequence[SilhouetteSequence] = groups[identity]
        picks = rng.choice(len(pool), size=per_identity, replace=len(pool) < per_identity)
        for pick in picks:
            sequence = pool[int(pick)]
            available = sequence.frames.shape[0]
            start = int(rng.integers(0, available - length + 1)) if available > length else 0
            clips.append(clip_from_sequence(sequence.frames, length, start))
            labels.append(label_of[identity])
            ids.append(identity)
            conditions.append(sequence.condition.value)
            views.append(sequence.view)
    return Batch(
        clips=np.stack(clips),
        labels=np.asarray(labels, dtype=np.int64),
        ids=tuple(ids),
        conditions=tuple(conditions),
        views=tuple(views),
    )
