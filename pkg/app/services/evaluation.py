"""Cross-view gallery/probe protocol: rank-1 excluding identical views, CMC and mAP."""
from __future__ import annotations

import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np
import pandas as pd

from app.models.schemas import Condition, ConditionSummary, EvalConfig, ViewAccuracy
from app.services.data import DatasetError, DatasetIndex, SilhouetteSequence

if TYPE_CHECKING:
    from app.services.model import GaitModel

logger = logging.getLogger(__name__)

PER_VIEW_COLUMNS = ["condition", "view", "rank1", "probes", "excluded"]
SUMMARY_COLUMNS = ["condition", "mean_rank1", "mAP", "probes", "gallery", "excluded"]


@dataclass(frozen=True)
class EmbeddingSet:
    """Row-aligned embeddings and their identity/view/condition labels."""

    embeddings: np.ndarray
    ids: np.ndarray
    views: np.ndarray
    conditions: np.ndarray = field(default_factory=lambda: np.array([], dtype=object))

    def __post_init__(self) -> None:
        rows = self.embeddings.shape[0]
        if len(self.ids) != rows or len(self.views) != rows:
            raise ValueError(f"{rows} embeddings but {len(self.ids)} ids and {len(self.views)} views")

    def __len__(self) -> int:
        return int(self.embeddings.shape[0])

    def subset(self, mask: np.ndarray) -> EmbeddingSet:
        conditions = self.conditions[mask] if len(self.conditions) else self.conditions
        return EmbeddingSet(self.embeddings[mask], self.ids[mask], self.views[mask], conditions)


@dataclass
class ViewRank1:
    view: int
    hits: int = 0
    probes: int = 0
    excluded: int = 0

    @property
    def rank1(self) -> float:
        return 100.0 * self.hits / self.probes if self.probes else 0.0


@dataclass(frozen=True)
class MapResult:
    mAP: float
    probes: int
    excluded: int


@dataclass
class EvalReport:
    per_view: list[ViewAccuracy]
    summary: list[ConditionSummary]
    max_rank: int = 1

    def per_view_frame(self) -> pd.DataFrame:
        rows = [row.model_dump(mode="json") for row in self.per_view]
        return pd.DataFrame(rows, columns=PER_VIEW_COLUMNS)

    def summary_frame(self) -> pd.DataFrame:
        rows = []
        for row in self.summary:
            record = row.model_dump(mode="json", exclude={"cmc"})
            if self.max_rank > 1:
                record.update({f"rank_{k}": value for k, value in enumerate(row.cmc, start=1)})
            rows.append(record)
        columns = list(SUMMARY_COLUMNS)
        if self.max_rank > 1:
            columns += [f"rank_{k}" for k in range(1, self.max_rank + 1)]
        return pd.DataFrame(rows, columns=columns)

    def write_csv(self, out_dir: Path) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        per_view_path = out_dir / "eval_per_view.csv"
        summary_path = out_dir / "eval_summary.csv"
        write_csv(self.per_view_frame(), per_view_path)
        write_csv(self.summary_frame(), summary_path)
        return per_view_path, summary_path


def write_csv(frame: pd.DataFrame, path: Path) -> None:
    frame.to_csv(path, index=False, lineterminator="\n", float_format="%.6f")


def embed_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance between every row of ``a`` and every row of ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"embedding extents differ: {a.shape[1]} vs {b.shape[1]}")
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _cross_view_candidates(gallery: EmbeddingSet, view: int) -> np.ndarray:
    return np.flatnonzero(gallery.views != view)


def rank1_cross_view(
    gallery: EmbeddingSet,
    probe: EmbeddingSet,
    distances: np.ndarray | None = None,
    pairs: list[tuple[int, int]] | None = None,
) -> dict[int, ViewRank1]:
    """Per probe-view rank-1 over gallery entries recorded at a different view.

    Ties go to the lowest gallery index. When ``pairs`` is given, every
    compared (probe, gallery) index pair is appended to it.
    """
    if distances is None:
        distances = embed_distance(probe.embeddings, gallery.embeddings)
    results: dict[int, ViewRank1] = {}
    for i in range(len(probe)):
        view = int(probe.views[i])
        entry = results.setdefault(view, ViewRank1(view=view))
        candidates = _cross_view_candidates(gallery, view)
        if candidates.size == 0:
            entry.excluded += 1
            continue
        if pairs is not None:
            pairs.extend((i, int(j)) for j in candidates)
        nearest = candidates[int(np.argmin(distances[i, candidates]))]
        entry.probes += 1
        entry.hits += int(gallery.ids[nearest] == probe.ids[i])
    return dict(sorted(results.items()))


def average_precision(matches: np.ndarray) -> float:
    """Mean of the precision at each relevant rank of a ranked 0/1 list."""
    matches = np.asarray(matches, dtype=np.float64)
    relevant = matches.sum()
    if relevant == 0:
        raise ValueError("average precision needs at least one relevant item")
    precision = np.cumsum(matches) / np.arange(1, len(matches) + 1)
    return float(np.sum(precision * matches) / relevant)


def _ranked_matches(gallery: EmbeddingSet, probe: EmbeddingSet, distances: np.ndarray, i: int) -> np.ndarray | None:
    candidates = _cross_view_candidates(gallery, int(probe.views[i]))
    if candidates.size == 0:
        return None
    order = candidates[np.argsort(distances[i, candidates], kind="stable")]
    return (gallery.ids[order] == probe.ids[i]).astype(np.int64)


def mean_average_precision(
    gallery: EmbeddingSet,
    probe: EmbeddingSet,
    distances: np.ndarray | None = None,
) -> MapResult:
    if distances is None:
        distances = embed_distance(probe.embeddings, gallery.embeddings)
    scores = []
    excluded = 0
    for i in range(len(probe)):
        matches = _ranked_matches(gallery, probe, distances, i)
        if matches is None or matches.sum() == 0:
            excluded += 1
            continue
        scores.append(average_precision(matches))
    value = 100.0 * float(np.mean(scores)) if scores else 0.0
    return MapResult(mAP=value, probes=len(scores), excluded=excluded)


def cmc(
    gallery: EmbeddingSet,
    probe: EmbeddingSet,
    max_rank: int,
    distances: np.ndarray | None = None,
) -> np.ndarray:
    """Fraction (percent) of probes with a same-identity candidate within the top ``k``, ``k = 1..max_rank``."""
    if distances is None:
        distances = embed_distance(probe.embeddings, gallery.embeddings)
    curves = []
    for i in range(len(probe)):
        matches = _ranked_matches(gallery, probe, distances, i)
        if matches is None:
            continue
        hits = np.zeros(max_rank)
        found = np.flatnonzero(matches[:max_rank])
        if found.size:
            hits[found[0] :] = 1.0
        curves.append(hits)
    if not curves:
        return np.zeros(max_rank)
    return 100.0 * np.mean(curves, axis=0)


# ----------------------------------------------------------------------
# End-to-end protocol
# ----------------------------------------------------------------------
def split_gallery(
    sequences: Sequence[SilhouetteSequence],
    gallery_condition: Condition,
    gallery_sequences: int,
) -> tuple[list[SilhouetteSequence], list[SilhouetteSequence]]:
    """First ``gallery_sequences`` sequence numbers of ``gallery_condition`` per identity form the gallery."""
    numbers: dict[str, set[int]] = defaultdict(set)
    for sequence in sequences:
        if sequence.condition is gallery_condition:
            numbers[sequence.id].add(sequence.seq)
    chosen = {identity: set(sorted(seqs)[:gallery_sequences]) for identity, seqs in numbers.items()}
    gallery, probes = [], []
    for sequence in sequences:
        in_gallery = sequence.condition is gallery_condition and sequence.seq in chosen.get(sequence.id, set())
        (gallery if in_gallery else probes).append(sequence)
    return gallery, probes


def embed_sequences(model: GaitModel, sequences: Sequence[SilhouetteSequence], workers: int = 1) -> EmbeddingSet:
    frames = [s.frames for s in sequences]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            vectors = list(pool.map(model.embed_sequence, frames))
    else:
        vectors = [model.embed_sequence(f) for f in frames]
    return EmbeddingSet(
        embeddings=np.stack(vectors),
        ids=np.array([s.id for s in sequences], dtype=object),
        views=np.array([s.view for s in sequences], dtype=np.int64),
        conditions=np.array([s.condition.value for s in sequences], dtype=object),
    )


def evaluate_embeddings(gallery: EmbeddingSet, probes: EmbeddingSet, config: EvalConfig) -> EvalReport:
    per_view: list[ViewAccuracy] = []
    summary: list[ConditionSummary] = []
    for condition in Condition:
        mask = probes.conditions == condition.value
        if not mask.any():
            continue
        subset = probes.subset(mask)
        distances = embed_distance(subset.embeddings, gallery.embeddings)
        views = rank1_cross_view(gallery, subset, distances)
        rows = [
            ViewAccuracy(
                condition=condition,
                view=entry.view,
                rank1=entry.rank1,
                probes=entry.probes,
                excluded=entry.excluded,
            )
            for entry in views.values()
        ]
        per_view.extend(rows)
        scored = [row.rank1 for row, entry in zip(rows, views.values()) if entry.probes]
        map_result = mean_average_precision(gallery, subset, distances)
        curve = cmc(gallery, subset, config.max_rank, distances) if config.max_rank > 1 else np.zeros(0)
        excluded = sum(entry.excluded for entry in views.values())
        if excluded:
            logger.warning("%s: %d probes had no cross-view gallery candidate", condition.value, excluded)
        summary.append(
            ConditionSummary(
                condition=condition,
                mean_rank1=float(np.mean(scored)) if scored else 0.0,
                mAP=map_result.mAP,
                probes=len(subset) - excluded,
                gallery=len(gallery),
                excluded=excluded,
                cmc=tuple(float(v) for v in curve),
            )
        )
    return EvalReport(per_view=per_view, summary=summary, max_rank=config.max_rank)


def evaluate(model: GaitModel, index: DatasetIndex, config: EvalConfig) -> EvalReport:
    test = index.split("test")
    if not test:
        raise DatasetError("the test split is empty")
    gallery_seqs, probe_seqs = split_gallery(test, config.gallery_condition, config.gallery_sequences)
    if not gallery_seqs:
        raise DatasetError(f"no {config.gallery_condition.value} sequences to build a gallery from")
    if not probe_seqs:
        raise DatasetError("every test sequence ended up in the gallery; lower gallery_sequences")
    logger.info("Evaluating %d probes against %d gallery sequences", len(probe_seqs), len(gallery_seqs))
    gallery = embed_sequences(model, gallery_seqs, config.workers)
    probes = embed_sequences(model, probe_seqs, config.workers)
    report = evaluate_embeddings(gallery, probes, config)
    for row in report.summary:
        logger.info("%s: mean rank-1 %.2f%%, mAP %.2f%%", row.condition.value, row.mean_rank1, row.mAP)
    return report
