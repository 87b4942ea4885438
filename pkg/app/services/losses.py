"""Batch-all triplet loss and softmax cross-entropy on per-part embeddings."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from app.services.tensor import (
    Tensor,
    clamp_min,
    dense,
    log_softmax,
    reduce,
    relu,
    sqrt,
)

logger = logging.getLogger(__name__)

DISTANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class LossBreakdown:
    triplet: Tensor
    cross_entropy: Tensor
    total: Tensor
    active_triplets: int


def valid_triplet_mask(labels: np.ndarray) -> np.ndarray:
    """``mask[a, p, n]`` is 1 when ``a != p`` share a label and ``n`` has another label."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    distinct = ~np.eye(len(labels), dtype=bool)
    positive = same & distinct
    negative = ~same
    return (positive[:, :, None] & negative[:, None, :]).astype(np.float64)


def pairwise_distances(embeddings: Tensor) -> Tensor:
    """Euclidean distance matrix of ``(n, E)`` embeddings."""
    n, e = embeddings.shape
    diff = embeddings.reshape(n, 1, e) - embeddings.reshape(1, n, e)
    squared = reduce(diff * diff, "sum", (2,)).reshape(n, n)
    return sqrt(clamp_min(squared, DISTANCE_FLOOR))


def triplet_loss(embeddings: Tensor, labels: np.ndarray, margin: float) -> tuple[Tensor, int]:
    """Batch-all hinge ``relu(d_ap - d_an + margin)`` averaged over non-zero triplets."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("triplet loss needs at least two identities in the batch")
    n = embeddings.shape[0]
    distances = pairwise_distances(embeddings)
    gaps = distances.reshape(n, n, 1) - distances.reshape(n, 1, n) + margin
    hinge = relu(gaps) * Tensor(valid_triplet_mask(labels))
    active = int(np.count_nonzero(hinge.data > 0))
    total = reduce(hinge, "sum", (0, 1, 2)).reshape(())
    if active == 0:
        return total, 0
    return total / float(active), active


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    n, classes = logits.shape
    onehot = np.zeros((n, classes))
    onehot[np.arange(n), np.asarray(labels)] = 1.0
    picked = reduce(log_softmax(logits) * Tensor(onehot), "sum", (0, 1)).reshape(())
    return -picked / float(n)


def total_loss(
    embeddings: Tensor,
    labels: np.ndarray,
    classifiers: Sequence[Tensor],
    margin: float,
) -> LossBreakdown:
    """Sum over parts of triplet + cross-entropy; ``embeddings`` is ``(n, bins, E)``."""
    n, bins, _ = embeddings.shape
    if len(classifiers) != bins:
        raise ValueError(f"need one classifier per part: {len(classifiers)} heads for {bins} parts")
    triplet_terms = []
    ce_terms = []
    active = 0
    for part in range(bins):
        part_embeddings = embeddings[:, part, :]
        tri, count = triplet_loss(part_embeddings, labels, margin)
        triplet_terms.append(tri)
        active += count
        ce_terms.append(cross_entropy(dense(part_embeddings, classifiers[part]), labels))
    triplet = _sum(triplet_terms)
    ce = _sum(ce_terms)
    return LossBreakdown(triplet=triplet, cross_entropy=ce, total=triplet + ce, active_triplets=active)


def _sum(terms: Sequence[Tensor]) -> Tensor:
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total
