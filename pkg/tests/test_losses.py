"""Tests for the triplet and cross-entropy objectives."""

import itertools
import math

import numpy as np
import pytest

from app.services.gradcheck import grad_check
from app.services.losses import (
    DISTANCE_FLOOR,
    cross_entropy,
    pairwise_distances,
    total_loss,
    triplet_loss,
    valid_triplet_mask,
)
from app.services.tensor import Tensor, parameter


def _brute_force_triplet(embeddings: np.ndarray, labels: np.ndarray, margin: float) -> float:
    def distance(i, j):
        return math.sqrt(max(float(np.sum((embeddings[i] - embeddings[j]) ** 2)), DISTANCE_FLOOR))

    losses = []
    for a, p, n in itertools.product(range(len(labels)), repeat=3):
        if a == p or labels[a] != labels[p] or labels[a] == labels[n]:
            continue
        losses.append(max(0.0, distance(a, p) - distance(a, n) + margin))
    active = [value for value in losses if value > 0]
    return sum(active) / len(active) if active else 0.0


class TestTripletLoss:
    """Batch-all triplet hinge."""

    def test_identical_embeddings_cost_the_margin(self):
        """Collapsed embeddings make every triplet cost exactly the margin."""
        embeddings = Tensor(np.ones((4, 3)))
        loss, active = triplet_loss(embeddings, np.array([0, 0, 1, 1]), margin=0.2)
        assert loss.item() == pytest.approx(0.2, abs=1e-12)
        assert active == 8

    def test_separated_identities_cost_nothing(self):
        """Identities further apart than the margin give zero loss and no active triplets."""
        embeddings = Tensor(np.array([[0.0], [0.1], [1.0], [1.1]]))
        loss, active = triplet_loss(embeddings, np.array([0, 0, 1, 1]), margin=0.2)
        assert loss.item() == 0.0
        assert active == 0

    def test_matches_brute_force(self, rng):
        """The loss equals the mean over active triplets from a direct loop."""
        for _ in range(5):
            embeddings = rng.normal(size=(8, 3)) * 0.3
            labels = np.array([0, 0, 1, 1, 2, 2, 3, 3])
            loss, _ = triplet_loss(Tensor(embeddings), labels, margin=0.5)
            assert loss.item() == pytest.approx(_brute_force_triplet(embeddings, labels, 0.5), abs=1e-10)

    def test_single_identity_rejected(self):
        """A batch needs at least two identities."""
        with pytest.raises(ValueError):
            triplet_loss(Tensor(np.ones((3, 2))), np.array([1, 1, 1]), margin=0.2)

    def test_mask_counts_valid_triplets(self):
        """Two pairs of two give eight valid triplets and none with a == p."""
        mask = valid_triplet_mask(np.array([0, 0, 1, 1]))
        assert mask.sum() == 8
        assert mask[0, 0].sum() == 0

    def test_distance_of_identical_rows_is_floored(self):
        """Zero distances are floored so the square root stays differentiable."""
        distances = pairwise_distances(Tensor(np.zeros((2, 3))))
        np.testing.assert_allclose(distances.data, math.sqrt(DISTANCE_FLOOR))

    def test_gradient_matches_finite_differences(self, rng):
        """Triplet gradients agree with central differences."""
        embeddings = parameter(rng.normal(size=(6, 3)))
        labels = np.array([0, 0, 1, 1, 2, 2])
        result = grad_check(lambda: triplet_loss(embeddings, labels, margin=1.0)[0], [embeddings])
        assert result.max_error < 1e-6


class TestCrossEntropy:
    """Softmax cross-entropy averaged over the batch."""

    def test_uniform_logits(self):
        """Equal logits over five classes cost log 5."""
        loss = cross_entropy(Tensor(np.zeros((3, 5))), np.array([0, 2, 4]))
        assert loss.item() == pytest.approx(math.log(5), abs=1e-12)

    def test_confident_correct_logits(self):
        """Large correct margins cost almost nothing."""
        logits = np.full((2, 3), -50.0)
        logits[0, 1] = 50.0
        logits[1, 0] = 50.0
        assert cross_entropy(Tensor(logits), np.array([1, 0])).item() < 1e-12


class TestTotalLoss:
    """Per-part sum of both objectives."""

    def test_sums_parts(self, rng):
        """Both objectives are summed over parts, then added."""
        embeddings = rng.normal(size=(4, 2, 3))
        labels = np.array([0, 0, 1, 1])
        classifiers = [Tensor(rng.normal(size=(2, 3))) for _ in range(2)]
        breakdown = total_loss(Tensor(embeddings), labels, classifiers, margin=0.2)

        expected_tri = sum(triplet_loss(Tensor(embeddings[:, b]), labels, 0.2)[0].item() for b in range(2))
        expected_ce = sum(
            cross_entropy(Tensor(embeddings[:, b] @ classifiers[b].data.T), labels).item() for b in range(2)
        )
        assert breakdown.triplet.item() == pytest.approx(expected_tri, abs=1e-12)
        assert breakdown.cross_entropy.item() == pytest.approx(expected_ce, abs=1e-12)
        assert breakdown.total.item() == pytest.approx(expected_tri + expected_ce, abs=1e-12)

    def test_classifier_count_must_match_parts(self, rng):
        """One classifier per part is required."""
        with pytest.raises(ValueError):
            total_loss(Tensor(rng.normal(size=(4, 2, 3))), np.array([0, 0, 1, 1]), [Tensor(np.ones((2, 3)))], 0.2)
