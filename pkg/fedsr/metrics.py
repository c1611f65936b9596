"""
Ranking metrics, fairness variance, convergence detection and byte accounting.

Each evaluation ranks the held-out item against its 100 negatives. Ties count
against the target, so a constant scorer always ranks it last (101).
"""

import math
from dataclasses import dataclass

import numpy as np

from fedsr.errors import InputError

BYTES_PER_ENTRY = 8
METADATA_BYTES = 16   # n_k and p_k, 8 bytes each


@dataclass
class EvalOutcome:
    client_id: int
    rank: int
    hr5: float
    ndcg5: float
    hr10: float
    ndcg10: float

    @property
    def performance(self):
        """p = HR@10 + NDCG@10, the per-client score used for weighting and fairness."""
        return self.hr10 + self.ndcg10

    def as_dict(self):
        return {
            'client_id': self.client_id, 'rank': self.rank,
            'hr5': self.hr5, 'ndcg5': self.ndcg5,
            'hr10': self.hr10, 'ndcg10': self.ndcg10,
        }


@dataclass
class FairnessReport:
    scores: dict      # client-id -> p_i
    variance: float


# ---------------------------------------------------------------------------
# Ranking
# ---------------------------------------------------------------------------

def rank_of_target(scores, target_index=0):
    """1 + number of other candidates scoring >= the target (pessimistic ties)."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise InputError('scores contain NaN or Inf')
    if not 0 <= target_index < scores.size:
        raise InputError(f'target_index {target_index} outside [0, {scores.size})')
    target = scores[target_index]
    others = np.delete(scores, target_index)
    return 1 + int(np.count_nonzero(others >= target))


def hr_ndcg(rank, k):
    if rank < 1:
        raise InputError(f'rank must be >= 1, got {rank}')
    if rank > k:
        return 0, 0.0
    return 1, 1.0 / math.log2(rank + 1)


def evaluate_scores(client_id, scores, target_index=0):
    rank = rank_of_target(scores, target_index)
    hr5, ndcg5 = hr_ndcg(rank, 5)
    hr10, ndcg10 = hr_ndcg(rank, 10)
    return EvalOutcome(client_id, rank, float(hr5), ndcg5, float(hr10), ndcg10)


def summarize(outcomes):
    """Mean HR@5/NDCG@5/HR@10/NDCG@10 over outcomes (sorted by client-id)."""
    ordered = sorted(outcomes, key=lambda o: o.client_id)
    if not ordered:
        return {'hr5': 0.0, 'ndcg5': 0.0, 'hr10': 0.0, 'ndcg10': 0.0}
    return {
        name: math.fsum(getattr(o, name) for o in ordered) / len(ordered)
        for name in ('hr5', 'ndcg5', 'hr10', 'ndcg10')
    }


# ---------------------------------------------------------------------------
# Fairness
# ---------------------------------------------------------------------------

def fairness_variance(scores):
    """Population variance of per-client scores; exactly 0 when all are equal."""
    values = [float(s) for s in scores]
    if not values:
        raise InputError('fairness_variance needs at least one score')
    if max(values) == min(values):
        return 0.0
    mean = math.fsum(values) / len(values)
    return math.fsum((v - mean) ** 2 for v in values) / len(values)


def fairness_report(outcomes):
    ordered = sorted(outcomes, key=lambda o: o.client_id)
    scores = {o.client_id: o.performance for o in ordered}
    return FairnessReport(scores, fairness_variance(scores.values()) if scores else 0.0)


# ---------------------------------------------------------------------------
# Convergence
# ---------------------------------------------------------------------------

def convergence_round(history, patience=5, tol=0.0):
    """First round r after which *patience* rounds never beat the best-so-far by > tol.

    Returns None when the series ends before any such window completes.
    """
    best = -math.inf
    for r, value in enumerate(history):
        best = max(best, value)
        window = history[r + 1:r + 1 + patience]
        if len(window) < patience:
            return None
        if all(v <= best + tol for v in window):
            return r
    return None


# ---------------------------------------------------------------------------
# Communication
# ---------------------------------------------------------------------------

def bytes_transmitted(report):
    """Download + upload of the embedding per participant, plus upload metadata.

    Rounds that exchange nothing (the centralized baseline) cost 0 bytes.
    """
    if not report.federated:
        return 0
    participants = len(report.participants)
    per_client = 2 * BYTES_PER_ENTRY * report.embedding_entries + METADATA_BYTES
    return participants * per_client
