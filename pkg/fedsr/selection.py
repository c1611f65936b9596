"""
Client eligibility, interest-based representations, k-means and sampling.

A client is eligible once it holds at least lambda1 training samples or
lambda2 global rounds have elapsed. Eligible clients are represented by
the mean embedding of their last v1 items (short-term interest) concatenated
with the mean of their last v2 items (long-term interest), clustered with
k-means, and sampled proportionally to cluster size.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from fedsr.errors import InputError

log = logging.getLogger(__name__)


@dataclass
class ClientRepresentation:
    client_id: int
    vector: np.ndarray   # [2d] short-term mean || long-term mean


@dataclass
class Clustering:
    assignments: dict            # client-id -> cluster index
    centroids: np.ndarray        # [k, 2d]
    inertia: float
    inertia_history: list = field(default_factory=list)

    @property
    def k(self):
        return len(self.centroids)

    def members(self):
        """Sorted client-ids per cluster index."""
        groups = [[] for _ in range(self.k)]
        for cid, idx in sorted(self.assignments.items()):
            groups[idx].append(cid)
        return groups


# ---------------------------------------------------------------------------
# Eligibility
# ---------------------------------------------------------------------------

def eligible(client, lambda1, lambda2):
    """True iff the client holds >= lambda1 samples or >= lambda2 rounds have elapsed."""
    return client.n_k >= lambda1 or client.rounds_elapsed >= lambda2


# ---------------------------------------------------------------------------
# Representation
# ---------------------------------------------------------------------------

def represent(client, embedding_table, v1, v2):
    """Short-term || long-term interest vector from the client's own sequence."""
    if not v2 > v1 >= 1:
        raise InputError(f'need v2 > v1 >= 1, got v1={v1}, v2={v2}')
    seq = np.asarray(client.dataset.train_sequence, dtype=np.int64)
    if seq.size == 0:
        raise InputError(f'client {client.client_id} has an empty training sequence')
    table = np.asarray(embedding_table, dtype=np.float64)
    short = table[seq[-v1:]].mean(axis=0)
    long_ = table[seq[-v2:]].mean(axis=0)
    return ClientRepresentation(client.client_id, np.concatenate([short, long_]))


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

def _sq_distances(points, centroids):
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp(points, k, rng):
    n = len(points)
    chosen = [int(rng.integers(n))]
    closest = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # every point sits on a centroid already; pick any unused index
            remaining = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(remaining))
        chosen.append(idx)
        closest = np.minimum(closest, ((points - points[idx]) ** 2).sum(axis=1))
    return points[chosen].copy()


def _repair_empty(points, labels, centroids):
    """Give each empty cluster the farthest point of the currently largest cluster."""
    k = len(centroids)
    for empty in range(k):
        if np.any(labels == empty):
            continue
        counts = np.bincount(labels, minlength=k)
        donor = int(np.argmax(counts))
        members = np.flatnonzero(labels == donor)
        dist = ((points[members] - centroids[donor]) ** 2).sum(axis=1)
        moved = members[int(np.argmax(dist))]
        labels[moved] = empty
        centroids[empty] = points[moved]
    return labels


def _inertia(points, labels, centroids):
    return float(((points - centroids[labels]) ** 2).sum())


def kmeans(points, k, max_iter=50, seed=0, ids=None):
    """k-means++ seeding then Lloyd iterations until assignments stop changing.

    *ids* names each point (defaults to 0..n-1) and keys the assignments.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) == 0:
        raise InputError('kmeans needs a non-empty 2-D array of points')
    if k < 1:
        raise InputError(f'k must be >= 1, got {k}')
    if k > len(pts):
        raise InputError(f'k={k} exceeds the number of points ({len(pts)})')
    ids = list(range(len(pts))) if ids is None else list(ids)

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(pts, k, rng)
    labels = None
    history = []
    for _ in range(max_iter):
        new_labels = np.argmin(_sq_distances(pts, centroids), axis=1)
        new_labels = _repair_empty(pts, new_labels, centroids)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        centroids = np.stack([pts[labels == c].mean(axis=0) for c in range(k)])
        history.append(_inertia(pts, labels, centroids))

    if labels is None:
        labels = np.argmin(_sq_distances(pts, centroids), axis=1)
        history.append(_inertia(pts, labels, centroids))

    return Clustering(
        assignments={cid: int(c) for cid, c in zip(ids, labels)},
        centroids=centroids,
        inertia=history[-1],
        inertia_history=history,
    )


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def largest_remainder(sizes, budget):
    """Apportion *budget* across *sizes*; remainders ties go to the lower index."""
    total = sum(sizes)
    quotas = [budget * s // total for s in sizes]
    remainders = [budget * s % total for s in sizes]
    leftover = budget - sum(quotas)
    for idx in sorted(range(len(sizes)), key=lambda i: (-remainders[i], i))[:leftover]:
        quotas[idx] += 1
    return quotas


def proportional_sample(clustering, budget, seed):
    """Sample min(budget, |eligible|) clients, per-cluster quotas by largest remainder."""
    if budget < 1:
        raise InputError(f'budget must be >= 1, got {budget}')
    if not clustering.assignments:
        raise InputError('cannot sample from an empty clustering')
    groups = clustering.members()
    population = sum(len(g) for g in groups)
    if budget >= population:
        return sorted(clustering.assignments)

    rng = np.random.default_rng(seed)
    quotas = largest_remainder([len(g) for g in groups], budget)
    picked = []
    for group, quota in zip(groups, quotas):
        if quota:
            picked.extend(int(c) for c in rng.choice(group, size=quota, replace=False))
    log.debug('Cluster quotas %s for budget %d', quotas, budget)
    return sorted(picked)


def uniform_sample(client_ids, budget, seed):
    """Uniform sample without replacement; everything when budget covers it."""
    ids = sorted(client_ids)
    if budget < 1:
        raise InputError(f'budget must be >= 1, got {budget}')
    if budget >= len(ids):
        return ids
    rng = np.random.default_rng(seed)
    return sorted(int(c) for c in rng.choice(ids, size=budget, replace=False))
