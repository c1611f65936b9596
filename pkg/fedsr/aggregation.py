"""
Server-side aggregation of uploaded embedding tables.

Two weightings:
  fedavg  weight_k = n_k / sum(n)
  fair    o_k = alpha * pnorm_k + beta * qnorm_k, weight_k = o_k / sum(o)
          pnorm = normalize((1/2) ** normalize(p))   worse clients weigh more
          qnorm = normalize(sqrt(normalize(n)))      size influence compressed

With literal_eq5_eq8 the second normalisation reuses the raw shares
(pnorm = normalize(p), qnorm = normalize(n)), which bypasses both activations.
It exists only for comparison runs.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

from fedsr.errors import InputError
from fedsr.seqmodel import params_axpy

AGGREGATORS = ('fedavg', 'fair')


@dataclass
class ClientUpdate:
    """What one participant uploads: its embedding table, n_k and p_k."""
    client_id: int
    embedding: np.ndarray
    n_k: int
    p_k: float

    def __post_init__(self):
        if self.n_k < 1:
            raise InputError(f'client {self.client_id}: n_k must be >= 1, got {self.n_k}')
        if not math.isfinite(self.p_k) or self.p_k < 0:
            raise InputError(f'client {self.client_id}: p_k must be finite and >= 0, got {self.p_k}')
        if not np.all(np.isfinite(self.embedding)):
            raise InputError(f'client {self.client_id}: embedding contains NaN or Inf')

    def to_bytes(self):
        """Wire form: float64 embedding entries, then int64 n_k and float64 p_k."""
        body = np.ascontiguousarray(self.embedding, dtype='<f8').tobytes()
        return body + struct.pack('<qd', self.n_k, self.p_k)


def _normalize(values):
    values = [float(v) for v in values]
    if all(v == values[0] for v in values):
        return [1.0 / len(values)] * len(values)
    total = math.fsum(values)
    return [v / total for v in values]


def _as_weights(updates, values):
    return {u.client_id: w for u, w in zip(updates, _normalize(values))}


def _check_updates(updates):
    if not updates:
        raise InputError('need at least one client update')
    ids = [u.client_id for u in updates]
    if len(set(ids)) != len(ids):
        raise InputError(f'duplicate client ids in updates: {sorted(ids)}')


def fedavg_weights(updates):
    _check_updates(updates)
    return _as_weights(updates, [u.n_k for u in updates])


def fairness_weights(updates, alpha, beta, literal_eq5_eq8=False):
    """Performance-inverted and size-compressed blend, normalised to sum 1."""
    _check_updates(updates)
    if alpha < 0 or beta < 0 or alpha + beta <= 0:
        raise InputError(f'need alpha, beta >= 0 and alpha + beta > 0 (got {alpha}, {beta})')

    perf = [u.p_k for u in updates]
    if math.fsum(perf) == 0:
        # nobody evaluated yet
        p_hat = [1.0 / len(updates)] * len(updates)
    elif literal_eq5_eq8:
        p_hat = _normalize(perf)
    else:
        p_hat = _normalize(0.5 ** p for p in _normalize(perf))

    q = _normalize(u.n_k for u in updates)
    q_hat = q if literal_eq5_eq8 else _normalize(math.sqrt(x) for x in q)

    blended = [alpha * p + beta * s for p, s in zip(p_hat, q_hat)]
    return _as_weights(updates, blended)


def compute_weights(updates, aggregator, alpha=0.5, beta=0.5, literal_eq5_eq8=False):
    if aggregator == 'fedavg':
        return fedavg_weights(updates)
    if aggregator == 'fair':
        return fairness_weights(updates, alpha, beta, literal_eq5_eq8)
    raise InputError(f'unknown aggregator {aggregator!r}; expected one of {AGGREGATORS}')


def aggregate(updates, weights):
    """Weighted sum of uploaded embeddings, reduced in client-id order."""
    _check_updates(updates)
    ids = {u.client_id for u in updates}
    if ids != set(weights):
        raise InputError(
            f'weights cover {sorted(weights)} but updates come from {sorted(ids)}')
    ordered = sorted(updates, key=lambda u: u.client_id)
    total = np.zeros_like(ordered[0].embedding, dtype=np.float64)
    for update in ordered:
        total = params_axpy(total, update.embedding, weights[update.client_id])
    return total
