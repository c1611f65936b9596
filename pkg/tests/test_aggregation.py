"""Tests for fedsr/aggregation.py: FedAvg and fairness-aware weighting."""

import math

import numpy as np
import pytest

from fedsr.aggregation import (
    ClientUpdate, aggregate, compute_weights, fairness_weights, fedavg_weights,
)
from fedsr.errors import InputError


def updates(p, n, dim=(2, 2), seed=0):
    rng = np.random.default_rng(seed)
    return [ClientUpdate(i, rng.normal(size=dim), n_k, p_k)
            for i, (p_k, n_k) in enumerate(zip(p, n))]


def ordered(weights):
    return [weights[k] for k in sorted(weights)]


# ------------------------------------------------------------------
# Weights
# ------------------------------------------------------------------

class TestFairnessWeights:
    def test_performance_term_example(self):
        w = ordered(fairness_weights(updates([0.2, 0.8], [5, 5]), alpha=1, beta=0))
        assert w[0] == pytest.approx(0.60250, abs=1e-5)
        assert w[1] == pytest.approx(0.39750, abs=1e-5)

    def test_size_term_example(self):
        w = ordered(fairness_weights(updates([0.3, 0.3], [1, 4]), alpha=0, beta=1))
        assert w[0] == pytest.approx(1 / 3, abs=1e-9)
        assert w[1] == pytest.approx(2 / 3, abs=1e-9)

    def test_uniform_inputs_equal_fedavg(self):
        ups = updates([0.4] * 4, [7] * 4)
        assert fairness_weights(ups, 0.5, 0.5) == fedavg_weights(ups)

    def test_zero_performance_is_uniform(self):
        w = ordered(fairness_weights(updates([0.0, 0.0, 0.0], [1, 1, 1]), 1, 0))
        assert w == [1 / 3] * 3

    def test_random_properties(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            k = int(rng.integers(2, 8))
            p = rng.uniform(0, 2, size=k).tolist()
            n = rng.integers(1, 200, size=k).tolist()
            alpha, beta = rng.uniform(0.01, 1, size=2)
            ups = updates(p, n, dim=(1, 1))
            w = fairness_weights(ups, alpha, beta)
            assert math.fsum(w.values()) == pytest.approx(1.0, abs=1e-12)
            assert all(v > 0 for v in w.values())

            scaled = fairness_weights(ups, 3 * alpha, 3 * beta)
            assert ordered(scaled) == pytest.approx(ordered(w), abs=1e-12)

            # worse performer gets strictly more performance weight
            perf = ordered(fairness_weights(ups, 1, 0))
            size = ordered(fairness_weights(ups, 0, 1))
            for i in range(k):
                for j in range(k):
                    if p[i] < p[j]:
                        assert perf[i] > perf[j]
                    if n[i] > n[j]:
                        ratio = size[i] / size[j]
                        assert ratio == pytest.approx(math.sqrt(n[i] / n[j]), rel=1e-9)
                        assert ratio < n[i] / n[j]

            order = rng.permutation(k)
            shuffled = fairness_weights([ups[i] for i in order], alpha, beta)
            assert set(shuffled) == set(w)
            for cid in w:
                assert shuffled[cid] == pytest.approx(w[cid], abs=1e-12)

    def test_sqrt_compresses_size(self):
        w = ordered(fairness_weights(updates([0.1, 0.1], [1, 100]), 0, 1))
        assert w[1] / w[0] == pytest.approx(10.0)
        raw = ordered(fedavg_weights(updates([0.1, 0.1], [1, 100])))
        assert raw[1] / raw[0] == pytest.approx(100.0)

    def test_literal_mode_skips_activations(self):
        w = ordered(fairness_weights(updates([0.2, 0.8], [1, 4]), 0.5, 0.5, literal_eq5_eq8=True))
        assert w == pytest.approx([0.5 * 0.2 + 0.5 * 0.2, 0.5 * 0.8 + 0.5 * 0.8])

    def test_rejects_bad_alpha_beta(self):
        with pytest.raises(InputError):
            fairness_weights(updates([0.1], [1]), 0, 0)
        with pytest.raises(InputError):
            fairness_weights(updates([0.1], [1]), -1, 2)


def test_fedavg_weights():
    assert ordered(fedavg_weights(updates([0, 0], [1, 3]))) == [0.25, 0.75]


def test_compute_weights_dispatch():
    ups = updates([0.2, 0.8], [1, 4])
    assert compute_weights(ups, 'fedavg') == fedavg_weights(ups)
    assert compute_weights(ups, 'fair', 0.3, 0.7) == fairness_weights(ups, 0.3, 0.7)
    with pytest.raises(InputError):
        compute_weights(ups, 'median')


def test_duplicate_client_ids():
    emb = np.zeros((1, 1))
    with pytest.raises(InputError):
        fedavg_weights([ClientUpdate(1, emb, 1, 0.1), ClientUpdate(1, emb, 2, 0.2)])


# ------------------------------------------------------------------
# Client updates
# ------------------------------------------------------------------

class TestClientUpdate:
    def test_validation(self):
        with pytest.raises(InputError):
            ClientUpdate(0, np.zeros((2, 2)), 0, 0.5)
        with pytest.raises(InputError):
            ClientUpdate(0, np.zeros((2, 2)), 3, float('nan'))
        with pytest.raises(InputError):
            ClientUpdate(0, np.array([[np.inf]]), 3, 0.5)

    def test_wire_size_matches_accounting(self):
        update = ClientUpdate(4, np.ones((100, 8)), 12, 0.7)
        assert len(update.to_bytes()) == 8 * 800 + 16


# ------------------------------------------------------------------
# Aggregation
# ------------------------------------------------------------------

class TestAggregate:
    def test_single_update_is_copied_exactly(self):
        ups = updates([0.5], [3])
        assert np.array_equal(aggregate(ups, {0: 1.0}), ups[0].embedding)

    def test_equal_sizes_give_plain_mean(self):
        ups = updates([0.1, 0.9, 0.4], [5, 5, 5])
        expected = np.mean([u.embedding for u in ups], axis=0)
        np.testing.assert_allclose(aggregate(ups, fedavg_weights(ups)), expected, atol=1e-12)

    def test_result_inside_upload_hull(self):
        ups = updates([0.1, 0.5, 0.9, 0.3], [1, 10, 4, 30], dim=(5, 3), seed=3)
        out = aggregate(ups, fairness_weights(ups, 0.5, 0.5))
        stacked = np.stack([u.embedding for u in ups])
        assert np.all(out >= stacked.min(axis=0) - 1e-12)
        assert np.all(out <= stacked.max(axis=0) + 1e-12)

    def test_weights_must_cover_updates(self):
        ups = updates([0.1, 0.2], [1, 1])
        with pytest.raises(InputError):
            aggregate(ups, {0: 1.0})

    def test_empty(self):
        with pytest.raises(InputError):
            aggregate([], {})
