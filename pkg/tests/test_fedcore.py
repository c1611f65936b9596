"""Tests for fedsr/fedcore.py: round loop, experiments, centralized baseline."""

import dataclasses
import json

import numpy as np
import pytest

from fedsr import aggregation
from fedsr.aggregation import ClientUpdate, aggregate, fairness_weights, fedavg_weights
from fedsr.errors import ConfigError
from fedsr.fedcore import (
    ExperimentData, RoundReport, RunConfig, ServerState, convergence_of, evaluate_test,
    evaluate_validation, init_clients, run_central, run_experiment, run_round,
)
from fedsr.metrics import convergence_round, evaluate_scores
from fedsr.seeding import derive_seed
from fedsr.selection import kmeans, proportional_sample, represent
from fedsr.seqmodel import fit_sequence, forward, init_params, score


def fresh_server(clients, config):
    return ServerState(embedding=clients[0].params.embedding.copy(), root_seed=config.seed)


def subset(data, count):
    return ExperimentData(data.log, data.clients[:count], data.fingerprint, data.stats)


# ------------------------------------------------------------------
# Configuration
# ------------------------------------------------------------------

class TestRunConfig:
    def test_defaults(self):
        config = RunConfig().validate()
        assert (config.clients_per_round, config.total_rounds, config.lr, config.dropout) == (128, 200, 0.001, 0.3)
        assert config.patience == 5

    @pytest.mark.parametrize("change", [
        {'algorithm': 'fedprox'},
        {'v1': 10, 'v2': 10},
        {'dropout': 1.0},
        {'clients_per_round': 0},
        {'alpha': 0.0, 'beta': 0.0},
        {'aggregator': 'median'},
        {'gamma': 1.5},
    ])
    def test_rejects(self, change):
        with pytest.raises(ConfigError):
            RunConfig(**change).validate()

    @pytest.mark.parametrize("algorithm,selection,aggregator,personalizes", [
        ('cf_fedsr', True, 'fair', True),
        ('fedavg', False, 'fedavg', False),
        ('variation1', False, 'fair', True),
        ('variation2', True, 'fedavg', True),
        ('variation3', True, 'fair', False),
    ])
    def test_algorithm_flags(self, algorithm, selection, aggregator, personalizes):
        config = RunConfig(algorithm=algorithm)
        assert config.uses_selection is selection
        assert config.effective_aggregator == aggregator
        assert config.personalizes is personalizes

    def test_aggregator_override(self):
        assert RunConfig(algorithm='fedavg', aggregator='fair').effective_aggregator == 'fair'


# ------------------------------------------------------------------
# One round
# ------------------------------------------------------------------

class TestRunRound:
    def test_single_participant_becomes_global(self, toy_data, small_config):
        config = dataclasses.replace(small_config, algorithm='fedavg', clients_per_round=1)
        clients = init_clients(toy_data, config)
        server, report = run_round(fresh_server(clients, config), clients, config)
        (cid,) = report.participants
        winner = next(c for c in clients if c.client_id == cid)
        assert report.weights == {cid: 1.0}
        assert np.array_equal(server.embedding, winner.params.embedding)

    def test_fedavg_is_size_weighted_mean(self, toy_data, small_config):
        config = dataclasses.replace(small_config, algorithm='fedavg')
        clients = init_clients(toy_data, config)
        server, report = run_round(fresh_server(clients, config), clients, config)
        by_id = {c.client_id: c for c in clients}
        total = sum(by_id[cid].n_k for cid in report.participants)
        expected = sum(by_id[cid].n_k / total * by_id[cid].params.embedding
                       for cid in report.participants)
        np.testing.assert_allclose(server.embedding, expected, atol=1e-12)

    def test_matches_scripted_composition(self, toy_data, small_config):
        config = dataclasses.replace(small_config, lambda1=0, clients_per_round=3)
        data = subset(toy_data, 5)
        clients = init_clients(data, config)
        start = fresh_server(clients, config)
        server, report = run_round(start, clients, config)

        manual = init_clients(data, config)
        by_id = {c.client_id: c for c in manual}
        reps = [represent(c, start.embedding, config.v1, config.v2) for c in manual]
        clustering = kmeans([r.vector for r in reps], config.k, config.kmeans_max_iter,
                            derive_seed(config.seed, 'kmeans', 0), ids=[r.client_id for r in reps])
        chosen = proportional_sample(clustering, config.clients_per_round,
                                     derive_seed(config.seed, 'sample', 0))
        round_seed = derive_seed(config.seed, 'round', 1)
        uploads = []
        for cid in chosen:
            c = by_id[cid]
            params, _, _ = fit_sequence(
                c.params.with_embedding(start.embedding), c.opt_state, c.dataset.train_sequence,
                config.local_epochs, config.lr, 'adam', config.dropout,
                derive_seed(round_seed, 'train', cid), config.train_negatives, config.max_seq_len)
            hidden = forward(params, c.dataset.train_sequence)
            scores = score(params, hidden, [c.dataset.valid_target] + list(c.dataset.valid_negatives))
            outcome = evaluate_scores(cid, scores)
            uploads.append(ClientUpdate(cid, params.embedding, c.n_k, outcome.performance))
        weights = fairness_weights(uploads, config.alpha, config.beta)

        assert report.participants == chosen
        assert report.weights == weights
        assert np.array_equal(server.embedding, aggregate(uploads, weights))

    def test_bookkeeping(self, toy_data, small_config):
        config = dataclasses.replace(small_config, clients_per_round=2, lambda1=0)
        clients = init_clients(toy_data, config)
        server = fresh_server(clients, config)
        previous = 0
        for expected_round in range(1, 4):
            before = server.embedding.copy()
            server, report = run_round(server, clients, config)
            assert report.round == server.round == expected_round
            assert 0 < len(report.participants) <= config.clients_per_round
            assert {c.rounds_elapsed for c in clients} == {expected_round}
            assert report.cumulative_bytes > previous
            previous = report.cumulative_bytes
            assert report.bytes == len(report.participants) * (16 * before.size + 16)
        assert len(server.history) == 3

    def test_no_eligible_clients_is_a_no_op(self, toy_data, small_config):
        config = dataclasses.replace(small_config, lambda1=10_000, lambda2=10_000)
        clients = init_clients(toy_data, config)
        start = fresh_server(clients, config)
        server, report = run_round(start, clients, config)
        assert report.participants == [] and report.bytes == 0
        assert report.note
        assert np.array_equal(server.embedding, start.embedding)
        assert all(c.rounds_elapsed == 1 for c in clients)

    def test_ten_rounds_leak_no_item_sequences(self, toy_data, small_config, monkeypatch):
        config = dataclasses.replace(small_config, lambda1=0, total_rounds=10)
        uploads = []
        real_aggregate = aggregation.aggregate

        def recording_aggregate(updates, weights):
            uploads.extend(updates)
            return real_aggregate(updates, weights)

        monkeypatch.setattr(aggregation, 'aggregate', recording_aggregate)
        result = run_experiment(config, toy_data)
        assert len(result.rounds) == 10 and uploads

        ids = {c.client_id for c in toy_data.clients}
        blobs = [u.to_bytes() for u in uploads]
        texts = [json.dumps(r.as_dict()) for r in result.rounds]
        for report in result.rounds:
            assert set(report.participants) <= ids
            assert set(report.weights) <= ids and set(report.scores) <= ids

        # longer than any participant list, so a match can only be a leak
        checked = 0
        for c in toy_data.clients:
            for seq in (c.train_sequence, c.valid_negatives):
                if len(seq) <= config.clients_per_round:
                    continue
                checked += 1
                for dtype in ('<i8', '<i4'):
                    raw = np.asarray(seq, dtype=dtype).tobytes()
                    assert not any(raw in blob for blob in blobs)
                    assert not any(raw in t.encode() for t in texts)
                assert not any(json.dumps(list(seq)) in t for t in texts)
        assert checked >= len(toy_data.clients)
        assert {f.name for f in dataclasses.fields(ClientUpdate)} == {'client_id', 'embedding', 'n_k', 'p_k'}

    def test_parallel_round_matches_sequential(self, toy_data, small_config):
        results = []
        for workers in (1, 3):
            config = dataclasses.replace(small_config, lambda1=0, workers=workers)
            clients = init_clients(toy_data, config)
            server, report = run_round(fresh_server(clients, config), clients, config)
            results.append((server.embedding, report.as_dict()))
        assert np.array_equal(results[0][0], results[1][0])
        assert results[0][1] == results[1][1]

    def test_full_evaluation_covers_all_clients(self, toy_data, small_config):
        config = dataclasses.replace(small_config, lambda1=0, clients_per_round=1, full_eval_every=1)
        clients = init_clients(toy_data, config)
        server, report = run_round(fresh_server(clients, config), clients, config)
        assert len(report.participants) == 1
        assert report.validated_all
        expected = [evaluate_validation(c.params.with_embedding(server.embedding), c.dataset,
                                        config.max_seq_len).hr10 for c in clients]
        assert report.val_hr10 == pytest.approx(sum(expected) / len(expected))

    def test_participant_only_validation_is_not_marked(self, toy_data, small_config):
        config = dataclasses.replace(small_config, lambda1=0)
        clients = init_clients(toy_data, config)
        _, report = run_round(fresh_server(clients, config), clients, config)
        assert not report.validated_all


def stub_report(round_no, hr10, validated_all, participants=(1,)):
    return RoundReport(round=round_no, participants=list(participants), eligible=1,
                       weights={}, scores={}, val_hr10=hr10, validated_all=validated_all)


class TestConvergenceOf:
    def test_tracks_fully_validated_rounds_only(self):
        # participant-only rounds jump around; the all-client series peaks at round 2
        reports = [stub_report(1, 0.2, True), stub_report(2, 0.5, True),
                   stub_report(3, 0.9, False), stub_report(4, 0.4, True),
                   stub_report(5, 0.95, False), stub_report(6, 0.45, True)]
        assert convergence_of(reports, patience=2) == 2

    def test_skips_empty_rounds(self):
        reports = [stub_report(1, 0.0, False, participants=()),
                   stub_report(2, 0.3, False), stub_report(3, 0.2, False)]
        assert convergence_of(reports, patience=1) == 2

    def test_early_stop_reads_all_client_series(self, toy_data, small_config):
        config = dataclasses.replace(small_config, lambda1=0, early_stop=True, patience=1,
                                     total_rounds=30, full_eval_every=1)
        result = run_experiment(config, toy_data)
        assert all(r.validated_all for r in result.rounds)
        idx = convergence_round([r.val_hr10 for r in result.rounds], patience=1)
        expected = None if idx is None else result.rounds[idx].round
        assert result.summary['convergence_round'] == expected


# ------------------------------------------------------------------
# Experiments
# ------------------------------------------------------------------

class TestRunExperiment:
    def test_zero_rounds_evaluates_untrained_model(self, toy_data, small_config):
        config = dataclasses.replace(small_config, total_rounds=0)
        result = run_experiment(config, toy_data)
        assert result.rounds == []
        start = init_params(toy_data.log.num_items, config.d, derive_seed(config.seed, 'init'))
        expected = [evaluate_test(start, c, config.max_seq_len) for c in toy_data.clients]
        assert result.outcomes == expected
        assert result.summary['cumulative_bytes'] == 0
        assert result.summary['convergence_round'] is None

    def test_deterministic(self, toy_data, small_config):
        a = run_experiment(small_config, toy_data)
        b = run_experiment(small_config, toy_data)
        assert a.summary == b.summary
        assert [r.as_dict() for r in a.rounds] == [r.as_dict() for r in b.rounds]
        assert a.outcomes == b.outcomes

    def test_summary_matches_outcomes(self, toy_data, small_config):
        result = run_experiment(small_config, toy_data)
        assert len(result.outcomes) == len(toy_data.clients)
        hr10 = sum(o.hr10 for o in result.outcomes) / len(result.outcomes)
        assert result.summary['hr10'] == pytest.approx(hr10)
        assert result.summary['rounds_executed'] == len(result.rounds) == small_config.total_rounds

    def test_variation2_uses_fedavg_weights_and_cf_fedsr_sampling(self, toy_data, small_config):
        base = dataclasses.replace(small_config, lambda1=0, clients_per_round=3)
        cf = run_experiment(dataclasses.replace(base, algorithm='cf_fedsr'), toy_data)
        var2 = run_experiment(dataclasses.replace(base, algorithm='variation2'), toy_data)
        assert cf.rounds[0].participants == var2.rounds[0].participants
        n_k = {c.client_id: len(c.train_sequence) for c in toy_data.clients}
        for report in var2.rounds:
            ups = [ClientUpdate(cid, np.zeros((1, 1)), n_k[cid], 0.0) for cid in report.participants]
            assert report.weights == fedavg_weights(ups)

    def test_early_stop(self, toy_data, small_config):
        config = dataclasses.replace(small_config, early_stop=True, patience=1, total_rounds=60)
        result = run_experiment(config, toy_data)
        assert result.summary['stopped_early']
        assert len(result.rounds) < 60
        assert result.summary['convergence_round'] is not None


class TestRunCentral:
    def test_single_client_matches_fedavg(self, toy_data, small_config):
        data = subset(toy_data, 1)
        central = run_experiment(dataclasses.replace(small_config, algorithm='central'), data)
        fedavg = run_experiment(dataclasses.replace(small_config, algorithm='fedavg'), data)
        assert central.outcomes == fedavg.outcomes
        assert [r.val_hr10 for r in central.rounds] == [r.val_hr10 for r in fedavg.rounds]

    def test_costs_no_bytes_and_is_deterministic(self, toy_data, small_config):
        config = dataclasses.replace(small_config, algorithm='central')
        a = run_central(config, toy_data)
        b = run_central(config, toy_data)
        assert a.summary == b.summary
        assert all(r.bytes == 0 for r in a.rounds)
        assert all(len(r.participants) <= config.clients_per_round for r in a.rounds)


# ------------------------------------------------------------------
# Seed derivation
# ------------------------------------------------------------------

class TestDeriveSeed:
    def test_fits_in_32_bits(self):
        seeds = [derive_seed(root, 'round', t, 'train', cid)
                 for root in (0, 1, 2 ** 40) for t in range(20) for cid in range(20)]
        assert all(0 <= s < 2 ** 32 for s in seeds)
        assert max(seeds) >= 2 ** 31

    def test_keyed_by_every_part(self):
        assert derive_seed(1, 'train', 3) == derive_seed(1, 'train', 3)
        assert derive_seed(1, 'train', 3) != derive_seed(1, 'train', 4)
        assert derive_seed(1, 'train', 3) != derive_seed(2, 'train', 3)
