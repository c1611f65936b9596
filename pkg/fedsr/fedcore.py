"""
Federation engine: round loop, full experiments and the centralized baseline.

One round:
  1. eligibility filter (cf_fedsr, variation2, variation3)
  2. representations + k-means + proportional sampling, or uniform sampling
  3. broadcast the global embedding to participants
  4. local Adam training, then validation p_k = HR@10 + NDCG@10
  5. upload ClientUpdate (embedding, n_k, p_k)
  6. fair or FedAvg weights, aggregate into the new global embedding
  7. RoundReport with participants, weights, metrics and bytes

Every random draw is keyed by (seed, purpose, round, client-id), so results
are identical for any worker count.

Usage:
    from fedsr.fedcore import RunConfig, prepare, run_experiment

    config = RunConfig(algorithm='cf_fedsr', total_rounds=50, d=16)
    data = prepare(DatasetConfig(), seed=config.seed)
    result = run_experiment(config, data)
"""

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from fedsr import aggregation, metrics, personalization, selection
from fedsr.dataio import build_clients, dataset_fingerprint, describe, load_dataset
from fedsr.errors import ConfigError
from fedsr.seeding import derive_seed
from fedsr.seqmodel import fit_sequence, forward, init_optimizer, init_params, score

log = logging.getLogger(__name__)

ALGORITHMS = ('cf_fedsr', 'fedavg', 'central', 'variation1', 'variation2', 'variation3')

# algorithm -> (selection + clustering, aggregator, personalization)
ALGORITHM_FLAGS = {
    'cf_fedsr':   (True,  'fair',   True),
    'fedavg':     (False, 'fedavg', False),
    'central':    (False, 'fedavg', False),
    'variation1': (False, 'fair',   True),
    'variation2': (True,  'fedavg', True),
    'variation3': (True,  'fair',   False),
}


# ---------------------------------------------------------------------------
# Configuration and state
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    algorithm: str = 'cf_fedsr'
    clients_per_round: int = 128
    total_rounds: int = 200
    local_epochs: int = 1
    lr: float = 0.001
    optimizer: str = 'adam'
    dropout: float = 0.3
    d: int = 50
    k: int = 5
    lambda1: int = 20
    lambda2: int = 10
    v1: int = 3
    v2: int = 10
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 0.5
    ft_steps: int = 2
    ft_lr: float = 0.001
    seed: int = 1
    patience: int = 5
    early_stop: bool = True
    aggregator: str = 'auto'
    literal_eq5_eq8: bool = False
    interpolate_each_round: bool = False
    reset_optimizer_each_round: bool = False
    full_eval_every: int = 0
    kmeans_max_iter: int = 50
    train_negatives: int = 100
    max_seq_len: int = 50
    workers: int = 1

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f'algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}')
        if self.aggregator not in ('auto',) + aggregation.AGGREGATORS:
            raise ConfigError(f'aggregator must be auto, fedavg or fair, got {self.aggregator!r}')
        if self.optimizer not in ('adam', 'sgd'):
            raise ConfigError(f'optimizer must be adam or sgd, got {self.optimizer!r}')
        positive = ('clients_per_round', 'local_epochs', 'lr', 'd', 'k', 'v1', 'v2',
                    'ft_steps', 'patience', 'kmeans_max_iter', 'train_negatives',
                    'max_seq_len', 'workers')
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f'{name} must be positive, got {getattr(self, name)}')
        non_negative = ('total_rounds', 'lambda1', 'lambda2', 'alpha', 'beta', 'ft_lr',
                        'full_eval_every', 'seed')
        for name in non_negative:
            if getattr(self, name) < 0:
                raise ConfigError(f'{name} must be >= 0, got {getattr(self, name)}')
        if self.alpha + self.beta <= 0:
            raise ConfigError('alpha + beta must be positive')
        if not self.v2 > self.v1:
            raise ConfigError(f'v2 must exceed v1 (got v1={self.v1}, v2={self.v2})')
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f'dropout must be in [0, 1), got {self.dropout}')
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f'gamma must be in [0, 1], got {self.gamma}')
        return self

    @property
    def uses_selection(self):
        return ALGORITHM_FLAGS[self.algorithm][0]

    @property
    def effective_aggregator(self):
        if self.aggregator != 'auto':
            return self.aggregator
        return ALGORITHM_FLAGS[self.algorithm][1]

    @property
    def personalizes(self):
        return ALGORITHM_FLAGS[self.algorithm][2]


@dataclass
class ClientState:
    """A client's private data and model. Only embedding, n_k and p_k ever leave it."""
    dataset: object
    params: object
    opt_state: object
    rounds_participated: int = 0
    rounds_elapsed: int = 0
    last_p: float = 0.0

    @property
    def client_id(self):
        return self.dataset.client_id

    @property
    def n_k(self):
        return self.dataset.n_k


@dataclass
class RoundReport:
    round: int
    participants: list
    eligible: int
    weights: dict
    scores: dict                 # client-id -> validation p_k
    val_hr5: float = 0.0
    val_ndcg5: float = 0.0
    val_hr10: float = 0.0
    val_ndcg10: float = 0.0
    fairness_variance: float = 0.0
    embedding_entries: int = 0
    federated: bool = True
    bytes: int = 0
    cumulative_bytes: int = 0
    validated_all: bool = False
    note: str = ''

    def as_dict(self):
        return dataclasses.asdict(self)


@dataclass
class ServerState:
    embedding: np.ndarray
    round: int = 0
    history: list = field(default_factory=list)
    root_seed: int = 0
    cumulative_bytes: int = 0


@dataclass
class ExperimentData:
    log: object
    clients: list
    fingerprint: str
    stats: dict


@dataclass
class ExperimentResult:
    algorithm: str
    seed: int
    rounds: list             # RoundReport per executed round
    outcomes: list           # test EvalOutcome per client
    summary: dict
    fingerprint: str = ''


def prepare(dataset_config, seed):
    """Load the log and build clients (negatives seeded by *seed*)."""
    interactions = load_dataset(dataset_config)
    clients = build_clients(interactions, dataset_config.min_len, seed,
                            dataset_config.num_negatives)
    if not clients:
        raise ConfigError(f'no user has at least min_len={dataset_config.min_len} interactions')
    return ExperimentData(interactions, clients, dataset_fingerprint(interactions),
                          describe(interactions))


def init_clients(data, config):
    """Every client starts from the same seeded model, like the server."""
    start = init_params(data.log.num_items, config.d, derive_seed(config.seed, 'init'))
    return [ClientState(ds, start.copy(), init_optimizer(start)) for ds in data.clients]


# ---------------------------------------------------------------------------
# Evaluation helpers
# ---------------------------------------------------------------------------

def evaluate(params, client_id, history, target, negatives, max_len):
    hidden = forward(params, history, max_len=max_len)
    candidates = [target] + list(negatives)
    return metrics.evaluate_scores(client_id, score(params, hidden, candidates))


def evaluate_validation(params, dataset, max_len):
    return evaluate(params, dataset.client_id, dataset.train_sequence,
                    dataset.valid_target, dataset.valid_negatives, max_len)


def evaluate_test(params, dataset, max_len):
    history = dataset.train_sequence + (dataset.valid_target,)
    return evaluate(params, dataset.client_id, history,
                    dataset.test_target, dataset.test_negatives, max_len)


# ---------------------------------------------------------------------------
# One round
# ---------------------------------------------------------------------------

def select_participants(server, clients, config):
    """Return (participant ids, eligible count) for the coming round."""
    by_id = {c.client_id: c for c in clients}
    sample_seed = derive_seed(server.root_seed, 'sample', server.round)
    if not config.uses_selection:
        return selection.uniform_sample(by_id, config.clients_per_round, sample_seed), len(by_id)

    pool = [c for c in clients if selection.eligible(c, config.lambda1, config.lambda2)]
    if not pool:
        return [], 0
    reps = [selection.represent(c, server.embedding, config.v1, config.v2) for c in pool]
    k = min(config.k, len(reps))
    clustering = selection.kmeans(
        [r.vector for r in reps], k, config.kmeans_max_iter,
        derive_seed(server.root_seed, 'kmeans', server.round),
        ids=[r.client_id for r in reps])
    chosen = selection.proportional_sample(clustering, config.clients_per_round, sample_seed)
    return chosen, len(pool)


def local_round(client, global_embedding, config, round_seed):
    """Steps 3-5 for one participant. Mutates only *client*."""
    client.params = client.params.with_embedding(global_embedding)
    if config.reset_optimizer_each_round:
        client.opt_state = init_optimizer(client.params)
    seed = derive_seed(round_seed, 'train', client.client_id)
    client.params, client.opt_state, _ = fit_sequence(
        client.params, client.opt_state, client.dataset.train_sequence,
        epochs=config.local_epochs, lr=config.lr, kind=config.optimizer,
        dropout_rate=config.dropout, seed=seed,
        num_negatives=config.train_negatives, max_len=config.max_seq_len)

    eval_params = client.params
    if config.interpolate_each_round:
        eval_params = personalization.interpolate(client.params, global_embedding, config.gamma)
    outcome = evaluate_validation(eval_params, client.dataset, config.max_seq_len)
    client.last_p = outcome.performance
    client.rounds_participated += 1
    update = aggregation.ClientUpdate(
        client.client_id, client.params.embedding.copy(), max(client.n_k, 1), client.last_p)
    return update, outcome


def _map_clients(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def run_round(server, clients, config):
    """Run one federated round. Returns (new ServerState, RoundReport)."""
    round_no = server.round + 1
    round_seed = derive_seed(server.root_seed, 'round', round_no)
    participant_ids, eligible_count = select_participants(server, clients, config)
    by_id = {c.client_id: c for c in clients}
    entries = int(server.embedding.size)

    if not participant_ids:
        for c in clients:
            c.rounds_elapsed += 1
        report = RoundReport(round=round_no, participants=[], eligible=0, weights={},
                             scores={}, embedding_entries=entries,
                             cumulative_bytes=server.cumulative_bytes,
                             note='no eligible clients; round skipped')
        log.warning('Round %d: no eligible clients, skipping', round_no,
                    extra={'round': round_no})
        return dataclasses.replace(server, round=round_no,
                                   history=server.history + [report]), report

    participants = [by_id[cid] for cid in participant_ids]
    results = _map_clients(
        lambda c: local_round(c, server.embedding, config, round_seed),
        participants, config.workers)
    updates = [u for u, _ in results]
    outcomes = [o for _, o in results]

    weights = aggregation.compute_weights(
        updates, config.effective_aggregator, config.alpha, config.beta,
        config.literal_eq5_eq8)
    new_embedding = aggregation.aggregate(updates, weights)

    for c in clients:
        c.rounds_elapsed += 1

    report = _make_report(round_no, participant_ids, eligible_count, weights,
                          outcomes, entries, True, server.cumulative_bytes)
    if config.full_eval_every and round_no % config.full_eval_every == 0:
        _attach_full_validation(
            report, clients, lambda c: c.params.with_embedding(new_embedding),
            config.max_seq_len)

    log.info('Round %d: %d/%d participants, val HR@10 %.4f, %d bytes',
             round_no, len(participant_ids), eligible_count, report.val_hr10, report.bytes,
             extra={'round': round_no, 'participants': len(participant_ids),
                    'eligible': eligible_count, 'val_hr10': report.val_hr10,
                    'bytes': report.bytes})
    new_server = dataclasses.replace(
        server, embedding=new_embedding, round=round_no,
        history=server.history + [report], cumulative_bytes=report.cumulative_bytes)
    return new_server, report


def _make_report(round_no, participant_ids, eligible_count, weights, outcomes,
                 entries, federated, prior_bytes):
    means = metrics.summarize(outcomes)
    scores = {o.client_id: o.performance for o in sorted(outcomes, key=lambda o: o.client_id)}
    report = RoundReport(
        round=round_no, participants=list(participant_ids), eligible=eligible_count,
        weights=dict(sorted(weights.items())), scores=scores,
        val_hr5=means['hr5'], val_ndcg5=means['ndcg5'],
        val_hr10=means['hr10'], val_ndcg10=means['ndcg10'],
        fairness_variance=metrics.fairness_variance(scores.values()) if scores else 0.0,
        embedding_entries=entries, federated=federated)
    report.bytes = metrics.bytes_transmitted(report)
    report.cumulative_bytes = prior_bytes + report.bytes
    return report


def _attach_full_validation(report, clients, params_for, max_len):
    """Replace the participant-only validation means with all-client means."""
    outcomes = [evaluate_validation(params_for(c), c.dataset, max_len) for c in clients]
    means = metrics.summarize(outcomes)
    report.val_hr5, report.val_ndcg5 = means['hr5'], means['ndcg5']
    report.val_hr10, report.val_ndcg10 = means['hr10'], means['ndcg10']
    report.validated_all = True


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def convergence_of(reports, patience):
    """Round number at which validation HR@10 stopped improving, or None.

    Skipped rounds (no participants) carry no validation signal and are ignored.
    When some rounds validated every client, only those rounds are tracked.
    """
    tracked = [r for r in reports if r.participants]
    if any(r.validated_all for r in tracked):
        tracked = [r for r in tracked if r.validated_all]
    idx = metrics.convergence_round([r.val_hr10 for r in tracked], patience)
    return None if idx is None else tracked[idx].round


def _should_stop(reports, config):
    return config.early_stop and convergence_of(reports, config.patience) is not None


def _finish(config, data, reports, outcomes, stopped_early):
    fairness = metrics.fairness_report(outcomes)
    means = metrics.summarize(outcomes)
    summary = dict(means)
    summary.update({
        'fairness_variance': fairness.variance,
        'convergence_round': convergence_of(reports, config.patience),
        'rounds_executed': len(reports),
        'stopped_early': stopped_early,
        'cumulative_bytes': reports[-1].cumulative_bytes if reports else 0,
        'clients': len(outcomes),
    })
    return ExperimentResult(config.algorithm, config.seed, reports, outcomes, summary,
                            data.fingerprint)


def run_experiment(config, data):
    """Federated training until total_rounds or early stop, then test evaluation."""
    config.validate()
    if config.algorithm == 'central':
        return run_central(config, data)

    clients = init_clients(data, config)
    server = ServerState(embedding=clients[0].params.embedding.copy(), root_seed=config.seed)
    log.info('Starting %s: %d clients, %d rounds max, %d per round',
             config.algorithm, len(clients), config.total_rounds, config.clients_per_round,
             extra={'algorithm': config.algorithm, 'seed': config.seed})

    stopped_early = False
    for _ in range(config.total_rounds):
        server, _ = run_round(server, clients, config)
        if _should_stop(server.history, config):
            stopped_early = True
            log.info('Early stop after round %d (patience %d)', server.round, config.patience)
            break

    # with no training at all the untrained model is evaluated as is
    personalize = config.personalizes and config.total_rounds > 0
    if personalize:
        log.info('Personalizing %d clients (gamma %.2f)', len(clients), config.gamma)
    outcomes = []
    for client in clients:
        params = inference_params(client, server.embedding, config, personalize)
        outcomes.append(evaluate_test(params, client.dataset, config.max_seq_len))
    return _finish(config, data, server.history, outcomes, stopped_early)


def inference_params(client, global_embedding, config, personalize=True):
    """The model a client recommends with after training ends."""
    if not personalize:
        return client.params.with_embedding(global_embedding)
    seed = derive_seed(config.seed, 'finetune', client.client_id)
    if client.dataset.train_sequence:
        local = personalization.fine_tune(
            global_embedding, client, config.ft_lr, config.ft_steps, seed,
            num_negatives=config.train_negatives, max_len=config.max_seq_len)
    else:
        local = client.params.with_embedding(global_embedding)
    return personalization.interpolate(local, global_embedding, config.gamma)


def run_central(config, data):
    """One model trained on pooled sequences with the federated sampling budget."""
    config.validate()
    clients = init_clients(data, config)
    params = clients[0].params.copy()
    opt_state = init_optimizer(params)
    by_id = {c.client_id: c for c in clients}
    log.info('Starting central baseline: %d clients', len(clients))

    reports = []
    stopped_early = False
    for round_no in range(1, config.total_rounds + 1):
        round_seed = derive_seed(config.seed, 'round', round_no)
        chosen = selection.uniform_sample(
            by_id, config.clients_per_round, derive_seed(config.seed, 'sample', round_no - 1))
        outcomes = []
        for cid in chosen:
            if config.reset_optimizer_each_round:
                opt_state = init_optimizer(params)
            params, opt_state, _ = fit_sequence(
                params, opt_state, by_id[cid].dataset.train_sequence,
                epochs=config.local_epochs, lr=config.lr, kind=config.optimizer,
                dropout_rate=config.dropout, seed=derive_seed(round_seed, 'train', cid),
                num_negatives=config.train_negatives, max_len=config.max_seq_len)
            outcomes.append(evaluate_validation(params, by_id[cid].dataset, config.max_seq_len))
        report = _make_report(round_no, chosen, len(chosen), {}, outcomes, 0, False,
                              reports[-1].cumulative_bytes if reports else 0)
        if config.full_eval_every and round_no % config.full_eval_every == 0:
            _attach_full_validation(report, clients, lambda c: params, config.max_seq_len)
        reports.append(report)
        log.info('Central round %d: val HR@10 %.4f', round_no, report.val_hr10,
                 extra={'round': round_no, 'val_hr10': report.val_hr10})
        if _should_stop(reports, config):
            stopped_early = True
            break

    outcomes = [evaluate_test(params, c.dataset, config.max_seq_len) for c in clients]
    return _finish(config, data, reports, outcomes, stopped_early)
