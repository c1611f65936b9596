"""
Interaction logs, per-user client datasets and the synthetic generator.

Input format: UTF-8 CSV `user,item,timestamp` (a byte-order mark is tolerated),
optional header row.
User and item labels may be any strings; they are re-indexed densely from 0
in order of first appearance. Timestamps are integer seconds.

Every user with at least min_len interactions becomes one client:
all but the last two items train, the second-last validates, the last tests.
Each held-out target gets its own 100 negatives drawn from items the user
never touched, seeded by (seed, user-id) and fixed for the whole run.
"""

import codecs
import csv
import hashlib
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from fedsr.errors import ConfigError, DataFormatError, InputError

log = logging.getLogger(__name__)

NUM_EVAL_NEGATIVES = 100
HEADER = ('user', 'item', 'timestamp')


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass
class InteractionLog:
    """Dense-id interaction records, kept in ingestion order."""
    users: np.ndarray        # int64 [n]
    items: np.ndarray        # int64 [n]
    timestamps: np.ndarray   # int64 [n]
    num_users: int
    num_items: int
    user_labels: list = field(default_factory=list)
    item_labels: list = field(default_factory=list)

    def __len__(self):
        return len(self.users)

    def records(self):
        return list(zip(self.users.tolist(), self.items.tolist(), self.timestamps.tolist()))


@dataclass
class ClientDataset:
    client_id: int
    train_sequence: tuple
    valid_target: int
    test_target: int
    valid_negatives: tuple
    test_negatives: tuple

    @property
    def n_k(self):
        return len(self.train_sequence)


@dataclass
class DatasetConfig:
    """Where the interaction log comes from. `dataset` is 'synthetic' or a CSV path."""
    dataset: str = 'synthetic'
    min_len: int = 3
    num_negatives: int = NUM_EVAL_NEGATIVES
    synth_num_clients: int = 200
    synth_num_items: int = 500
    synth_num_clusters: int = 4
    synth_min_len: int = 5
    synth_max_len: int = 80
    synth_noise: float = 0.2
    synth_seed: int = 2023

    def validate(self):
        if not self.dataset:
            raise ConfigError('dataset must be "synthetic" or a CSV path')
        if self.min_len < 3:
            raise ConfigError(f'min_len must be >= 3, got {self.min_len}')
        if self.num_negatives < 1:
            raise ConfigError(f'num_negatives must be positive, got {self.num_negatives}')
        if self.dataset == 'synthetic':
            if self.synth_num_clients < 1 or self.synth_num_clusters < 1:
                raise ConfigError('synth_num_clients and synth_num_clusters must be positive')
            if not 3 <= self.synth_min_len <= self.synth_max_len:
                raise ConfigError(
                    f'need 3 <= synth_min_len <= synth_max_len, got '
                    f'{self.synth_min_len}, {self.synth_max_len}')
            if not 0.0 <= self.synth_noise <= 1.0:
                raise ConfigError(f'synth_noise must be in [0, 1], got {self.synth_noise}')
        elif not os.path.exists(self.dataset):
            raise ConfigError(f'dataset file not found: {self.dataset}')
        return self


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def _reindex(raw_users, raw_items, timestamps, item_catalog=()):
    """Dense ids by first appearance. Labels in *item_catalog* are indexed first."""
    user_index = {}
    item_index = {label: idx for idx, label in enumerate(item_catalog)}
    users = [user_index.setdefault(u, len(user_index)) for u in raw_users]
    items = [item_index.setdefault(i, len(item_index)) for i in raw_items]
    return InteractionLog(
        users=np.asarray(users, dtype=np.int64),
        items=np.asarray(items, dtype=np.int64),
        timestamps=np.asarray(timestamps, dtype=np.int64),
        num_users=len(user_index),
        num_items=len(item_index),
        user_labels=list(user_index),
        item_labels=list(item_index),
    )


def _decoded_lines(path):
    """Yield text lines of a UTF-8 file; a leading BOM is dropped."""
    with open(path, 'rb') as f:
        data = f.read()
    if data.startswith(codecs.BOM_UTF8):
        data = data[len(codecs.BOM_UTF8):]
    for line_no, raw in enumerate(data.splitlines(keepends=True), start=1):
        try:
            yield raw.decode('utf-8')
        except UnicodeDecodeError as e:
            raise DataFormatError(f'not valid UTF-8 (byte {raw[e.start]:#04x})',
                                  line=line_no, column=raw[:e.start].count(b',') + 1)


def load_interactions(path, fmt='csv_triples'):
    """Read a `user,item,timestamp` CSV into a densely re-indexed log."""
    if fmt != 'csv_triples':
        raise InputError(f'unsupported log format {fmt!r}')
    if not os.path.exists(path):
        raise InputError(f'interaction log not found: {path}')

    raw_users, raw_items, stamps = [], [], []
    for line_no, row in enumerate(csv.reader(_decoded_lines(path)), start=1):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        cells = [c.strip() for c in row]
        if line_no == 1 and tuple(c.lower() for c in cells) == HEADER:
            continue
        if len(cells) != 3:
            raise DataFormatError(
                f'expected 3 fields (user,item,timestamp), got {len(cells)}',
                line=line_no, column=len(cells) + 1 if len(cells) < 3 else 4)
        for col, cell in enumerate(cells[:2], start=1):
            if not cell:
                raise DataFormatError('empty id', line=line_no, column=col)
        try:
            ts = int(cells[2])
        except ValueError:
            raise DataFormatError(
                f'timestamp {cells[2]!r} is not an integer', line=line_no, column=3)
        raw_users.append(cells[0])
        raw_items.append(cells[1])
        stamps.append(ts)

    if not raw_users:
        raise DataFormatError(f'interaction log {path} is empty')
    log_ = _reindex(raw_users, raw_items, stamps)
    log.info('Loaded %d interactions (%d users, %d items) from %s',
             len(log_), log_.num_users, log_.num_items, path)
    return log_


def write_interactions(interactions, path):
    """Emit *interactions* in the ingest format (dense ids, header row)."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(HEADER)
        writer.writerows(interactions.records())


def dataset_fingerprint(interactions):
    """sha256 over the dense records; equal logs give equal fingerprints."""
    digest = hashlib.sha256()
    for arr in (interactions.users, interactions.items, interactions.timestamps):
        digest.update(np.ascontiguousarray(arr, dtype='<i8').tobytes())
    return digest.hexdigest()[:16]


def describe(interactions):
    """Dataset statistics row: users, items, clicks, average sequence length."""
    clicks = len(interactions)
    return {
        'users': interactions.num_users,
        'items': interactions.num_items,
        'clicks': clicks,
        'avg_length': round(clicks / interactions.num_users, 2) if interactions.num_users else 0.0,
    }


# ---------------------------------------------------------------------------
# Leave-one-out split
# ---------------------------------------------------------------------------

def _user_sequences(interactions):
    # stable sort keeps file order for equal timestamps
    order = np.lexsort((np.arange(len(interactions)), interactions.timestamps, interactions.users))
    users = interactions.users[order]
    items = interactions.items[order]
    bounds = np.flatnonzero(np.diff(users)) + 1
    for chunk_users, chunk_items in zip(np.split(users, bounds), np.split(items, bounds)):
        if chunk_users.size:
            yield int(chunk_users[0]), chunk_items


def build_clients(interactions, min_len=3, seed=0, num_negatives=NUM_EVAL_NEGATIVES):
    """One ClientDataset per user with at least *min_len* interactions."""
    if min_len < 3:
        raise ConfigError(f'min_len must be >= 3 (train, valid, test), got {min_len}')
    if interactions.num_items <= num_negatives + 1:
        raise ConfigError(
            f'{interactions.num_items} items cannot supply {num_negatives} distinct '
            f'negatives plus a target')

    clients, dropped = [], 0
    all_items = np.arange(interactions.num_items)
    for user, items in _user_sequences(interactions):
        if items.size < min_len:
            dropped += 1
            continue
        pool = np.setdiff1d(all_items, items)
        if pool.size < num_negatives:
            raise ConfigError(
                f'user {user} interacted with {interactions.num_items - pool.size} of '
                f'{interactions.num_items} items; too few left for {num_negatives} negatives')
        rng = np.random.default_rng([seed, user])
        valid_negs = rng.choice(pool, size=num_negatives, replace=False)
        test_negs = rng.choice(pool, size=num_negatives, replace=False)
        clients.append(ClientDataset(
            client_id=user,
            train_sequence=tuple(int(i) for i in items[:-2]),
            valid_target=int(items[-2]),
            test_target=int(items[-1]),
            valid_negatives=tuple(int(i) for i in valid_negs),
            test_negatives=tuple(int(i) for i in test_negs),
        ))

    if dropped:
        log.info('Dropped %d users with fewer than %d interactions', dropped, min_len)
    return clients


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

SYNTH_BRANCHING = 5


def generate_synthetic(num_clients, num_items, num_clusters, seq_len_range, noise, seed):
    """Clustered Markov-chain sequences with log-uniform length heterogeneity.

    Items are split into num_clusters preferred blocks. Each block carries a
    sparse Markov chain (SYNTH_BRANCHING successors per item). A client follows
    its cluster's chain with probability 1 - noise and jumps to a uniformly
    random item otherwise.
    """
    lo, hi = seq_len_range
    if num_items <= NUM_EVAL_NEGATIVES + 1:
        raise InputError(f'num_items must exceed {NUM_EVAL_NEGATIVES + 1}, got {num_items}')
    if num_clusters < 1 or num_clusters > num_items:
        raise InputError(f'num_clusters must be in [1, num_items], got {num_clusters}')
    if num_clients < 1:
        raise InputError(f'num_clients must be positive, got {num_clients}')
    if lo < 3 or hi < lo:
        raise InputError(f'seq_len_range must satisfy 3 <= lo <= hi, got {seq_len_range}')
    if not 0.0 <= noise <= 1.0:
        raise InputError(f'noise must be in [0, 1], got {noise}')

    rng = np.random.default_rng(seed)
    blocks = np.array_split(rng.permutation(num_items), num_clusters)
    chains = []
    for block in blocks:
        width = min(SYNTH_BRANCHING, len(block))
        successors = np.stack([rng.choice(len(block), size=width, replace=False)
                               for _ in range(len(block))])
        probs = rng.dirichlet(np.full(width, 0.5), size=len(block))
        chains.append((block, successors, probs))

    membership = rng.integers(num_clusters, size=num_clients)
    lengths = np.exp(rng.uniform(np.log(lo), np.log(hi + 1), size=num_clients)).astype(int)
    lengths = np.clip(lengths, lo, hi)

    raw_users, raw_items, stamps = [], [], []
    for user in range(num_clients):
        block, successors, probs = chains[membership[user]]
        state = int(rng.integers(len(block)))
        clock = int(rng.integers(1_000_000))
        for step in range(lengths[user]):
            if rng.random() < noise:
                item = int(rng.integers(num_items))
                hits = np.flatnonzero(block == item)
                if hits.size:
                    state = int(hits[0])
            else:
                if step:
                    state = int(successors[state][rng.choice(len(probs[state]), p=probs[state])])
                item = int(block[state])
            clock += int(rng.integers(1, 3600))
            raw_users.append(f'u{user}')
            raw_items.append(f'i{item}')
            stamps.append(clock)

    # the full catalog keeps num_items fixed even for items no client sampled
    return _reindex(raw_users, raw_items, stamps,
                    item_catalog=[f'i{item}' for item in range(num_items)])


def load_dataset(cfg):
    """Resolve a DatasetConfig into an InteractionLog."""
    if cfg.dataset == 'synthetic':
        return generate_synthetic(
            cfg.synth_num_clients, cfg.synth_num_items, cfg.synth_num_clusters,
            (cfg.synth_min_len, cfg.synth_max_len), cfg.synth_noise, cfg.synth_seed)
    return load_interactions(cfg.dataset)
