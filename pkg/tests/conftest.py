"""Shared fixtures: tiny models, toy interaction logs and clients."""

import os
import sys

import numpy as np
import pytest

# Add repo root so `fedsr`, `lib` and `scripts` are importable
repo_root = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))
sys.path.insert(0, repo_root)

from fedsr.dataio import (
    InteractionLog, build_clients, dataset_fingerprint, describe, write_interactions,
)
from fedsr.fedcore import ExperimentData, RunConfig
from fedsr.seqmodel import init_params

TOY_ITEMS = 130


def make_log(sequences, num_items=TOY_ITEMS):
    """InteractionLog from {user: [items...]} with increasing timestamps."""
    users, items, stamps = [], [], []
    clock = 0
    for user, seq in sorted(sequences.items()):
        for item in seq:
            clock += 1
            users.append(user)
            items.append(item)
            stamps.append(clock)
    return InteractionLog(
        users=np.asarray(users, dtype=np.int64),
        items=np.asarray(items, dtype=np.int64),
        timestamps=np.asarray(stamps, dtype=np.int64),
        num_users=len(sequences),
        num_items=num_items,
    )


def toy_sequences(num_users=6, seed=0, lengths=(4, 24), num_items=TOY_ITEMS):
    rng = np.random.default_rng(seed)
    out = {}
    for user in range(num_users):
        length = int(rng.integers(lengths[0], lengths[1] + 1))
        # two interest groups so clustering has something to find
        lo = 0 if user % 2 == 0 else num_items // 2
        out[user] = [int(i) for i in rng.integers(lo, lo + 20, size=length)]
    return out


@pytest.fixture
def tiny_params():
    return init_params(num_items=9, d=3, seed=11)


@pytest.fixture
def toy_log():
    return make_log(toy_sequences())


@pytest.fixture
def toy_data(toy_log):
    clients = build_clients(toy_log, min_len=3, seed=1)
    return ExperimentData(toy_log, clients, dataset_fingerprint(toy_log), describe(toy_log))


@pytest.fixture
def small_config():
    return RunConfig(
        clients_per_round=4, total_rounds=3, local_epochs=1, lr=0.01, d=4, k=2,
        lambda1=5, lambda2=2, v1=2, v2=4, ft_steps=1, ft_lr=0.01, seed=3,
        train_negatives=10, early_stop=False,
    )


def catalog_sequences(num_users=10, num_items=TOY_ITEMS):
    """Users whose contiguous item blocks jointly cover the whole catalog."""
    block = num_items // num_users
    return {
        u: [(block * u + j) % num_items for j in range(block + (u % 3) * 3)]
        for u in range(num_users)
    }


@pytest.fixture
def catalog_csv(tmp_path):
    """CSV log that survives re-indexing with all TOY_ITEMS items present."""
    path = str(tmp_path / "interactions.csv")
    write_interactions(make_log(catalog_sequences()), path)
    return path
