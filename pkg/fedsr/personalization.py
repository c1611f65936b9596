"""
Local personalization of the global model.

fine_tune starts from the global embedding plus the client's own GRU weights
and runs plain SGD on the client's training sequence. interpolate blends the
fine-tuned embedding with the global one:

    embedding = gamma * local + (1 - gamma) * global

GRU weights have no global counterpart and are taken from the local model.
"""

from fedsr.errors import InputError
from fedsr.seqmodel import MAX_SEQ_LEN, fit_sequence, init_optimizer, params_axpy


def fine_tune(global_embedding, client, eta, steps, seed, dropout_rate=0.0,
              num_negatives=100, max_len=MAX_SEQ_LEN):
    """Return the client's full params after *steps* SGD epochs from the global embedding.

    Neither *global_embedding* nor the client's stored params are modified.
    eta == 0 returns the starting params unchanged.
    """
    if eta < 0:
        raise InputError(f'eta must be >= 0, got {eta}')
    if steps < 1:
        raise InputError(f'steps must be >= 1, got {steps}')
    if not client.dataset.train_sequence:
        raise InputError(f'client {client.client_id} has no training data')

    params = client.params.with_embedding(global_embedding)
    if eta == 0:
        return params
    params, _, _ = fit_sequence(
        params, init_optimizer(params), client.dataset.train_sequence,
        epochs=steps, lr=eta, kind='sgd', dropout_rate=dropout_rate, seed=seed,
        num_negatives=num_negatives, max_len=max_len)
    return params


def interpolate(local, global_embedding, gamma):
    """Blend local and global embeddings; non-embedding params come from *local*."""
    if not 0.0 <= gamma <= 1.0:
        raise InputError(f'gamma must be in [0, 1], got {gamma}')
    blended = params_axpy(gamma * local.embedding, global_embedding, 1.0 - gamma)
    return local.with_embedding(blended)
