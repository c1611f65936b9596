"""
GRU sequential recommender with tied item embeddings.

The item-embedding table is both the GRU input layer and the scorer
(score = hidden . embedding[item]), so hidden size equals embedding size d.
Only the embedding table ever leaves a client; the recurrent weights stay local.

Gradients are computed analytically by backpropagation through time.
Everything runs in float64.

Usage:
    from fedsr.seqmodel import init_params, forward, score, loss_and_grad

    params = init_params(num_items=500, d=16, seed=7)
    hidden = forward(params, [3, 17, 42])
    scores = score(params, hidden, [42, 5, 9])
"""

from dataclasses import dataclass

import numpy as np

from fedsr.errors import InputError, ShapeMismatchError
from fedsr.seeding import derive_seed

# Gate order inside the stacked [3, h, *] weight tensors
UPDATE, RESET, CANDIDATE = 0, 1, 2

MAX_SEQ_LEN = 50

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

OPTIMIZERS = ('adam', 'sgd')


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class ModelParams:
    """Learnable state: shared embedding table plus client-local GRU weights."""
    embedding: np.ndarray              # [num_items, d]
    gru_input_weights: np.ndarray      # [3, h, d]
    gru_recurrent_weights: np.ndarray  # [3, h, h]
    gru_biases: np.ndarray             # [3, h]

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        self.gru_input_weights = np.asarray(self.gru_input_weights, dtype=np.float64)
        self.gru_recurrent_weights = np.asarray(self.gru_recurrent_weights, dtype=np.float64)
        self.gru_biases = np.asarray(self.gru_biases, dtype=np.float64)
        if self.embedding.ndim != 2:
            raise ShapeMismatchError(f'embedding must be 2-D, got shape {self.embedding.shape}')
        d = self.embedding.shape[1]
        # tied scoring forces h == d
        expected = {
            'gru_input_weights': (3, d, d),
            'gru_recurrent_weights': (3, d, d),
            'gru_biases': (3, d),
        }
        for name, shape in expected.items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise ShapeMismatchError(f'{name} has shape {actual}, expected {shape}')

    @property
    def num_items(self):
        return self.embedding.shape[0]

    @property
    def dim(self):
        return self.embedding.shape[1]

    def arrays(self):
        return (self.embedding, self.gru_input_weights,
                self.gru_recurrent_weights, self.gru_biases)

    def copy(self):
        return ModelParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self):
        return ModelParams(*(np.zeros_like(a) for a in self.arrays()))

    def with_embedding(self, embedding):
        """Return a copy whose embedding table is replaced by *embedding*."""
        embedding = np.asarray(embedding, dtype=np.float64)
        if embedding.shape != self.embedding.shape:
            raise ShapeMismatchError(
                f'embedding shape {embedding.shape} != {self.embedding.shape}')
        out = self.copy()
        out.embedding = embedding.copy()
        return out

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass
class OptimizerState:
    first_moment: ModelParams
    second_moment: ModelParams
    step_count: int = 0


def init_params(num_items, d, seed):
    """Uniform init in [-1/sqrt(d), 1/sqrt(d)], seeded."""
    if num_items < 1 or d < 1:
        raise InputError(f'num_items and d must be positive (got {num_items}, {d})')
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(d)
    return ModelParams(
        embedding=rng.uniform(-bound, bound, (num_items, d)),
        gru_input_weights=rng.uniform(-bound, bound, (3, d, d)),
        gru_recurrent_weights=rng.uniform(-bound, bound, (3, d, d)),
        gru_biases=rng.uniform(-bound, bound, (3, d)),
    )


def init_optimizer(params):
    return OptimizerState(params.zeros_like(), params.zeros_like(), 0)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check_ids(ids, num_items, what):
    arr = np.asarray(ids, dtype=np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() >= num_items):
        bad = arr[(arr < 0) | (arr >= num_items)][0]
        raise InputError(f'{what} contains item id {bad} outside [0, {num_items})')
    return arr


def _check_sequence(params, sequence, max_len):
    seq = _check_ids(sequence, params.num_items, 'sequence')
    if seq.size == 0:
        raise InputError('sequence must be non-empty')
    return seq[-max_len:]


def _dropout_mask(rng_seed, shape, rate):
    if not 0.0 <= rate < 1.0:
        raise InputError(f'dropout_rate must be in [0, 1), got {rate}')
    if rate == 0.0:
        return np.ones(shape)
    rng = np.random.default_rng(rng_seed)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def _check_same_shape(dst, src):
    if isinstance(dst, ModelParams) and isinstance(src, ModelParams):
        for a, b in zip(dst.arrays(), src.arrays()):
            if a.shape != b.shape:
                raise ShapeMismatchError(f'parameter shapes differ: {a.shape} vs {b.shape}')
        return
    if isinstance(dst, ModelParams) or isinstance(src, ModelParams):
        raise ShapeMismatchError('cannot combine full ModelParams with an embedding-only view')
    if np.shape(dst) != np.shape(src):
        raise ShapeMismatchError(f'shapes differ: {np.shape(dst)} vs {np.shape(src)}')


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def _run_gru(params, seq, mask):
    """Run the recurrence and keep every intermediate needed for BPTT."""
    W = params.gru_input_weights
    U = params.gru_recurrent_weights
    b = params.gru_biases
    T, h = len(seq), params.dim

    xs = params.embedding[seq] * mask
    wx = np.einsum('ghd,td->tgh', W, xs) + b[None, :, :]

    hs = np.zeros((T + 1, h))
    zs = np.empty((T, h))
    rs = np.empty((T, h))
    ns = np.empty((T, h))
    us = np.empty((T, h))
    for t in range(T):
        h_prev = hs[t]
        z = _sigmoid(wx[t, UPDATE] + U[UPDATE] @ h_prev)
        r = _sigmoid(wx[t, RESET] + U[RESET] @ h_prev)
        u = U[CANDIDATE] @ h_prev
        n = np.tanh(wx[t, CANDIDATE] + r * u)
        hs[t + 1] = (1.0 - z) * n + z * h_prev
        zs[t], rs[t], ns[t], us[t] = z, r, n, u

    return {'xs': xs, 'hs': hs, 'zs': zs, 'rs': rs, 'ns': ns, 'us': us}


def forward(params, sequence, dropout_rate=0.0, rng_seed=0, max_len=MAX_SEQ_LEN):
    """Final hidden state after reading *sequence* (most recent max_len items).

    Hidden state starts at zero. Inverted dropout is applied to the embedding
    inputs when dropout_rate > 0; the mask is drawn from rng_seed.
    """
    seq = _check_sequence(params, sequence, max_len)
    mask = _dropout_mask(rng_seed, (len(seq), params.dim), dropout_rate)
    return _run_gru(params, seq, mask)['hs'][-1].copy()


def score(params, hidden, candidates):
    """Dot product of *hidden* with each candidate's embedding."""
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.shape != (params.dim,):
        raise ShapeMismatchError(f'hidden has shape {hidden.shape}, expected ({params.dim},)')
    cands = _check_ids(candidates, params.num_items, 'candidates')
    return params.embedding[cands] @ hidden


# ---------------------------------------------------------------------------
# Loss and gradients
# ---------------------------------------------------------------------------

def _backprop(params, seq, mask, cache, dhs, grads):
    """Accumulate parameter gradients given dL/dh_t for every step's output."""
    U = params.gru_recurrent_weights
    W = params.gru_input_weights
    dW = grads.gru_input_weights
    dU = grads.gru_recurrent_weights
    db = grads.gru_biases
    xs, hs = cache['xs'], cache['hs']

    dxs = np.zeros_like(xs)
    dh_next = np.zeros(params.dim)
    for t in range(len(seq) - 1, -1, -1):
        dh = dhs[t] + dh_next
        h_prev = hs[t]
        z, r, n, u = cache['zs'][t], cache['rs'][t], cache['ns'][t], cache['us'][t]

        dn = dh * (1.0 - z)
        dz = dh * (h_prev - n)
        da_n = dn * (1.0 - n * n)
        du = da_n * r
        da_r = da_n * u * r * (1.0 - r)
        da_z = dz * z * (1.0 - z)
        da = np.stack([da_z, da_r, da_n])

        dW += da[:, :, None] * xs[t][None, None, :]
        db += da
        dU[UPDATE] += np.outer(da_z, h_prev)
        dU[RESET] += np.outer(da_r, h_prev)
        dU[CANDIDATE] += np.outer(du, h_prev)

        dh_next = (dh * z
                   + U[UPDATE].T @ da_z
                   + U[RESET].T @ da_r
                   + U[CANDIDATE].T @ du)
        dxs[t] = np.einsum('gh,ghd->d', da, W)

    np.add.at(grads.embedding, seq, dxs * mask)


def _sampled_softmax(params, hidden, cands, grads):
    """Mean cross-entropy with the true item in column 0 of *cands*.

    Returns (loss, dL/dhidden) and accumulates the scorer's embedding gradient.
    """
    E = params.embedding[cands]                      # [P, K+1, d]
    scores = np.einsum('pkd,pd->pk', E, hidden)
    top = scores.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(scores - top).sum(axis=1))
    positions = len(cands)
    loss = float(np.mean(lse - scores[:, 0]))

    dscores = np.exp(scores - lse[:, None])
    dscores[:, 0] -= 1.0
    dscores /= positions
    dhidden = np.einsum('pk,pkd->pd', dscores, E)
    np.add.at(grads.embedding, cands, dscores[:, :, None] * hidden[:, None, :])
    return loss, dhidden


def loss_and_grad(params, sequence, target, negatives, dropout_rate=0.0, rng_seed=0,
                  max_len=MAX_SEQ_LEN):
    """Sampled-softmax loss of predicting *target* after *sequence*, with exact grads."""
    seq = _check_sequence(params, sequence, max_len)
    negs = _check_ids(negatives, params.num_items, 'negatives')
    if negs.size == 0:
        raise InputError('negatives must be non-empty')
    target = int(_check_ids([target], params.num_items, 'target')[0])
    if target in set(negs.tolist()):
        raise InputError(f'target {target} appears in negatives')

    mask = _dropout_mask(rng_seed, (len(seq), params.dim), dropout_rate)
    cache = _run_gru(params, seq, mask)
    grads = params.zeros_like()
    cands = np.concatenate([[target], negs])[None, :]
    loss, dhidden = _sampled_softmax(params, cache['hs'][-1:], cands, grads)

    dhs = np.zeros((len(seq), params.dim))
    dhs[-1] = dhidden[0]
    _backprop(params, seq, mask, cache, dhs, grads)
    return loss, grads


def sequence_loss_and_grad(params, sequence, negatives, dropout_rate=0.0, rng_seed=0):
    """Mean next-item loss over every position of *sequence* in one BPTT pass.

    The hidden state after item t predicts item t+1. *negatives* has one row
    of sampled ids per predicted position, i.e. shape [len(sequence) - 1, K].
    """
    seq = _check_ids(sequence, params.num_items, 'sequence')
    if seq.size < 2:
        raise InputError('need at least two items to form a next-item example')
    negs = np.asarray(negatives, dtype=np.int64)
    if negs.ndim != 2 or negs.shape[0] != seq.size - 1 or negs.shape[1] == 0:
        raise InputError(f'negatives must have shape ({seq.size - 1}, K>0), got {negs.shape}')
    _check_ids(negs, params.num_items, 'negatives')

    inputs, targets = seq[:-1], seq[1:]
    mask = _dropout_mask(rng_seed, (len(inputs), params.dim), dropout_rate)
    cache = _run_gru(params, inputs, mask)
    grads = params.zeros_like()
    cands = np.column_stack([targets, negs])
    loss, dhidden = _sampled_softmax(params, cache['hs'][1:], cands, grads)
    _backprop(params, inputs, mask, cache, dhidden, grads)
    return loss, grads


def sample_negatives(rng, targets, num_items, k):
    """One row of *k* distinct ids per target, never containing that target."""
    if k > num_items - 1:
        raise InputError(f'cannot draw {k} negatives from {num_items - 1} items')
    rows = np.empty((len(targets), k), dtype=np.int64)
    for i, target in enumerate(targets):
        draw = rng.choice(num_items - 1, size=k, replace=False)
        rows[i] = draw + (draw >= target)
    return rows


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------

def params_axpy(dst, src, scale):
    """Return dst + scale * src for full params or embedding-only arrays."""
    _check_same_shape(dst, src)
    if isinstance(dst, ModelParams):
        return ModelParams(*(a + scale * b for a, b in zip(dst.arrays(), src.arrays())))
    return np.asarray(dst, dtype=np.float64) + scale * np.asarray(src, dtype=np.float64)


def optimizer_step(params, grads, state, lr, kind='adam'):
    """One Adam (bias-corrected) or SGD step. Returns (params', state')."""
    if lr <= 0:
        raise InputError(f'learning rate must be positive, got {lr}')
    if kind not in OPTIMIZERS:
        raise InputError(f'unknown optimizer {kind!r}; expected one of {OPTIMIZERS}')
    _check_same_shape(params, grads)
    _check_same_shape(params, state.first_moment)
    step = state.step_count + 1

    if kind == 'sgd':
        new_params = params_axpy(params, grads, -lr)
        return new_params, OptimizerState(state.first_moment, state.second_moment, step)

    firsts, seconds, updated = [], [], []
    c1 = 1.0 - ADAM_BETA1 ** step
    c2 = 1.0 - ADAM_BETA2 ** step
    for p, g, m, v in zip(params.arrays(), grads.arrays(),
                          state.first_moment.arrays(), state.second_moment.arrays()):
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        updated.append(p - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS))
        firsts.append(m)
        seconds.append(v)
    return (ModelParams(*updated),
            OptimizerState(ModelParams(*firsts), ModelParams(*seconds), step))


def fit_sequence(params, state, sequence, epochs, lr, kind='adam', dropout_rate=0.0,
                 seed=0, num_negatives=100, max_len=MAX_SEQ_LEN):
    """Train on one client's sequence: one optimizer step per epoch.

    Each epoch draws fresh negatives and a fresh dropout mask from *seed*.
    Sequences shorter than two items carry no next-item example and are
    returned unchanged. Returns (params', state', last_loss or None).
    """
    seq = np.asarray(sequence, dtype=np.int64)[-max_len:]
    if seq.size < 2:
        return params, state, None
    k = min(num_negatives, params.num_items - 1)
    loss = None
    for epoch in range(epochs):
        epoch_seed = derive_seed(seed, 'epoch', epoch)
        rng = np.random.default_rng(epoch_seed)
        negs = sample_negatives(rng, seq[1:], params.num_items, k)
        loss, grads = sequence_loss_and_grad(
            params, seq, negs, dropout_rate, derive_seed(epoch_seed, 'dropout'))
        params, state = optimizer_step(params, grads, state, lr, kind)
    return params, state, loss
