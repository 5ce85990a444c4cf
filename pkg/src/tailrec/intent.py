"""Additive-attention user intent encoder with a learnable recency decay.

The attention logit for history position t (1 = oldest, T = most recent) is
u . tanh(W e_t + b) + beta * t, softmaxed into weights alpha, and the intent
vector h is the alpha-weighted combination of the history embeddings.
Training optimizes a sampled pairwise next-item ranking loss
-ln sigmoid(cos(h, e_pos) - cos(h, e_neg)) by plain SGD.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .config import TrainingConfig
from .data import SplitDataset
from .embeddings import EmbeddingMatrix
from .errors import DataError

T_MAX_DEFAULT = 50


@dataclass
class AttentionParams:
    W: np.ndarray  # (d, d)
    b: np.ndarray  # (d,)
    u: np.ndarray  # (d,)
    beta: float

    @property
    def dim(self) -> int:
        return self.b.shape[0]

    def copy(self) -> "AttentionParams":
        return AttentionParams(self.W.copy(), self.b.copy(), self.u.copy(),
                               float(self.beta))


@dataclass(frozen=True)
class UserHistory:
    user_id: str
    items: tuple[str, ...]  # oldest first


@dataclass(frozen=True)
class IntentVector:
    user_id: str
    h: np.ndarray
    alphas: np.ndarray


def truncate_history(history: UserHistory, t_max: int = T_MAX_DEFAULT) -> UserHistory:
    """Keep the most recent t_max items."""
    if len(history.items) <= t_max:
        return history
    return UserHistory(history.user_id, history.items[-t_max:])


def init_params(dim: int, seed: int = 0) -> AttentionParams:
    """W = 0.1*I, b = 0, u ~ U[-0.1, 0.1], beta = 0.

    Keeps the initial intent vector near the unweighted history mean.
    """
    rng = np.random.default_rng(seed)
    return AttentionParams(
        W=0.1 * np.eye(dim),
        b=np.zeros(dim),
        u=rng.uniform(-0.1, 0.1, size=dim),
        beta=0.0,
    )


def _history_matrix(history: UserHistory, embeddings: EmbeddingMatrix) -> np.ndarray:
    rows = []
    for iid in history.items:
        rows.append(embeddings.vector(iid))
    if not rows:
        raise DataError(f"empty history for user {history.user_id!r}")
    return np.stack(rows)


def attention_logits(history: UserHistory, params: AttentionParams,
                     embeddings: EmbeddingMatrix) -> np.ndarray:
    """logit[t] = u . tanh(W e_t + b) + beta * t for t = 1..T."""
    E = _history_matrix(history, embeddings)
    T = E.shape[0]
    A = np.tanh(E @ params.W.T + params.b)
    return A @ params.u + params.beta * np.arange(1, T + 1)


def intent(history: UserHistory, params: AttentionParams,
           embeddings: EmbeddingMatrix) -> IntentVector:
    """Softmax the logits (max-subtracted) and mix the history embeddings."""
    E = _history_matrix(history, embeddings)
    logits = attention_logits(history, params, embeddings)
    z = np.exp(logits - logits.max())
    alphas = z / z.sum()
    return IntentVector(history.user_id, alphas @ E, alphas)


# -- training ---------------------------------------------------------------

@dataclass
class _Batch:
    E: np.ndarray      # (B, L, d) padded history embeddings
    mask: np.ndarray   # (B, L) True on real positions
    tpos: np.ndarray   # (B, L) position index 1..T, 0 on padding
    pos: np.ndarray    # (B, d)
    neg: np.ndarray    # (B, d)


def _make_batch(triples, embeddings: EmbeddingMatrix) -> _Batch:
    B = len(triples)
    L = max(len(t[0]) for t in triples)
    d = embeddings.dim
    E = np.zeros((B, L, d))
    mask = np.zeros((B, L), dtype=bool)
    tpos = np.zeros((B, L))
    pos = np.zeros((B, d))
    neg = np.zeros((B, d))
    for r, (prefix, p, n) in enumerate(triples):
        T = len(prefix)
        for c, iid in enumerate(prefix):
            E[r, c] = embeddings.vector(iid)
        mask[r, :T] = True
        tpos[r, :T] = np.arange(1, T + 1)
        pos[r] = embeddings.vector(p)
        neg[r] = embeddings.vector(n)
    return _Batch(E, mask, tpos, pos, neg)


def _forward(params: AttentionParams, batch: _Batch):
    Z = batch.E @ params.W.T + params.b          # (B, L, d)
    A = np.tanh(Z)
    logits = A @ params.u + params.beta * batch.tpos
    logits = np.where(batch.mask, logits, -np.inf)
    m = logits.max(axis=1, keepdims=True)
    ez = np.exp(logits - m)
    alphas = ez / ez.sum(axis=1, keepdims=True)  # (B, L), 0 on padding
    h = np.einsum("bl,bld->bd", alphas, batch.E)
    hn = np.linalg.norm(h, axis=1)
    hn = np.maximum(hn, 1e-12)
    s_pos = np.einsum("bd,bd->b", h, batch.pos) / hn
    s_neg = np.einsum("bd,bd->b", h, batch.neg) / hn
    delta = s_pos - s_neg
    losses = np.logaddexp(0.0, -delta)           # -ln sigmoid(delta)
    return A, alphas, h, hn, s_pos, s_neg, delta, losses


def _loss_and_grads(params: AttentionParams, batch: _Batch):
    """Mean loss over the batch plus analytic gradients for W, b, u, beta."""
    A, alphas, h, hn, s_pos, s_neg, delta, losses = _forward(params, batch)
    B = batch.E.shape[0]
    g = -expit(-delta) / B                       # dL/d delta, mean-reduced
    hhat = h / hn[:, None]
    grad_h = (batch.pos - s_pos[:, None] * hhat
              - batch.neg + s_neg[:, None] * hhat) / hn[:, None]
    grad_h *= g[:, None]
    g_alpha = np.einsum("bd,bld->bl", grad_h, batch.E)
    inner = (alphas * g_alpha).sum(axis=1, keepdims=True)
    g_logit = alphas * (g_alpha - inner)
    g_logit = np.where(batch.mask, g_logit, 0.0)
    gu = np.einsum("bl,bld->d", g_logit, A)
    gbeta = float((g_logit * batch.tpos).sum())
    gz = g_logit[:, :, None] * (params.u * (1.0 - A * A))
    gb = gz.sum(axis=(0, 1))
    gW = np.einsum("bld,ble->de", gz, batch.E)
    return float(losses.mean()), gW, gb, gu, gbeta


def triple_loss(params: AttentionParams, prefix, pos_id, neg_id,
                embeddings: EmbeddingMatrix) -> float:
    """Loss of a single (history-prefix, positive, negative) triple."""
    batch = _make_batch([(tuple(prefix), pos_id, neg_id)], embeddings)
    return _forward(params, batch)[-1].mean().item()


def triple_grads(params: AttentionParams, prefix, pos_id, neg_id,
                 embeddings: EmbeddingMatrix):
    """Analytic (W, b, u, beta) gradients of a single triple's loss."""
    batch = _make_batch([(tuple(prefix), pos_id, neg_id)], embeddings)
    return _loss_and_grads(params, batch)[1:]


def build_triples(split: SplitDataset, embeddings: EmbeddingMatrix,
                  config: TrainingConfig, t_max: int = T_MAX_DEFAULT,
                  max_prefixes_per_user: int = 8):
    """Sampled (prefix, next-item, negative) triples from the train split.

    Negatives are drawn uniformly from the catalog minus the user's history.
    The triple set is fixed for the whole run so per-epoch losses are
    comparable.
    """
    rng = np.random.default_rng(config.seed)
    all_ids = embeddings.item_ids
    n_all = len(all_ids)
    triples = []
    for user in split.train.users:
        seq = [r.item_id for r in split.train.user_sequences[user]]
        if len(seq) < 2:
            continue
        positions = np.arange(1, len(seq))
        if positions.size > max_prefixes_per_user:
            positions = np.sort(rng.choice(positions, size=max_prefixes_per_user,
                                           replace=False))
        owned = set(seq)
        if len(owned) >= n_all:
            continue
        for p in positions:
            prefix = tuple(seq[max(0, p - t_max):p])
            target = seq[p]
            for _ in range(config.negatives_per_positive):
                while True:
                    neg = all_ids[int(rng.integers(0, n_all))]
                    if neg not in owned:
                        break
                triples.append((prefix, target, neg))
    return triples


def mean_triple_loss(params: AttentionParams, triples, embeddings: EmbeddingMatrix,
                     batch_size: int = 512) -> float:
    total = 0.0
    for start in range(0, len(triples), batch_size):
        chunk = triples[start:start + batch_size]
        batch = _make_batch(chunk, embeddings)
        total += float(_forward(params, batch)[-1].sum())
    return total / len(triples)


def train_intent(split: SplitDataset, embeddings: EmbeddingMatrix,
                 config: TrainingConfig, t_max: int = T_MAX_DEFAULT,
                 max_prefixes_per_user: int = 8):
    """SGD over the sampled ranking triples.

    Returns (params, per-epoch losses); the loss is evaluated on the full
    fixed triple set after each epoch's updates.
    """
    config.validate()
    params = init_params(embeddings.dim, config.seed)
    triples = build_triples(split, embeddings, config, t_max, max_prefixes_per_user)
    if not triples:
        raise DataError("no trainable triples: need users with >= 2 interactions")
    if config.epochs == 0:
        return params, []
    rng = np.random.default_rng(config.seed + 1)
    losses = []
    for _ in range(config.epochs):
        order = rng.permutation(len(triples))
        for start in range(0, len(order), config.batch_size):
            chunk = [triples[i] for i in order[start:start + config.batch_size]]
            batch = _make_batch(chunk, embeddings)
            _, gW, gb, gu, gbeta = _loss_and_grads(params, batch)
            params.W -= config.learning_rate * gW
            params.b -= config.learning_rate * gb
            params.u -= config.learning_rate * gu
            params.beta -= config.learning_rate * gbeta
        losses.append(mean_triple_loss(params, triples, embeddings))
    return params, losses


# -- persistence ------------------------------------------------------------

def save_params(params: AttentionParams, path) -> None:
    """Text layout: dim header, W row-major, b, u, beta; full precision."""
    with open(path, "w", encoding="utf-8") as f:
        d = params.dim
        f.write(f"{d}\n")
        for row in params.W:
            f.write(" ".join(repr(float(x)) for x in row) + "\n")
        f.write(" ".join(repr(float(x)) for x in params.b) + "\n")
        f.write(" ".join(repr(float(x)) for x in params.u) + "\n")
        f.write(repr(float(params.beta)) + "\n")


def load_params(path) -> AttentionParams:
    with open(path, encoding="utf-8") as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    try:
        d = int(lines[0])
        W = np.array([[float(x) for x in lines[1 + i].split()] for i in range(d)])
        b = np.array([float(x) for x in lines[1 + d].split()])
        u = np.array([float(x) for x in lines[2 + d].split()])
        beta = float(lines[3 + d])
    except (IndexError, ValueError) as exc:
        raise DataError(f"{path}: malformed attention parameter file ({exc})") from exc
    if W.shape != (d, d) or b.shape != (d,) or u.shape != (d,):
        raise DataError(f"{path}: parameter shapes do not match header dim {d}")
    return AttentionParams(W, b, u, beta)
