"""Collaborative filtering scorers: item-item cosine kNN over co-interaction
columns and Bayesian personalized ranking matrix factorization.

Implicit feedback weights default to click=1, cart=2, purchase=3, aggregated
per (user, item) with max. Trained scorers are immutable; scoring is pure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .config import TrainingConfig
from .data import CART, CLICK, PURCHASE, Dataset, SplitDataset
from .errors import ConfigError, DataError, DependencyError

DEFAULT_ACTION_WEIGHTS = {CLICK: 1.0, CART: 2.0, PURCHASE: 3.0}


class InteractionMatrix:
    """Sparse user x item weight matrix with sorted id indices."""

    def __init__(self, users, items, csr):
        self.users = tuple(users)
        self.items = tuple(items)
        self.uindex = {u: i for i, u in enumerate(self.users)}
        self.iindex = {it: i for i, it in enumerate(self.items)}
        self.csr = csr.tocsr()

    @property
    def shape(self):
        return self.csr.shape

    def user_entries(self, user_id: str):
        """(item row indices, weights) the user interacted with."""
        u = self.uindex.get(user_id)
        if u is None:
            raise DataError(f"unknown user {user_id!r}")
        row = self.csr.getrow(u)
        return row.indices, row.data


def build_matrix(data: Dataset | SplitDataset, weights=None) -> InteractionMatrix:
    """Max-aggregate action weights per (user, item) pair."""
    if isinstance(data, SplitDataset):
        data = data.train
    if weights is None:
        weights = DEFAULT_ACTION_WEIGHTS
    users = tuple(sorted(data.users))
    items = tuple(sorted(it.item_id for it in data.items))
    uindex = {u: i for i, u in enumerate(users)}
    iindex = {it: i for i, it in enumerate(items)}
    cells: dict[tuple[int, int], float] = {}
    for rec in data.interactions:
        key = (uindex[rec.user_id], iindex[rec.item_id])
        w = float(weights[rec.action])
        if w > cells.get(key, 0.0):
            cells[key] = w
    if cells:
        keys = sorted(cells)
        rows = np.array([k[0] for k in keys], dtype=int)
        cols = np.array([k[1] for k in keys], dtype=int)
        vals = np.array([cells[k] for k in keys], dtype=float)
    else:
        rows = np.array([], dtype=int)
        cols = np.array([], dtype=int)
        vals = np.array([], dtype=float)
    csr = sp.csr_matrix((vals, (rows, cols)), shape=(len(users), len(items)))
    return InteractionMatrix(users, items, csr)


class ItemKNN:
    """Truncated item-item cosine similarity over interaction columns."""

    def __init__(self, matrix: InteractionMatrix, k_neighbors: int = 100):
        self.matrix = matrix
        self.k_neighbors = k_neighbors
        self.n_items = len(matrix.items)
        self._build()

    def _build(self):
        cols = self.matrix.csr.tocsc().astype(float)
        norms = np.sqrt(cols.multiply(cols).sum(axis=0)).A1
        inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
        normed = cols @ sp.diags(inv)
        sims = (normed.T @ normed).tocsr()
        self.neighbors: list[tuple[np.ndarray, np.ndarray]] = []
        rev_idx: list[list[int]] = [[] for _ in range(self.n_items)]
        rev_sim: list[list[float]] = [[] for _ in range(self.n_items)]
        for j in range(self.n_items):
            row = sims.getrow(j)
            idx, val = row.indices, row.data
            keep = idx != j
            idx, val = idx[keep], val[keep]
            if idx.size > self.k_neighbors:
                # idx ascends, so stable sort on -val keeps the id tie-break
                order = np.argsort(-val, kind="stable")[:self.k_neighbors]
                order = np.sort(order)
                idx, val = idx[order], val[order]
            self.neighbors.append((idx, val))
            for i, s in zip(idx, val):
                rev_idx[i].append(j)
                rev_sim[i].append(s)
        self.reverse = [(np.array(a, dtype=int), np.array(b))
                        for a, b in zip(rev_idx, rev_sim)]
        self._sims = sims

    def similarity(self, a: str, b: str) -> float:
        ia = self.matrix.iindex.get(a)
        ib = self.matrix.iindex.get(b)
        if ia is None or ib is None:
            raise DataError(f"unknown item {a!r} or {b!r}")
        return float(self._sims[ia, ib])

    def score(self, user_id: str, item_id: str) -> float:
        j = self.matrix.iindex.get(item_id)
        if j is None:
            raise DataError(f"unknown item {item_id!r}")
        if user_id not in self.matrix.uindex:
            return 0.0
        hist_idx, hist_w = self.matrix.user_entries(user_id)
        if hist_idx.size == 0:
            return 0.0
        nb_idx, nb_val = self.neighbors[j]
        wmap = dict(zip(hist_idx.tolist(), hist_w.tolist()))
        return float(sum(s * wmap[i] for i, s in zip(nb_idx.tolist(), nb_val.tolist())
                         if i in wmap))

    def score_vector(self, user_id: str) -> np.ndarray:
        """Scores for every item, zeros for cold users/items."""
        scores = np.zeros(self.n_items)
        if user_id not in self.matrix.uindex:
            return scores
        hist_idx, hist_w = self.matrix.user_entries(user_id)
        for i, w in zip(hist_idx, hist_w):
            ridx, rsim = self.reverse[i]
            if ridx.size:
                scores[ridx] += rsim * w
        return scores

    def item_ids(self):
        return self.matrix.items


def itemknn_score(user_id: str, item_id: str, matrix: InteractionMatrix,
                  k_neighbors: int = 100) -> float:
    """One-off item-kNN score; builds the similarity structure on the fly."""
    if user_id not in matrix.uindex:
        raise DataError(f"unknown user {user_id!r}")
    if item_id not in matrix.iindex:
        raise DataError(f"unknown item {item_id!r}")
    return ItemKNN(matrix, k_neighbors).score(user_id, item_id)


@dataclass
class MFModel:
    users: tuple[str, ...]
    items: tuple[str, ...]
    user_factors: np.ndarray  # (|U|, f)
    item_factors: np.ndarray  # (|I|, f)

    @property
    def f(self) -> int:
        return self.user_factors.shape[1]

    def score(self, user_id: str, item_id: str) -> float:
        u = self._uindex.get(user_id)
        j = self._iindex.get(item_id)
        if j is None:
            raise DataError(f"unknown item {item_id!r}")
        if u is None:
            return 0.0
        return float(self.user_factors[u] @ self.item_factors[j])

    def score_vector(self, user_id: str) -> np.ndarray:
        u = self._uindex.get(user_id)
        if u is None:
            return np.zeros(len(self.items))
        return self.item_factors @ self.user_factors[u]

    def item_ids(self):
        return self.items

    def __post_init__(self):
        self._uindex = {u: i for i, u in enumerate(self.users)}
        self._iindex = {it: i for i, it in enumerate(self.items)}


def bpr_triple_loss(P, Q, u, i, j, reg: float) -> float:
    """-ln sigmoid(x_ui - x_uj) + reg * (|p_u|^2 + |q_i|^2 + |q_j|^2)."""
    diff = float(P[u] @ (Q[i] - Q[j]))
    return float(np.logaddexp(0.0, -diff)
                 + reg * (P[u] @ P[u] + Q[i] @ Q[i] + Q[j] @ Q[j]))


def bpr_triple_grads(P, Q, u, i, j, reg: float):
    """(dP_u, dQ_i, dQ_j) of bpr_triple_loss."""
    diff = float(P[u] @ (Q[i] - Q[j]))
    g = -expit(-diff)
    dP = g * (Q[i] - Q[j]) + 2 * reg * P[u]
    dQi = g * P[u] + 2 * reg * Q[i]
    dQj = -g * P[u] + 2 * reg * Q[j]
    return dP, dQi, dQj


def _sample_bpr_triples(matrix: InteractionMatrix, rng) -> np.ndarray:
    coo = matrix.csr.tocoo()
    if coo.nnz == 0:
        raise DataError("no positive interactions to train on")
    pos_items = [set(matrix.csr.getrow(u).indices.tolist())
                 for u in range(len(matrix.users))]
    n_items = len(matrix.items)
    triples = np.empty((coo.nnz, 3), dtype=int)
    order = np.lexsort((coo.col, coo.row))
    for n, k in enumerate(order):
        u, i = int(coo.row[k]), int(coo.col[k])
        owned = pos_items[u]
        if len(owned) >= n_items:
            j = i  # degenerate catalog fully owned by the user
        else:
            while True:
                j = int(rng.integers(0, n_items))
                if j not in owned:
                    break
        triples[n] = (u, i, j)
    return triples


def mean_bpr_loss(P, Q, triples, reg: float) -> float:
    u, i, j = triples[:, 0], triples[:, 1], triples[:, 2]
    diff = np.einsum("bf,bf->b", P[u], Q[i] - Q[j])
    base = np.logaddexp(0.0, -diff)
    r = reg * ((P[u] * P[u]).sum(axis=1) + (Q[i] * Q[i]).sum(axis=1)
               + (Q[j] * Q[j]).sum(axis=1))
    return float((base + r).mean())


def train_bpr(matrix: InteractionMatrix, f: int, config: TrainingConfig,
              reg: float = 1e-4):
    """Minibatch SGD over fixed (user, pos, sampled-neg) triples.

    Returns (MFModel, per-epoch losses on the fixed triple set).
    """
    if f < 1:
        raise ConfigError(f"latent dimension must be >= 1, got {f}")
    config.validate()
    rng = np.random.default_rng(config.seed)
    P = 0.1 * rng.standard_normal((len(matrix.users), f))
    Q = 0.1 * rng.standard_normal((len(matrix.items), f))
    triples = _sample_bpr_triples(matrix, rng)
    losses = []
    for _ in range(config.epochs):
        order = rng.permutation(len(triples))
        for start in range(0, len(order), config.batch_size):
            sel = triples[order[start:start + config.batch_size]]
            u, i, j = sel[:, 0], sel[:, 1], sel[:, 2]
            pu, qi, qj = P[u], Q[i], Q[j]
            diff = np.einsum("bf,bf->b", pu, qi - qj)
            g = -expit(-diff)[:, None] / len(sel)
            dP = np.zeros_like(P)
            dQ = np.zeros_like(Q)
            np.add.at(dP, u, g * (qi - qj) + 2 * reg * pu / len(sel))
            np.add.at(dQ, i, g * pu + 2 * reg * qi / len(sel))
            np.add.at(dQ, j, -g * pu + 2 * reg * qj / len(sel))
            P -= config.learning_rate * dP
            Q -= config.learning_rate * dQ
        losses.append(mean_bpr_loss(P, Q, triples, reg))
    return MFModel(matrix.users, matrix.items, P, Q), losses


def cf_score(backend, user_id: str, item_id: str) -> float:
    """Dispatch to whichever trained backend (ItemKNN or MFModel) is given."""
    if backend is None:
        raise DependencyError("cf backend not initialized")
    return backend.score(user_id, item_id)


# -- persistence ------------------------------------------------------------

def save_mf(model: MFModel, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{len(model.users)} {len(model.items)} {model.f}\n")
        f.write(" ".join(model.users) + "\n")
        f.write(" ".join(model.items) + "\n")
        for row in model.user_factors:
            f.write(" ".join(repr(float(x)) for x in row) + "\n")
        for row in model.item_factors:
            f.write(" ".join(repr(float(x)) for x in row) + "\n")


def load_mf(path) -> MFModel:
    with open(path, encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f]
    try:
        nu, ni, nf = (int(x) for x in lines[0].split())
        users = tuple(lines[1].split())
        items = tuple(lines[2].split())
        P = np.array([[float(x) for x in lines[3 + r].split()] for r in range(nu)])
        Q = np.array([[float(x) for x in lines[3 + nu + r].split()] for r in range(ni)])
    except (IndexError, ValueError) as exc:
        raise DataError(f"{path}: malformed factor file ({exc})") from exc
    if P.shape != (nu, nf) or Q.shape != (ni, nf):
        raise DataError(f"{path}: factor shapes do not match header")
    return MFModel(users, items, P, Q)


def save_itemknn(knn: ItemKNN, path) -> None:
    """Persist the truncated neighbor lists plus the interaction rows."""
    m = knn.matrix
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"k_neighbors": knn.k_neighbors,
                            "n_users": len(m.users), "n_items": len(m.items)}) + "\n")
        f.write(json.dumps(list(m.users)) + "\n")
        f.write(json.dumps(list(m.items)) + "\n")
        coo = m.csr.tocoo()
        order = np.lexsort((coo.col, coo.row))
        cells = [[int(coo.row[k]), int(coo.col[k]), float(coo.data[k])] for k in order]
        f.write(json.dumps(cells) + "\n")
        for j in range(knn.n_items):
            idx, val = knn.neighbors[j]
            f.write(json.dumps([j, [[int(i), float(s)] for i, s in zip(idx, val)]])
                    + "\n")


def load_itemknn(path) -> ItemKNN:
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    try:
        head = json.loads(lines[0])
        users = json.loads(lines[1])
        items = json.loads(lines[2])
        cells = json.loads(lines[3])
    except (IndexError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed item-knn file ({exc})") from exc
    rows = np.array([c[0] for c in cells], dtype=int)
    cols = np.array([c[1] for c in cells], dtype=int)
    vals = np.array([c[2] for c in cells], dtype=float)
    csr = sp.csr_matrix((vals, (rows, cols)), shape=(len(users), len(items)))
    matrix = InteractionMatrix(users, items, csr)
    return ItemKNN(matrix, head["k_neighbors"])
