"""Item embeddings: token pooling, a deterministic hash pseudo-embedder that
stands in for an external text-embedding provider, file ingestion, cosine
similarity, and exhaustive top-k retrieval.

An EmbeddingMatrix is immutable once built; retrieval and cosine are pure and
safe to call concurrently over a shared matrix.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .data import Dataset, ItemRecord, _read_jsonl
from .errors import DataError

AVERAGE = "average"
FIRST = "first"

MIN_DIM = 2
MAX_DIM = 4096


@dataclass(frozen=True)
class ItemEmbedding:
    item_id: str
    vector: np.ndarray
    normalized: bool = False


class EmbeddingMatrix:
    """Dense per-item vectors with rows ordered by ascending item_id."""

    def __init__(self, item_ids, vectors):
        order = np.argsort(np.asarray(item_ids, dtype=object))
        self.item_ids = tuple(item_ids[i] for i in order)
        if len(set(self.item_ids)) != len(self.item_ids):
            raise DataError("duplicate item_id in embedding matrix")
        vecs = np.asarray(vectors, dtype=float)[order]
        if vecs.ndim != 2:
            raise DataError("embedding vectors must form a 2-d array")
        if not (MIN_DIM <= vecs.shape[1] <= MAX_DIM):
            raise DataError(f"embedding dim must be in [{MIN_DIM}, {MAX_DIM}], "
                            f"got {vecs.shape[1]}")
        if not np.all(np.isfinite(vecs)):
            raise DataError("non-finite embedding entries")
        norms = np.linalg.norm(vecs, axis=1)
        if np.any(norms < 1e-12):
            bad = self.item_ids[int(np.argmin(norms))]
            raise DataError(f"zero-norm embedding for item {bad!r}")
        vecs.setflags(write=False)
        self.vectors = vecs
        self.row_norms = norms
        self.index = {iid: row for row, iid in enumerate(self.item_ids)}
        self.dim = vecs.shape[1]

    def vector(self, item_id: str) -> np.ndarray:
        row = self.index.get(item_id)
        if row is None:
            raise DataError(f"item {item_id!r} not in embedding matrix")
        return self.vectors[row]

    def __len__(self):
        return len(self.item_ids)


def pool(vectors, mode: str = AVERAGE) -> np.ndarray:
    """Pool a token-vector sequence into one item vector (not normalized).

    AVERAGE is the elementwise mean; FIRST copies the leading vector.
    """
    vecs = [np.asarray(v, dtype=float) for v in vectors]
    if not vecs:
        raise DataError("cannot pool an empty token sequence")
    dim = vecs[0].shape[0] if vecs[0].ndim == 1 else -1
    for v in vecs:
        if v.ndim != 1 or v.shape[0] != dim:
            raise DataError("dimension mismatch within token sequence")
    if mode == AVERAGE:
        return np.mean(vecs, axis=0)
    if mode == FIRST:
        return vecs[0].copy()
    raise DataError(f"unknown pooling mode {mode!r}")


def _token_vector(token: str, dim: int, seed: int) -> np.ndarray:
    digest = hashlib.blake2b(f"{seed}:{token}".encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "big"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def pseudo_embed(item: ItemRecord, dim: int, seed: int = 0,
                 mode: str = AVERAGE) -> ItemEmbedding:
    """Deterministic unit embedding built from hashed token vectors.

    Each token maps to a platform-stable random unit vector (blake2b-seeded
    generator), the sequence is pooled, and the result is L2-normalized.
    """
    if dim < MIN_DIM:
        raise DataError(f"dim must be >= {MIN_DIM}, got {dim}")
    if not item.tokens:
        raise DataError(f"item {item.item_id!r} has no tokens to embed")
    pooled = pool([_token_vector(t, dim, seed) for t in item.tokens], mode)
    norm = np.linalg.norm(pooled)
    if norm < 1e-12:
        raise DataError(f"degenerate pooled vector for item {item.item_id!r}")
    return ItemEmbedding(item.item_id, pooled / norm, normalized=True)


def embed_catalog(dataset: Dataset, dim: int, seed: int = 0,
                  mode: str = AVERAGE) -> EmbeddingMatrix:
    """Pseudo-embed every catalog item into one matrix."""
    embs = [pseudo_embed(it, dim, seed, mode) for it in dataset.items]
    return EmbeddingMatrix([e.item_id for e in embs], [e.vector for e in embs])


def ingest_embeddings(path, catalog: Dataset) -> EmbeddingMatrix:
    """Read a provider embedding file and L2-normalize every row.

    The file starts with a header line declaring the dimension, then one
    record per line with item_id and vector. Every catalog item must appear
    exactly once.
    """
    rows = {}
    dim = None
    for lineno, obj in _read_jsonl(path):
        if dim is None:
            if "dim" not in obj:
                raise DataError(f"{path}:1: header must declare dim")
            dim = int(obj["dim"])
            continue
        iid = str(obj.get("item_id"))
        vec = np.asarray(obj.get("vector", []), dtype=float)
        if iid in rows:
            raise DataError(f"{path}:{lineno}: duplicate item {iid!r}")
        if vec.shape != (dim,):
            raise DataError(f"{path}:{lineno}: item {iid!r} has dim {vec.shape}, "
                            f"expected ({dim},)")
        finite = np.isfinite(vec)
        if not finite.all():
            pos = int(np.flatnonzero(~finite)[0])
            raise DataError(f"{path}:{lineno}: non-finite value for item {iid!r} "
                            f"at position {pos}")
        rows[iid] = vec
    if dim is None:
        raise DataError(f"{path}: empty embedding file")
    for it in catalog.items:
        if it.item_id not in rows:
            raise DataError(f"embedding file missing item {it.item_id!r}")
    extra = set(rows) - set(catalog.items_by_id)
    if extra:
        raise DataError(f"embedding file has unknown items: {sorted(extra)[:3]}")
    ids = [it.item_id for it in catalog.items]
    vecs = np.stack([rows[i] for i in ids])
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        bad = ids[int(np.argmin(norms))]
        raise DataError(f"zero-norm embedding for item {bad!r}")
    return EmbeddingMatrix(ids, vecs / norms)


def save_embeddings(matrix: EmbeddingMatrix, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"dim": matrix.dim}) + "\n")
        for iid in matrix.item_ids:
            vec = [float(x) for x in matrix.vector(iid)]
            f.write(json.dumps({"item_id": iid, "vector": vec}, sort_keys=True) + "\n")


def cosine(a, b) -> float:
    """Cosine similarity, clamped to [-1, 1] against rounding overshoot."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DataError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        raise DataError("cosine undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def top_k_semantic(query, matrix: EmbeddingMatrix, k: int,
                   exclude=frozenset()) -> list[tuple[str, float]]:
    """Exhaustive top-k by cosine, descending, ties toward smaller item_id."""
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    query = np.asarray(query, dtype=float)
    if query.shape != (matrix.dim,):
        raise DataError(f"query dim {query.shape} does not match matrix dim "
                        f"({matrix.dim},)")
    qn = np.linalg.norm(query)
    if qn < 1e-12:
        raise DataError("cosine undefined for a zero query")
    scores = matrix.vectors @ query / (matrix.row_norms * qn)
    np.clip(scores, -1.0, 1.0, out=scores)
    if exclude:
        keep = np.fromiter((iid not in exclude for iid in matrix.item_ids),
                           dtype=bool, count=len(matrix.item_ids))
    else:
        keep = np.ones(len(matrix.item_ids), dtype=bool)
    masked = np.where(keep, scores, -np.inf)
    # rows are in ascending item_id order, so stable sort gives the id tie-break
    order = np.argsort(-masked, kind="stable")
    out = []
    for row in order[:k]:
        if not keep[row]:
            break
        out.append((matrix.item_ids[row], float(scores[row])))
    return out
