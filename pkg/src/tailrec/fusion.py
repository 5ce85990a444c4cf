"""Three-channel score fusion: candidate recall from all sources, per-channel
normalization across the candidate set, weighted linear combination, and the
weight-simplex grid used for validation tuning.

Channel scales are wildly different (a cosine in [-1,1], an unbounded CF
accumulation, a log-probability), so scores are z-scored per candidate set by
default before the weighted sum; min-max and raw modes are kept switchable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .embeddings import EmbeddingMatrix, top_k_semantic
from .errors import ColdUserError, ConfigError, DataError
from .intent import AttentionParams, UserHistory, intent, truncate_history
from .seqmodel import MarkovModel, beam_search

ZSCORE = "zscore"
MINMAX = "minmax"
NONE = "none"


@dataclass(frozen=True)
class FusionWeights:
    lam_sem: float
    lam_cf: float
    lam_gen: float

    def __post_init__(self):
        w = (self.lam_sem, self.lam_cf, self.lam_gen)
        if min(w) < 0:
            raise ConfigError(f"fusion weights must be >= 0, got {w}")
        if max(w) == 0:
            raise ConfigError("fusion weights must not all be zero")

    def as_tuple(self):
        return (self.lam_sem, self.lam_cf, self.lam_gen)


@dataclass(frozen=True)
class ScoreTriple:
    s_sem: float
    s_cf: float
    s_gen: float


@dataclass(frozen=True)
class RecommendationList:
    user_id: str
    items: tuple[tuple[str, float], ...]  # (item_id, fused score) descending
    k: int

    def item_ids(self):
        return [iid for iid, _ in self.items]


def normalize_channel(values, mode: str = ZSCORE) -> np.ndarray:
    """Normalize one score channel across a candidate set."""
    v = np.asarray(values, dtype=float)
    if mode == NONE:
        return v.copy()
    if mode == ZSCORE:
        std = v.std()
        if std < 1e-12:
            return np.zeros_like(v)
        return (v - v.mean()) / std
    if mode == MINMAX:
        lo, hi = v.min(), v.max()
        if hi - lo < 1e-12:
            return np.full_like(v, 0.5)
        return (v - lo) / (hi - lo)
    raise ConfigError(f"unknown normalization mode {mode!r}")


def fuse(triples: dict[str, ScoreTriple], weights: FusionWeights, k: int,
         user_id: str = "") -> RecommendationList:
    """Weighted sum of the three channels; top-k descending, ties by id."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if not triples:
        raise DataError("no candidates to fuse")
    items = sorted(triples)
    scores = [weights.lam_sem * triples[i].s_sem
              + weights.lam_cf * triples[i].s_cf
              + weights.lam_gen * triples[i].s_gen for i in items]
    order = sorted(range(len(items)), key=lambda i: (-scores[i], items[i]))
    top = tuple((items[i], float(scores[i])) for i in order[:k])
    return RecommendationList(user_id, top, k)


def grid_points(step: float) -> list[tuple[float, float, float]]:
    """All weight triples on the simplex lam1+lam2+lam3 = 1 with the given
    spacing."""
    if not 0 < step <= 1:
        raise ConfigError(f"grid step must be in (0,1], got {step}")
    m = math.floor(1.0 / step + 1e-9)
    pts = []
    for i in range(m + 1):
        for j in range(m + 1 - i):
            l1 = i * step
            l2 = j * step
            l3 = max(1.0 - l1 - l2, 0.0)
            pts.append((l1, l2, l3))
    return pts


def select_weights(evaluate_fn, step: float,
                   anchor=(0.4, 0.4, 0.2)) -> FusionWeights:
    """Argmax of evaluate_fn over the simplex grid.

    Ties break toward the point closest to the anchor, then lexicographically.
    """
    best_key = None
    best_pt = None
    for pt in grid_points(step):
        score = float(evaluate_fn(pt))
        dist = math.dist(pt, anchor)
        key = (-score, dist, pt)
        if best_key is None or key < best_key:
            best_key, best_pt = key, pt
    return FusionWeights(*best_pt)


@dataclass(frozen=True)
class CandidateScores:
    """Normalized per-channel scores for one user's candidate pool, plus the
    user's relevant hold-out items. items ascend so score ties stay stable."""

    user_id: str
    items: tuple[str, ...]
    sem: np.ndarray
    cf: np.ndarray
    gen: np.ndarray
    relevant: frozenset


def fused_ranking(cs: CandidateScores, weights, k: int) -> list[str]:
    """Top-k item ids for one precomputed candidate pool."""
    w1, w2, w3 = weights if not isinstance(weights, FusionWeights) else weights.as_tuple()
    scores = w1 * cs.sem + w2 * cs.cf + w3 * cs.gen
    order = np.argsort(-scores, kind="stable")
    return [cs.items[i] for i in order[:k]]


class HybridPipeline:
    """Serving path: intent encoding, three-source recall, triple scoring,
    and fused top-k. Pure over its immutable trained state."""

    def __init__(self, train: Dataset, embeddings: EmbeddingMatrix,
                 intent_params: AttentionParams, cf_backend, markov: MarkovModel,
                 weights: FusionWeights, normalization: str = ZSCORE,
                 t_max: int = 50):
        self.train = train
        self.embeddings = embeddings
        self.intent_params = intent_params
        self.cf_backend = cf_backend
        self.markov = markov
        self.weights = weights
        self.normalization = normalization
        self.t_max = t_max
        self._cf_index = {iid: i for i, iid in enumerate(cf_backend.item_ids())}

    def history(self, user_id: str) -> UserHistory:
        seq = self.train.user_sequences.get(user_id)
        if not seq:
            raise ColdUserError(f"user {user_id!r} has no training history")
        return truncate_history(
            UserHistory(user_id, tuple(r.item_id for r in seq)), self.t_max)

    def _exclude(self, user_id: str) -> frozenset:
        seq = self.train.user_sequences.get(user_id, ())
        return frozenset(r.item_id for r in seq)

    def intent_of(self, history: UserHistory) -> np.ndarray:
        return intent(history, self.intent_params, self.embeddings).h

    def recall_candidates(self, history: UserHistory, k_each: int) -> tuple[str, ...]:
        """Union of each source's top-k_each, training history excluded."""
        h = self.intent_of(history)
        return self._recall(h, history, k_each, self._exclude(history.user_id))

    def _recall(self, h, history, k_each, exclude) -> tuple[str, ...]:
        if k_each < 1:
            raise ConfigError(f"k_each must be >= 1, got {k_each}")
        sem = top_k_semantic(h, self.embeddings, k_each, exclude)
        pool = {iid for iid, _ in sem}
        cf_scores = self.cf_backend.score_vector(history.user_id)
        ids = self.cf_backend.item_ids()
        masked = np.array([-np.inf if iid in exclude else cf_scores[i]
                           for i, iid in enumerate(ids)])
        order = np.argsort(-masked, kind="stable")
        taken = 0
        for row in order:
            if taken >= k_each or not np.isfinite(masked[row]):
                break
            pool.add(ids[row])
            taken += 1
        beam = beam_search(self.markov, history, k_each, exclude)
        pool.update(iid for iid, _ in beam.candidates)
        return tuple(sorted(pool))

    def score_candidates(self, history: UserHistory,
                         candidates) -> dict[str, ScoreTriple]:
        """Raw triple per candidate, then per-channel normalization."""
        h = self.intent_of(history)
        cs = self._score(h, history, tuple(sorted(candidates)))
        return {iid: ScoreTriple(float(cs.sem[i]), float(cs.cf[i]), float(cs.gen[i]))
                for i, iid in enumerate(cs.items)}

    def _score(self, h, history, candidates: tuple[str, ...],
               relevant=frozenset()) -> CandidateScores:
        if not candidates:
            raise DataError("empty candidate set")
        vecs = np.stack([self.embeddings.vector(iid) for iid in candidates])
        hn = np.linalg.norm(h)
        if hn < 1e-12:
            raise DataError("degenerate intent vector")
        norms = np.linalg.norm(vecs, axis=1)
        sem_raw = np.clip(vecs @ h / (norms * hn), -1.0, 1.0)
        cf_all = self.cf_backend.score_vector(history.user_id)
        cf_raw = np.array([cf_all[self._cf_index[iid]] for iid in candidates])
        gen_raw = np.array([math.log(self.markov.prob(history.items, iid))
                            for iid in candidates])
        return CandidateScores(
            history.user_id, candidates,
            normalize_channel(sem_raw, self.normalization),
            normalize_channel(cf_raw, self.normalization),
            normalize_channel(gen_raw, self.normalization),
            frozenset(relevant))

    def candidate_scores(self, user_id: str, k_each: int,
                         relevant=frozenset()) -> CandidateScores:
        """Recall + score in one pass (shared by evaluation and grid search)."""
        history = self.history(user_id)
        h = self.intent_of(history)
        cands = self._recall(h, history, k_each, self._exclude(user_id))
        return self._score(h, history, cands, relevant)

    def recommend(self, user_id: str, k: int,
                  k_each: int | None = None) -> RecommendationList:
        """Fused top-k for one user; never contains training-history items."""
        if k < 1:
            raise ConfigError(f"k must be >= 1, got {k}")
        cs = self.candidate_scores(user_id, k_each or k)
        w = self.weights.as_tuple()
        scores = w[0] * cs.sem + w[1] * cs.cf + w[2] * cs.gen
        order = np.argsort(-scores, kind="stable")
        top = tuple((cs.items[i], float(scores[i])) for i in order[:k])
        return RecommendationList(user_id, top, k)
