"""Offline metric suite: Recall@K, HitRate@K, NDCG@K, inter-user Jaccard
diversity, tail coverage, and wall-clock latency measurement."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import TAIL, Dataset
from .errors import DataError


def recall_at_k(recommended, relevant, k: int) -> float:
    """|top-k intersect relevant| / |relevant|."""
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if not relevant:
        raise DataError("empty relevant set")
    top = set(list(recommended)[:k])
    return len(top & set(relevant)) / len(relevant)


def hit_at_k(recommended, relevant, k: int) -> float:
    """1 if any relevant item appears in the top-k, else 0."""
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if not relevant:
        raise DataError("empty relevant set")
    top = set(list(recommended)[:k])
    return 1.0 if top & set(relevant) else 0.0


def hit_rate_at_k(recommended_by_user: dict, relevant_by_user: dict, k: int) -> float:
    """Mean per-user hit indicator over users with a nonempty relevant set."""
    hits = [hit_at_k(recommended_by_user[u], relevant_by_user[u], k)
            for u in sorted(relevant_by_user) if relevant_by_user[u]]
    if not hits:
        raise DataError("no users with relevant items")
    return float(np.mean(hits))


def ndcg_at_k(recommended, relevant, k: int) -> float:
    """Binary-relevance NDCG: DCG / ideal DCG of min(|relevant|, k) items."""
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if not relevant:
        raise DataError("empty relevant set")
    rel = set(relevant)
    dcg = 0.0
    for rank, iid in enumerate(list(recommended)[:k], start=1):
        if iid in rel:
            dcg += 1.0 / math.log2(rank + 1)
    ideal = sum(1.0 / math.log2(r + 1) for r in range(1, min(len(rel), k) + 1))
    return dcg / ideal


def jaccard_distance(a, b) -> float:
    sa, sb = set(a), set(b)
    union = sa | sb
    if not union:
        return 0.0
    return 1.0 - len(sa & sb) / len(union)


def diversity(lists_by_user: dict, sample_pairs: int = 10000, seed: int = 0) -> float:
    """Mean Jaccard distance between user pairs' top lists.

    All pairs are used when the pair count fits in sample_pairs, otherwise a
    seeded sample of pairs is drawn.
    """
    users = sorted(lists_by_user)
    n = len(users)
    if n < 2:
        raise DataError("diversity needs at least two users")
    n_pairs = n * (n - 1) // 2
    if n_pairs <= sample_pairs:
        pairs = [(a, b) for a in range(n) for b in range(a + 1, n)]
    else:
        rng = np.random.default_rng(seed)
        pairs = []
        for _ in range(sample_pairs):
            a = int(rng.integers(0, n))
            b = int(rng.integers(0, n - 1))
            if b >= a:
                b += 1
            pairs.append((min(a, b), max(a, b)))
    dists = [jaccard_distance(lists_by_user[users[a]], lists_by_user[users[b]])
             for a, b in pairs]
    return float(np.mean(dists))


def tail_coverage(lists_by_user: dict, catalog: Dataset,
                  distinct: bool = False) -> float:
    """Share of recommended slots occupied by tail items.

    distinct=True counts each distinct recommended item once instead.
    """
    flags = {}
    for it in catalog.items:
        if it.tail_flag is None:
            raise DataError(f"item {it.item_id!r} has no head/tail flag; "
                            "run head/tail classification first")
        flags[it.item_id] = it.tail_flag
    if distinct:
        seen = set()
        for lst in lists_by_user.values():
            seen.update(lst)
        if not seen:
            raise DataError("no recommendations to measure")
        return sum(1 for iid in seen if flags[iid] == TAIL) / len(seen)
    total = 0
    tail = 0
    for user in sorted(lists_by_user):
        for iid in lists_by_user[user]:
            total += 1
            if flags[iid] == TAIL:
                tail += 1
    if total == 0:
        raise DataError("no recommendations to measure")
    return tail / total


def measure_latency(pipeline_fn, users, warmup: int = 5) -> dict:
    """Median/p95/mean wall-clock per-user latency in milliseconds.

    The first `warmup` calls are excluded from the statistics. Runs strictly
    sequentially.
    """
    users = list(users)
    if not users:
        raise DataError("empty user sample")
    times = []
    for n, user in enumerate(users):
        t0 = time.perf_counter()
        pipeline_fn(user)
        dt = (time.perf_counter() - t0) * 1000.0
        if n >= warmup:
            times.append(dt)
    if not times:
        raise DataError("warmup consumed the whole sample")
    arr = np.array(times)
    return {
        "median": float(np.median(arr)),
        "p95": float(np.percentile(arr, 95)),
        "mean": float(arr.mean()),
    }


@dataclass
class MetricReport:
    recall_at: dict[int, float] = field(default_factory=dict)
    hit_rate_at: dict[int, float] = field(default_factory=dict)
    ndcg_at: dict[int, float] = field(default_factory=dict)
    diversity: float = 0.0
    tail_coverage: float = 0.0
    latency_ms: dict[str, float] | None = None

    def lines(self) -> list[str]:
        """Deterministic metric<TAB>value lines (latency excluded; it is
        wall-clock and goes to its own sidecar)."""
        out = []
        for k in sorted(self.recall_at):
            out.append(f"recall@{k}\t{self.recall_at[k]:.6g}")
        for k in sorted(self.hit_rate_at):
            out.append(f"hit_rate@{k}\t{self.hit_rate_at[k]:.6g}")
        for k in sorted(self.ndcg_at):
            out.append(f"ndcg@{k}\t{self.ndcg_at[k]:.6g}")
        out.append(f"diversity\t{self.diversity:.6g}")
        out.append(f"tail_coverage\t{self.tail_coverage:.6g}")
        return out

    def latency_lines(self) -> list[str]:
        if not self.latency_ms:
            return []
        return [f"latency_ms_{key}\t{self.latency_ms[key]:.6g}"
                for key in ("median", "p95", "mean")]
