"""Catalog and interaction data: JSONL ingestion, head/tail classification,
per-user chronological hold-out, and a seeded power-law synthetic generator.

Datasets are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError

HEAD = "head"
TAIL = "tail"

CLICK = "click"
CART = "cart"
PURCHASE = "purchase"
ACTIONS = (CLICK, CART, PURCHASE)

# tolerance when a fraction*count product should be an exact integer
_FRAC_EPS = 1e-9


@dataclass(frozen=True)
class ItemRecord:
    item_id: str
    title: str = ""
    description: str = ""
    review_summary: str = ""
    sales_volume: int = 0
    tokens: tuple[str, ...] = ()
    tail_flag: str | None = None


@dataclass(frozen=True)
class InteractionRecord:
    user_id: str
    item_id: str
    action: str
    timestamp: int


class Dataset:
    """Immutable catalog plus a time-ordered interaction log.

    Interactions are stably sorted by timestamp at construction, so each
    user's subsequence keeps its original relative order for equal stamps.
    """

    def __init__(self, items, interactions):
        items = tuple(items)
        seen = set()
        for it in items:
            if it.item_id in seen:
                raise DataError(f"duplicate item_id in catalog: {it.item_id!r}")
            if it.sales_volume < 0:
                raise DataError(f"negative sales_volume for item {it.item_id!r}")
            seen.add(it.item_id)
        self.items = items
        self.items_by_id = {it.item_id: it for it in items}
        for rec in interactions:
            if rec.item_id not in self.items_by_id:
                raise DataError(f"interaction references unknown item {rec.item_id!r}")
            if rec.action not in ACTIONS:
                raise DataError(f"unknown action {rec.action!r}")
        self.interactions = tuple(sorted(interactions, key=lambda r: r.timestamp))
        seqs: dict[str, list[InteractionRecord]] = {}
        for rec in self.interactions:
            seqs.setdefault(rec.user_id, []).append(rec)
        self.user_sequences = {u: tuple(rs) for u, rs in seqs.items()}
        self.users = tuple(sorted(self.user_sequences))

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_interactions(self) -> int:
        return len(self.interactions)

    @property
    def n_users(self) -> int:
        return len(self.users)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.items == other.items and self.interactions == other.interactions

    def __repr__(self):
        return (f"Dataset(items={self.n_items}, interactions={self.n_interactions}, "
                f"users={self.n_users})")


@dataclass(frozen=True)
class SplitDataset:
    train: Dataset
    test: Dataset
    holdout_fraction: float


def load_dataset(catalog_path, interactions_path) -> Dataset:
    """Load catalog + interactions JSONL files into a validated Dataset."""
    items = []
    for lineno, obj in _read_jsonl(catalog_path):
        try:
            items.append(ItemRecord(
                item_id=str(obj["item_id"]),
                title=str(obj.get("title", "")),
                description=str(obj.get("description", "")),
                review_summary=str(obj.get("review_summary", "")),
                sales_volume=int(obj.get("sales_volume", 0)),
                tokens=tuple(str(obj.get("tokens", "")).split()),
                tail_flag=obj.get("tail_flag"),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{catalog_path}:{lineno}: bad catalog record ({exc})") from exc
    interactions = []
    for lineno, obj in _read_jsonl(interactions_path):
        try:
            rec = InteractionRecord(
                user_id=str(obj["user_id"]),
                item_id=str(obj["item_id"]),
                action=str(obj["action"]),
                timestamp=int(obj["timestamp"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{interactions_path}:{lineno}: bad interaction record ({exc})") from exc
        if rec.action not in ACTIONS:
            raise DataError(f"{interactions_path}:{lineno}: unknown action {rec.action!r}")
        interactions.append(rec)
    return Dataset(items, interactions)


def save_dataset(dataset: Dataset, catalog_path, interactions_path) -> None:
    with open(catalog_path, "w", encoding="utf-8") as f:
        for it in dataset.items:
            obj = {
                "item_id": it.item_id,
                "title": it.title,
                "description": it.description,
                "review_summary": it.review_summary,
                "sales_volume": it.sales_volume,
                "tokens": " ".join(it.tokens),
            }
            if it.tail_flag is not None:
                obj["tail_flag"] = it.tail_flag
            f.write(json.dumps(obj, sort_keys=True) + "\n")
    with open(interactions_path, "w", encoding="utf-8") as f:
        for rec in dataset.interactions:
            f.write(json.dumps({
                "user_id": rec.user_id,
                "item_id": rec.item_id,
                "action": rec.action,
                "timestamp": rec.timestamp,
            }, sort_keys=True) + "\n")


def _read_jsonl(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed line ({exc.msg})") from exc


def classify_head_tail(dataset: Dataset, head_fraction: float,
                       recompute_sales: bool = False) -> Dataset:
    """Flag the top max(1, floor(head_fraction*N)) items by sales as head.

    Ties in sales_volume break toward the lexicographically smaller item_id,
    so the head set is independent of catalog order.
    """
    if not 0 < head_fraction < 1:
        raise DataError(f"head_fraction must be in (0,1), got {head_fraction}")
    if dataset.n_items == 0:
        raise DataError("cannot classify an empty catalog")
    if recompute_sales:
        counts: dict[str, int] = {}
        for rec in dataset.interactions:
            if rec.action == PURCHASE:
                counts[rec.item_id] = counts.get(rec.item_id, 0) + 1
        sales = {it.item_id: counts.get(it.item_id, 0) for it in dataset.items}
    else:
        sales = {it.item_id: it.sales_volume for it in dataset.items}
    n_head = max(1, math.floor(head_fraction * dataset.n_items + _FRAC_EPS))
    ranked = sorted(dataset.items, key=lambda it: (-sales[it.item_id], it.item_id))
    head_ids = {it.item_id for it in ranked[:n_head]}
    flagged = [replace(it, tail_flag=HEAD if it.item_id in head_ids else TAIL)
               for it in dataset.items]
    return Dataset(flagged, dataset.interactions)


def chronological_split(dataset: Dataset, holdout_fraction: float) -> SplitDataset:
    """Per user, hold out the last ceil(fraction*n) interactions as test.

    Single-interaction users stay train-only, and every user keeps at least
    one train interaction so no user goes cold in the train split.
    """
    if not 0 < holdout_fraction < 1:
        raise DataError(f"holdout_fraction must be in (0,1), got {holdout_fraction}")
    train_recs, test_recs = [], []
    for user in dataset.users:
        seq = dataset.user_sequences[user]
        n = len(seq)
        if n == 1:
            train_recs.append(seq[0])
            continue
        n_test = min(n - 1, math.ceil(holdout_fraction * n - _FRAC_EPS))
        train_recs.extend(seq[:n - n_test])
        test_recs.extend(seq[n - n_test:])
    return SplitDataset(
        train=Dataset(dataset.items, train_recs),
        test=Dataset(dataset.items, test_recs),
        holdout_fraction=holdout_fraction,
    )


def generate_synthetic(seed: int, n_users: int, n_items: int, n_interactions: int,
                       zipf_exponent: float, n_clusters: int = 8) -> Dataset:
    """Seeded synthetic catalog + log with Zipf item popularity.

    Users draw mostly from one latent preference cluster so collaborative,
    semantic (shared token pools per cluster) and sequential signals all
    exist. sales_volume is the generated purchase count per item. Timestamps
    are strictly increasing within each user.
    """
    if min(n_users, n_items, n_interactions) < 1:
        raise DataError("n_users, n_items and n_interactions must all be >= 1")
    if zipf_exponent <= 0:
        raise DataError(f"zipf_exponent must be > 0, got {zipf_exponent}")
    if n_interactions < n_users:
        raise DataError(
            f"n_interactions={n_interactions} < n_users={n_users}: "
            "cannot give every user at least one interaction")
    rng = np.random.default_rng(seed)
    n_clusters = max(1, min(n_clusters, n_items))

    item_ids = [f"i{idx:06d}" for idx in range(n_items)]
    user_ids = [f"u{idx:05d}" for idx in range(n_users)]
    clusters = rng.integers(0, n_clusters, size=n_items)

    pop = np.arange(1, n_items + 1, dtype=float) ** (-zipf_exponent)
    pop /= pop.sum()
    global_cum = np.cumsum(pop)
    cluster_members: list[np.ndarray] = []
    cluster_cum: list[np.ndarray] = []
    for c in range(n_clusters):
        members = np.flatnonzero(clusters == c)
        if members.size == 0:
            members = np.arange(n_items)
        w = pop[members]
        cluster_members.append(members)
        cluster_cum.append(np.cumsum(w / w.sum()))

    user_cluster = rng.integers(0, n_clusters, size=n_users)
    activity = rng.permutation(np.arange(1, n_users + 1, dtype=float) ** -0.7)
    activity /= activity.sum()
    counts = rng.multinomial(n_interactions - n_users, activity) + 1

    action_cuts = np.array([0.6, 0.85])  # click / cart / purchase shares
    interactions = []
    for uidx in range(n_users):
        k = int(counts[uidx])
        c = int(user_cluster[uidx])
        in_cluster = rng.random(k) < 0.8
        draws = rng.random(k)
        local = np.minimum(np.searchsorted(cluster_cum[c], draws),
                           len(cluster_cum[c]) - 1)
        globl = np.minimum(np.searchsorted(global_cum, draws), n_items - 1)
        picked = np.where(in_cluster, cluster_members[c][local], globl)
        action_idx = np.searchsorted(action_cuts, rng.random(k))
        t = int(rng.integers(1_500_000_000, 1_500_086_400))
        gaps = rng.integers(60, 3600, size=k)
        for j in range(k):
            t += int(gaps[j])
            interactions.append(InteractionRecord(
                user_id=user_ids[uidx],
                item_id=item_ids[int(picked[j])],
                action=ACTIONS[int(action_idx[j])],
                timestamp=t,
            ))

    purchases: dict[str, int] = {}
    for rec in interactions:
        if rec.action == PURCHASE:
            purchases[rec.item_id] = purchases.get(rec.item_id, 0) + 1

    cluster_vocab = [[f"c{c}t{j}" for j in range(30)] for c in range(n_clusters)]
    global_vocab = [f"g{j}" for j in range(20)]
    items = []
    for idx, item_id in enumerate(item_ids):
        c = int(clusters[idx])
        toks = []
        for _ in range(8):
            if rng.random() < 0.75:
                toks.append(cluster_vocab[c][int(rng.integers(0, len(cluster_vocab[c])))])
            else:
                toks.append(global_vocab[int(rng.integers(0, len(global_vocab)))])
        sold = purchases.get(item_id, 0)
        items.append(ItemRecord(
            item_id=item_id,
            title=f"Product {item_id}",
            description=" ".join(toks),
            review_summary=f"{sold} recorded purchases",
            sales_volume=sold,
            tokens=tuple(toks),
        ))
    return Dataset(items, interactions)
