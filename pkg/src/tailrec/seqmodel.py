"""Smoothed back-off Markov sequence model standing in for a hosted generative
model, plus beam-search candidate generation and the training-sequence filter.

The model exposes a narrow interface (fit / next distribution / log-prob) so a
real provider could replace it. Conditionals are additively smoothed with
back-off down to a uniform-smoothed unigram, so every catalog item has
positive probability under every context. Alignment adds per-(context, item)
log-space adjustments that are renormalized on the fly, keeping every
conditional an exact probability distribution.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ConfigError, DataError
from .intent import UserHistory


def filter_training_sequences(dataset: Dataset, min_length: int = 1,
                              required_action: str | None = None) -> Dataset:
    """Reject low-quality interaction sequences before fitting.

    Keeps users whose sequence length is >= min_length and, when
    required_action is given, contains at least one such action. Idempotent;
    the catalog is untouched.
    """
    if min_length < 1:
        raise ConfigError(f"min_length must be >= 1, got {min_length}")
    kept = []
    for user in dataset.users:
        seq = dataset.user_sequences[user]
        if len(seq) < min_length:
            continue
        if required_action is not None and not any(
                r.action == required_action for r in seq):
            continue
        kept.extend(seq)
    return Dataset(dataset.items, kept)


class MarkovModel:
    """Additively smoothed n-gram model over item sequences.

    P(j | ctx) = (count(ctx, j) + alpha * P(j | ctx[1:])) / (count(ctx) + alpha)
    with the empty context backed off to a uniform-smoothed unigram.
    """

    def __init__(self, order: int, alpha: float, vocab,
                 counts=None, adjustments=None):
        if order < 1:
            raise ConfigError(f"order must be >= 1, got {order}")
        if alpha <= 0:
            raise ConfigError(f"smoothing alpha must be > 0, got {alpha}")
        self.order = order
        self.alpha = float(alpha)
        self.vocab = tuple(sorted(vocab))
        if not self.vocab:
            raise DataError("empty vocabulary")
        self.vindex = {v: i for i, v in enumerate(self.vocab)}
        # counts[L] maps a length-L context tuple to {item: count}; counts[0]
        # holds the unigram under the () key.
        self.counts: list[dict] = counts if counts is not None else [
            {} for _ in range(order + 1)]
        # adjustments maps a context tuple to {item: log-space delta}
        self.adjustments: dict = adjustments if adjustments is not None else {}
        self.refresh_totals()

    def copy(self) -> "MarkovModel":
        counts = [{ctx: dict(d) for ctx, d in level.items()} for level in self.counts]
        adjust = {ctx: dict(d) for ctx, d in self.adjustments.items()}
        return MarkovModel(self.order, self.alpha, self.vocab, counts, adjust)

    def context_of(self, items) -> tuple[str, ...]:
        """Truncate a history to the conditioning context."""
        items = tuple(items)
        return items[-self.order:] if len(items) > self.order else items

    def _base_prob(self, ctx: tuple, item: str) -> float:
        if len(ctx) == 0:
            uni = self.counts[0].get((), {})
            total = self._totals[0].get((), 0.0)
            v = len(self.vocab)
            return (uni.get(item, 0.0) + self.alpha / v) / (total + self.alpha)
        backoff = self._base_prob(ctx[1:], item)
        d = self.counts[len(ctx)].get(ctx)
        if d is None:
            return backoff
        total = self._totals[len(ctx)][ctx]
        return (d.get(item, 0.0) + self.alpha * backoff) / (total + self.alpha)

    def _adjust_norm(self, ctx: tuple, adj: dict) -> float:
        z = 1.0
        for item, delta in adj.items():
            z += self._base_prob(ctx, item) * (math.exp(delta) - 1.0)
        return z

    def prob(self, context, item: str) -> float:
        """Smoothed next-item probability given the last `order` items."""
        if item not in self.vindex:
            raise DataError(f"item {item!r} not in model vocabulary")
        ctx = self.context_of(context)
        p = self._base_prob(ctx, item)
        adj = self.adjustments.get(ctx)
        if adj:
            p = p * math.exp(adj.get(item, 0.0)) / self._adjust_norm(ctx, adj)
        return p

    def next_dist(self, context) -> np.ndarray:
        """Full conditional distribution over the sorted vocabulary."""
        ctx = self.context_of(context)
        v = len(self.vocab)
        uni = self.counts[0].get((), {})
        total0 = self._totals[0].get((), 0.0)
        dist = np.full(v, self.alpha / v)
        for item, c in uni.items():
            dist[self.vindex[item]] += c
        dist /= total0 + self.alpha
        for level in range(1, len(ctx) + 1):
            sub = ctx[len(ctx) - level:]
            d = self.counts[level].get(sub)
            if d is None:
                continue
            total = self._totals[level][sub]
            nxt = self.alpha * dist
            for item, c in d.items():
                nxt[self.vindex[item]] += c
            dist = nxt / (total + self.alpha)
        adj = self.adjustments.get(ctx)
        if adj:
            for item, delta in adj.items():
                dist[self.vindex[item]] *= math.exp(delta)
            dist /= dist.sum()
        return dist

    def _observe(self, seq) -> None:
        for i, item in enumerate(seq):
            uni = self.counts[0].setdefault((), {})
            uni[item] = uni.get(item, 0.0) + 1.0
            for k in range(1, self.order + 1):
                if i < k:
                    break
                ctx = tuple(seq[i - k:i])
                d = self.counts[k].setdefault(ctx, {})
                d[item] = d.get(item, 0.0) + 1.0

    def refresh_totals(self) -> None:
        self._totals = [
            {ctx: float(sum(d[k] for k in sorted(d))) for ctx, d in level.items()}
            for level in self.counts
        ]


def fit_markov(train: Dataset, order: int = 2, alpha: float = 0.1) -> MarkovModel:
    """Count-based fit over per-user item sequences; vocabulary = catalog."""
    model = MarkovModel(order, alpha, [it.item_id for it in train.items])
    saw_any = False
    for user in train.users:
        seq = [r.item_id for r in train.user_sequences[user]]
        if seq:
            saw_any = True
        model._observe(seq)
    if not saw_any:
        raise DataError("no training sequences to fit")
    model.refresh_totals()
    return model


def gen_log_prob(model: MarkovModel, history: UserHistory, item: str) -> float:
    """log P(item | last `order` items of history); always finite, <= 0."""
    return math.log(model.prob(history.items, item))


@dataclass(frozen=True)
class BeamCandidateSet:
    input_user: str
    context: tuple[str, ...]
    candidates: tuple[tuple[str, float], ...]  # (item_id, log_prob) descending
    width: int


def beam_search(model: MarkovModel, history: UserHistory, width: int,
                exclude=frozenset(), depth: int = 1) -> BeamCandidateSet:
    """Top-`width` next-item candidates under the sequence model.

    depth=1 ranks single next items. depth>1 runs a standard beam over
    continuations scored by summed log-probs and reports the first item of
    each surviving beam, deduplicated, best first. Excluded items never
    appear as candidates; ties break toward the smaller item (or sequence).
    """
    if width < 1:
        raise ConfigError(f"beam width must be >= 1, got {width}")
    if depth < 1:
        raise ConfigError(f"beam depth must be >= 1, got {depth}")
    ctx = model.context_of(history.items)
    logs = np.log(model.next_dist(ctx))
    if exclude:
        masked = np.array([-np.inf if iid in exclude else logs[i]
                           for i, iid in enumerate(model.vocab)])
    else:
        masked = logs
    order = np.argsort(-masked, kind="stable")  # vocab ascends, ties by id
    first = [(float(logs[i]), (model.vocab[i],)) for i in order[:width]
             if np.isfinite(masked[i])]
    if not first:
        raise DataError("empty vocabulary after exclusion")
    beams = first
    for _ in range(depth - 1):
        grown = []
        for lp, seq in beams:
            step = np.log(model.next_dist(tuple(history.items) + seq))
            for i, iid in enumerate(model.vocab):
                grown.append((lp + float(step[i]), seq + (iid,)))
        beams = sorted(grown, key=lambda t: (-t[0], t[1]))[:width]
    out = []
    seen = set()
    for lp, seq in beams:
        if seq[0] not in seen:
            seen.add(seq[0])
            out.append((seq[0], lp))
    return BeamCandidateSet(history.user_id, ctx, tuple(out), width)


# -- persistence ------------------------------------------------------------

def save_markov(model: MarkovModel, path) -> None:
    """Header (order, alpha, vocab size), vocabulary, transition and
    adjustment rows. Reload reproduces identical probabilities."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"order": model.order, "alpha": model.alpha,
                            "vocab_size": len(model.vocab)}) + "\n")
        f.write(json.dumps(list(model.vocab)) + "\n")
        for table in model.counts:
            for ctx in sorted(table):
                d = table[ctx]
                for item in sorted(d):
                    f.write("T\t" + json.dumps(list(ctx)) + "\t" + item + "\t"
                            + repr(float(d[item])) + "\n")
        for ctx in sorted(model.adjustments):
            d = model.adjustments[ctx]
            for item in sorted(d):
                f.write("A\t" + json.dumps(list(ctx)) + "\t" + item + "\t"
                        + repr(float(d[item])) + "\n")


def load_markov(path) -> MarkovModel:
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    try:
        head = json.loads(lines[0])
        vocab = json.loads(lines[1])
        order = int(head["order"])
        counts: list[dict] = [{} for _ in range(order + 1)]
        adjustments: dict = {}
        for ln in lines[2:]:
            if not ln.strip():
                continue
            kind, ctx_s, item, value = ln.split("\t")
            ctx = tuple(json.loads(ctx_s))
            if kind == "T":
                counts[len(ctx)].setdefault(ctx, {})[item] = float(value)
            elif kind == "A":
                adjustments.setdefault(ctx, {})[item] = float(value)
            else:
                raise DataError(f"{path}: unknown row kind {kind!r}")
    except (IndexError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed sequence model file ({exc})") from exc
    return MarkovModel(order, float(head["alpha"]), vocab, counts, adjustments)
