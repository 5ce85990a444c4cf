"""Offline-feedback ranking labels and the listwise/pairwise losses used to
align the generative scorer's candidate ordering with them.

Labels order beam candidates by a weighted blend of simulated click-through
and conversion rates measured on held-out interactions; ties fall back to the
generation log-prob, then the item id, so the label is always a total order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .config import TrainingConfig
from .data import CLICK, PURCHASE, Dataset
from .errors import ConfigError, DataError
from .seqmodel import BeamCandidateSet, MarkovModel


@dataclass(frozen=True)
class CandidateRanking:
    user_id: str
    context: tuple[str, ...]
    items: tuple[str, ...]
    log_probs: tuple[float, ...]
    feedback: tuple[float, ...]
    label_order: tuple[int, ...]  # candidate indices, best first


@dataclass(frozen=True)
class RankingLossReport:
    loss: float
    gradient: np.ndarray
    pairwise_violations: int


def feedback_rates(feedback_data: Dataset):
    """Per-item simulated CTR and conversion rate from a held-out log.

    An impression base of all users in the feedback set is assumed: the click
    rate of an item is the fraction of those users with a click event on it,
    the purchase rate the fraction with a purchase event.
    """
    n_users = max(1, feedback_data.n_users)
    clicked: dict[str, set] = {}
    bought: dict[str, set] = {}
    for rec in feedback_data.interactions:
        if rec.action == CLICK:
            clicked.setdefault(rec.item_id, set()).add(rec.user_id)
        elif rec.action == PURCHASE:
            bought.setdefault(rec.item_id, set()).add(rec.user_id)
    ctr = {iid: len(us) / n_users for iid, us in clicked.items()}
    cvr = {iid: len(us) / n_users for iid, us in bought.items()}
    return ctr, cvr


def build_partial_order(candidates: BeamCandidateSet, feedback_data: Dataset,
                        ctr_weight: float = 1.0,
                        cvr_weight: float = 1.0) -> CandidateRanking:
    """Label-order beam candidates by offline feedback, best first."""
    if not candidates.candidates:
        raise DataError("cannot label an empty candidate set")
    if ctr_weight < 0 or cvr_weight < 0 or (ctr_weight == 0 and cvr_weight == 0):
        raise ConfigError("feedback weights must be >= 0 and not both zero")
    ctr, cvr = feedback_rates(feedback_data)
    items = tuple(iid for iid, _ in candidates.candidates)
    log_probs = tuple(lp for _, lp in candidates.candidates)
    feedback = tuple(ctr_weight * ctr.get(iid, 0.0) + cvr_weight * cvr.get(iid, 0.0)
                     for iid in items)
    order = sorted(range(len(items)),
                   key=lambda i: (-feedback[i], -log_probs[i], items[i]))
    return CandidateRanking(candidates.input_user, candidates.context,
                            items, log_probs, feedback, tuple(order))


def count_violations(scores, label_order) -> int:
    """Label-ordered pairs whose current scores are strictly inverted."""
    s = np.asarray(scores, dtype=float)
    n = 0
    for a in range(len(label_order)):
        for b in range(a + 1, len(label_order)):
            if s[label_order[a]] < s[label_order[b]]:
                n += 1
    return n


def listmle_loss(scores, label_order) -> RankingLossReport:
    """Negative log-likelihood of the label permutation (Plackett-Luce).

    Each suffix term is computed with max-subtraction. The gradient is the
    exact analytic gradient with respect to the scores.
    """
    s = np.asarray(scores, dtype=float)
    if s.size < 1:
        raise DataError("need at least one candidate")
    if not np.all(np.isfinite(s)):
        raise DataError("non-finite score")
    perm = list(label_order)
    if sorted(perm) != list(range(s.size)):
        raise DataError("label_order is not a permutation of the candidates")
    sp = s[perm]
    k = s.size
    loss = 0.0
    grad_p = np.zeros(k)
    for start in range(k):
        suf = sp[start:]
        m = suf.max()
        ez = np.exp(suf - m)
        z = ez.sum()
        loss += math.log(z) + m - sp[start]
        grad_p[start:] += ez / z
        grad_p[start] -= 1.0
    grad = np.zeros(k)
    grad[perm] = grad_p
    return RankingLossReport(float(loss), grad, count_violations(s, perm))


def ranknet_loss(scores, label_order) -> RankingLossReport:
    """Mean logistic loss over all label-ordered pairs."""
    s = np.asarray(scores, dtype=float)
    if s.size < 2:
        raise ConfigError("ranknet needs at least two candidates")
    if not np.all(np.isfinite(s)):
        raise DataError("non-finite score")
    perm = list(label_order)
    if sorted(perm) != list(range(s.size)):
        raise DataError("label_order is not a permutation of the candidates")
    k = s.size
    n_pairs = k * (k - 1) // 2
    loss = 0.0
    grad = np.zeros(k)
    for a in range(k):
        for b in range(a + 1, k):
            i, j = perm[a], perm[b]
            diff = s[i] - s[j]
            loss += float(np.logaddexp(0.0, -diff))
            g = -float(expit(-diff))
            grad[i] += g
            grad[j] -= g
    return RankingLossReport(loss / n_pairs, grad / n_pairs,
                             count_violations(s, perm))


_LOSSES = {"listmle": listmle_loss, "ranknet": ranknet_loss}


@dataclass
class AlignmentReport:
    epoch_losses: list[float]
    violations_before: int
    violations_after: int


def _ranking_scores(model: MarkovModel, ranking: CandidateRanking) -> np.ndarray:
    return np.array([math.log(model.prob(ranking.context, iid))
                     for iid in ranking.items])


def _total_violations(model: MarkovModel, rankings) -> int:
    return sum(count_violations(_ranking_scores(model, r), r.label_order)
               for r in rankings)


def align_generative(model: MarkovModel, rankings, loss: str = "listmle",
                     config: TrainingConfig | None = None):
    """Gradient-descend the ranking loss over per-candidate log-weight
    adjustments of the sequence model, renormalizing each touched context.

    Returns (adjusted model, AlignmentReport). The input model is not
    mutated.
    """
    if not rankings:
        raise DataError("no rankings to align on")
    if loss not in _LOSSES:
        raise ConfigError(f"unknown alignment loss {loss!r}")
    loss_fn = _LOSSES[loss]
    if loss == "ranknet" and all(len(r.items) < 2 for r in rankings):
        raise ConfigError("ranknet alignment needs at least one multi-candidate "
                          "ranking")
    if config is None:
        config = TrainingConfig()
    config.validate()
    usable = [r for r in rankings if len(r.items) >= (2 if loss == "ranknet" else 1)]
    adjusted = model.copy()
    before = _total_violations(adjusted, rankings)
    if config.epochs == 0:
        return adjusted, AlignmentReport([], before, before)
    rng = np.random.default_rng(config.seed)
    epoch_losses = []
    for _ in range(config.epochs):
        order = rng.permutation(len(usable))
        for start in range(0, len(order), config.batch_size):
            batch = [usable[i] for i in order[start:start + config.batch_size]]
            updates: dict = {}
            for r in batch:
                scores = _ranking_scores(adjusted, r)
                rep = loss_fn(scores, r.label_order)
                probs = np.array([adjusted.prob(r.context, iid) for iid in r.items])
                gsum = rep.gradient.sum()
                ddelta = rep.gradient - probs * gsum
                tgt = updates.setdefault(r.context, {})
                for iid, gd in zip(r.items, ddelta):
                    tgt[iid] = tgt.get(iid, 0.0) + float(gd)
            scale = config.learning_rate / len(batch)
            for ctx, d in updates.items():
                adj = adjusted.adjustments.setdefault(ctx, {})
                for iid, gd in d.items():
                    adj[iid] = adj.get(iid, 0.0) - scale * gd
        epoch_losses.append(
            sum(loss_fn(_ranking_scores(adjusted, r), r.label_order).loss
                for r in usable) / len(usable))
    after = _total_violations(adjusted, rankings)
    return adjusted, AlignmentReport(epoch_losses, before, after)


# -- rankings exchange file ---------------------------------------------------

def save_rankings(rankings, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in rankings:
            f.write(json.dumps({
                "user_id": r.user_id,
                "context": list(r.context),
                "items": list(r.items),
                "log_probs": [float(x) for x in r.log_probs],
                "feedback": [float(x) for x in r.feedback],
                "label_order": list(r.label_order),
            }, sort_keys=True) + "\n")


def load_rankings(path) -> list[CandidateRanking]:
    from .data import _read_jsonl

    out = []
    for lineno, obj in _read_jsonl(path):
        try:
            out.append(CandidateRanking(
                user_id=str(obj["user_id"]),
                context=tuple(obj["context"]),
                items=tuple(obj["items"]),
                log_probs=tuple(float(x) for x in obj["log_probs"]),
                feedback=tuple(float(x) for x in obj["feedback"]),
                label_order=tuple(int(x) for x in obj["label_order"]),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: bad ranking record ({exc})") from exc
    return out
