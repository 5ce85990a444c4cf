"""Experiment orchestration: component training in pipeline order, weight
grid search on a validation slice, the fusion-versus-single-source comparison
run, and report/figure writers.

Training stages follow the serving pipeline's order: intent encoder, CF
backend, sequence-model fit on an inner train slice, beam candidates labeled
by simulated offline feedback from the held-back validation slice, alignment,
then grid search over fusion weights. Deterministic report files never
contain wall-clock numbers; latency goes to a separate sidecar.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import metrics as mx
from .cf import ItemKNN, MFModel, build_matrix, train_bpr
from .config import RunConfig, TrainingConfig, config_lines
from .data import Dataset, SplitDataset, chronological_split
from .embeddings import EmbeddingMatrix
from .errors import ConfigError, DataError
from .fusion import (CandidateScores, FusionWeights, HybridPipeline,
                     fused_ranking, select_weights)
from .intent import AttentionParams, UserHistory, train_intent, truncate_history
from .ranking import AlignmentReport, align_generative, build_partial_order
from .seqmodel import MarkovModel, beam_search, filter_training_sequences, fit_markov

VALIDATION_FRACTION = 0.1  # last slice of each user's train sequence


@dataclass
class TrainedComponents:
    embeddings: EmbeddingMatrix
    intent_params: AttentionParams
    cf_backend: object
    markov_base: MarkovModel          # fit before alignment
    markov: MarkovModel               # aligned serving model
    rankings: list = field(default_factory=list)
    intent_losses: list = field(default_factory=list)
    cf_losses: list = field(default_factory=list)
    align_report: AlignmentReport | None = None


def attention_training_config(cfg: RunConfig) -> TrainingConfig:
    return TrainingConfig(epochs=cfg.attention.epochs,
                          batch_size=cfg.attention.batch_size,
                          learning_rate=cfg.attention.learning_rate,
                          seed=cfg.seed)


def cf_training_config(cfg: RunConfig) -> TrainingConfig:
    return TrainingConfig(epochs=cfg.cf.epochs, batch_size=cfg.cf.batch_size,
                          learning_rate=cfg.cf.learning_rate, seed=cfg.seed)


def align_training_config(cfg: RunConfig) -> TrainingConfig:
    return TrainingConfig(epochs=cfg.align.epochs, batch_size=cfg.align.batch_size,
                          learning_rate=cfg.align.learning_rate, seed=cfg.seed)


def train_cf_backend(split: SplitDataset, cfg: RunConfig):
    """Returns (backend, per-epoch losses); losses empty for item-kNN."""
    matrix = build_matrix(split)
    if cfg.cf.backend == "itemknn":
        return ItemKNN(matrix, cfg.cf.k_neighbors), []
    model, losses = train_bpr(matrix, cfg.cf.factors, cf_training_config(cfg),
                              reg=cfg.cf.regularization)
    return model, losses


def fit_sequence_model(train: Dataset, cfg: RunConfig) -> MarkovModel:
    filtered = filter_training_sequences(train, min_length=2)
    if filtered.n_interactions == 0:
        filtered = train
    return fit_markov(filtered, cfg.markov.order, cfg.markov.alpha)


def build_feedback_rankings(markov: MarkovModel, inner: SplitDataset,
                            cfg: RunConfig):
    """Beam candidates per validation user, labeled by the validation slice."""
    rankings = []
    for user in inner.test.users:
        seq = inner.train.user_sequences.get(user)
        if not seq:
            continue
        items = tuple(r.item_id for r in seq)
        history_set = frozenset(items)
        hist = truncate_history(UserHistory(user, items), cfg.attention.t_max)
        try:
            beam = beam_search(markov, hist, cfg.beam_width, exclude=history_set)
        except DataError:
            continue
        rankings.append(build_partial_order(beam, inner.test,
                                            cfg.align.ctr_weight,
                                            cfg.align.cvr_weight))
    if not rankings:
        raise DataError("no validation users with usable beam candidates")
    return rankings


def train_components(split: SplitDataset, embeddings: EmbeddingMatrix,
                     cfg: RunConfig) -> TrainedComponents:
    """Full training chain on one split, in pipeline stage order."""
    intent_params, intent_losses = train_intent(
        split, embeddings, attention_training_config(cfg),
        t_max=cfg.attention.t_max,
        max_prefixes_per_user=cfg.attention.max_prefixes_per_user)
    cf_backend, cf_losses = train_cf_backend(split, cfg)
    inner = chronological_split(split.train, VALIDATION_FRACTION)
    markov_base = fit_sequence_model(inner.train, cfg)
    rankings = build_feedback_rankings(markov_base, inner, cfg)
    markov, align_report = align_generative(markov_base, rankings, cfg.align.loss,
                                            align_training_config(cfg))
    return TrainedComponents(embeddings, intent_params, cf_backend,
                             markov_base, markov, rankings,
                             intent_losses, cf_losses, align_report)


def make_pipeline(split: SplitDataset, comps: TrainedComponents,
                  weights: FusionWeights, cfg: RunConfig) -> HybridPipeline:
    return HybridPipeline(split.train, comps.embeddings, comps.intent_params,
                          comps.cf_backend, comps.markov, weights,
                          normalization=cfg.fusion.normalization,
                          t_max=cfg.attention.t_max)


# -- grid search --------------------------------------------------------------

def _metric_spec(name: str):
    name = name.lower()
    if "@" not in name:
        raise ConfigError(f"grid metric must look like recall@50, got {name!r}")
    kind, _, k = name.partition("@")
    if kind not in ("recall", "ndcg"):
        raise ConfigError(f"unsupported grid metric {name!r}")
    return kind, int(k)


def validation_candidate_scores(split: SplitDataset, embeddings: EmbeddingMatrix,
                                cfg: RunConfig, k_each: int):
    """Candidate pools + normalized channel scores on the validation slice.

    Components are retrained on the inner train slice (validation held back)
    so validation items are recommendable; the sequence model is used
    unaligned here since alignment itself consumes the validation feedback.
    """
    inner = chronological_split(split.train, VALIDATION_FRACTION)
    intent_params, _ = train_intent(
        inner, embeddings, attention_training_config(cfg),
        t_max=cfg.attention.t_max,
        max_prefixes_per_user=cfg.attention.max_prefixes_per_user)
    cf_backend, _ = train_cf_backend(inner, cfg)
    markov = fit_sequence_model(inner.train, cfg)
    pipeline = HybridPipeline(inner.train, embeddings, intent_params, cf_backend,
                              markov, FusionWeights(*cfg.fusion.weights),
                              normalization=cfg.fusion.normalization,
                              t_max=cfg.attention.t_max)
    out = []
    for user in inner.test.users:
        if user not in inner.train.user_sequences:
            continue
        relevant = frozenset(r.item_id for r in inner.test.user_sequences[user])
        if not relevant:
            continue
        out.append(pipeline.candidate_scores(user, k_each, relevant))
    if not out:
        raise DataError("empty validation slice for grid search")
    return out


def grid_search(split: SplitDataset, embeddings: EmbeddingMatrix, cfg: RunConfig,
                grid_step: float | None = None,
                metric: str | None = None) -> FusionWeights:
    """Exhaustive validation search over the weight simplex."""
    step = cfg.fusion.grid_step if grid_step is None else grid_step
    kind, k = _metric_spec(metric or cfg.fusion.grid_metric)
    scores = validation_candidate_scores(split, embeddings, cfg, k_each=k)

    def evaluate(pt):
        vals = []
        for cs in scores:
            ranked = fused_ranking(cs, pt, k)
            if kind == "recall":
                vals.append(mx.recall_at_k(ranked, cs.relevant, k))
            else:
                vals.append(mx.ndcg_at_k(ranked, cs.relevant, k))
        return float(np.mean(vals))

    return select_weights(evaluate, step, anchor=cfg.fusion.weights)


# -- comparison experiment ----------------------------------------------------

def run_experiment(split: SplitDataset, embeddings: EmbeddingMatrix,
                   cfg: RunConfig, specs: list[tuple[str, FusionWeights]],
                   comps: TrainedComponents | None = None):
    """Train once, evaluate every (name, weights) spec on the test split.

    Returns (reports dict preserving spec order, components). Deterministic
    for a fixed seed; no wall-clock values are produced here.
    """
    if not specs:
        return {}, comps
    if comps is None:
        comps = train_components(split, embeddings, cfg)
    k_list = sorted(cfg.evaluation.k_list)
    k_max = max(k_list)
    pipeline = make_pipeline(split, comps, FusionWeights(*cfg.fusion.weights), cfg)
    test_users = [u for u in split.test.users if u in split.train.user_sequences]
    if not test_users:
        raise DataError("no evaluable users in the test split")
    per_user: dict[str, CandidateScores] = {}
    relevant: dict[str, frozenset] = {}
    for user in test_users:
        rel = frozenset(r.item_id for r in split.test.user_sequences[user])
        if not rel:
            continue
        relevant[user] = rel
        per_user[user] = pipeline.candidate_scores(user, k_max, rel)
    reports: dict[str, mx.MetricReport] = {}
    for name, weights in specs:
        lists = {u: fused_ranking(per_user[u], weights, k_max)
                 for u in sorted(per_user)}
        report = mx.MetricReport()
        for k in k_list:
            report.recall_at[k] = float(np.mean(
                [mx.recall_at_k(lists[u], relevant[u], k) for u in sorted(lists)]))
            report.hit_rate_at[k] = float(np.mean(
                [mx.hit_at_k(lists[u], relevant[u], k) for u in sorted(lists)]))
            report.ndcg_at[k] = float(np.mean(
                [mx.ndcg_at_k(lists[u], relevant[u], k) for u in sorted(lists)]))
        top10 = {u: lists[u][:10] for u in lists}
        if len(top10) >= 2:
            report.diversity = mx.diversity(
                top10, cfg.evaluation.diversity_sample_pairs, seed=cfg.seed)
        report.tail_coverage = mx.tail_coverage(top10, split.train)
        reports[name] = report
    return reports, comps


def default_specs(weights: FusionWeights) -> list[tuple[str, FusionWeights]]:
    """The fused pipeline plus its three single-channel projections."""
    return [
        ("fusion", weights),
        ("semantic_only", FusionWeights(1.0, 0.0, 0.0)),
        ("cf_only", FusionWeights(0.0, 1.0, 0.0)),
        ("gen_only", FusionWeights(0.0, 0.0, 1.0)),
    ]


# -- report + figure writing --------------------------------------------------

def format_table(reports: dict[str, mx.MetricReport]) -> str:
    """Aligned comparison table, one row per pipeline."""
    names = list(reports)
    cols = ["pipeline"]
    first = reports[names[0]]
    cols += [f"recall@{k}" for k in sorted(first.recall_at)]
    cols += [f"hit_rate@{k}" for k in sorted(first.hit_rate_at)]
    cols += [f"ndcg@{k}" for k in sorted(first.ndcg_at)]
    cols += ["diversity", "tail_coverage"]
    rows = [cols]
    for name in names:
        r = reports[name]
        row = [name]
        row += [f"{r.recall_at[k]:.6g}" for k in sorted(r.recall_at)]
        row += [f"{r.hit_rate_at[k]:.6g}" for k in sorted(r.hit_rate_at)]
        row += [f"{r.ndcg_at[k]:.6g}" for k in sorted(r.ndcg_at)]
        row += [f"{r.diversity:.6g}", f"{r.tail_coverage:.6g}"]
        rows.append(row)
    widths = [max(len(row[c]) for row in rows) for c in range(len(cols))]
    lines = []
    for row in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def write_reports(reports: dict[str, mx.MetricReport], outdir, cfg: RunConfig):
    """Per-pipeline TSV reports (with the effective config echoed), a combined
    TSV, and an aligned text table. Returns the written paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    echo = config_lines(cfg)
    for name, report in reports.items():
        p = outdir / f"report_{name}.tsv"
        lines = [f"pipeline\t{name}"] + report.lines() + echo
        p.write_text("\n".join(lines) + "\n", encoding="utf-8")
        paths.append(p)
    combined = outdir / "comparison.tsv"
    lines = []
    for name, report in reports.items():
        for ln in report.lines():
            metric, value = ln.split("\t")
            lines.append(f"{name}\t{metric}\t{value}")
    combined.write_text("\n".join(lines) + "\n", encoding="utf-8")
    paths.append(combined)
    table = outdir / "comparison.txt"
    table.write_text(format_table(reports), encoding="utf-8")
    paths.append(table)
    return paths


def _grouped_bars(ax, reports, extract, title):
    names = list(reports)
    sample = extract(reports[names[0]])
    keys = sorted(sample)
    x = np.arange(len(keys), dtype=float)
    width = 0.8 / max(1, len(names))
    for i, name in enumerate(names):
        vals = [extract(reports[name])[k] for k in keys]
        ax.bar(x + i * width, vals, width, label=name)
    ax.set_xticks(x + width * (len(names) - 1) / 2)
    ax.set_xticklabels([f"@{k}" for k in keys])
    ax.set_title(title)
    ax.legend(fontsize=7)


def write_figures(reports: dict[str, mx.MetricReport], outdir):
    """Bar-chart comparisons rendered next to the delimited reports."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    meta = {"Software": None}  # keep PNG bytes reproducible
    paths = []

    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    _grouped_bars(axes[0], reports, lambda r: r.recall_at, "Recall")
    _grouped_bars(axes[1], reports, lambda r: r.hit_rate_at, "Hit rate")
    _grouped_bars(axes[2], reports, lambda r: r.ndcg_at, "NDCG")
    fig.tight_layout()
    p = outdir / "ranking_metrics.png"
    fig.savefig(p, dpi=110, metadata=meta)
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = list(reports)
    x = np.arange(len(names), dtype=float)
    ax.bar(x - 0.2, [reports[n].diversity for n in names], 0.4, label="diversity")
    ax.bar(x + 0.2, [reports[n].tail_coverage for n in names], 0.4,
           label="tail coverage")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.set_title("Diversity and tail coverage (top-10)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    p = outdir / "coverage_diversity.png"
    fig.savefig(p, dpi=110, metadata=meta)
    plt.close(fig)
    paths.append(p)
    return paths


def write_latency_figure(latency: dict[str, float], outdir):
    outdir = Path(outdir)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    keys = ["median", "p95", "mean"]
    ax.bar(np.arange(3.0), [latency[k] for k in keys], 0.6)
    ax.set_xticks(np.arange(3.0))
    ax.set_xticklabels(keys)
    ax.axhline(200.0, color="red", linestyle="--", linewidth=1,
               label="200 ms bound")
    ax.set_ylabel("ms")
    ax.set_title("End-to-end recommendation latency")
    ax.legend(fontsize=7)
    fig.tight_layout()
    p = outdir / "latency.png"
    fig.savefig(p, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return p
