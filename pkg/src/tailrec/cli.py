"""Command-line entry point.

Subcommands: generate, train, recommend, evaluate, gridsearch, bench.
Global flags: --config PATH, --seed N, --force, --output DIR. Every command
is deterministic given (config, seed); reports echo the effective config and
format numbers at 6 significant digits. Stage artifacts are exchanged through
files so each training stage is independently inspectable and restartable.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import experiment as xp
from .config import RunConfig, load_config
from .data import (Dataset, chronological_split, classify_head_tail,
                   generate_synthetic, load_dataset, save_dataset)
from .embeddings import embed_catalog, ingest_embeddings, save_embeddings
from .errors import (ColdUserError, ConfigError, DataError, DependencyError,
                     OutputError, TailrecError)
from .fusion import FusionWeights
from .intent import load_params, save_params, train_intent
from .metrics import measure_latency
from .ranking import load_rankings, save_rankings
from .seqmodel import load_markov, save_markov

LOCK_NAME = ".tailrec.lock"

MODEL_FILES = {
    "intent": "models/intent_params.txt",
    "cf_itemknn": "models/cf_itemknn.txt",
    "cf_bpr": "models/cf_bpr.txt",
    "markov": "models/markov.txt",
    "markov_aligned": "models/markov_aligned.txt",
    "rankings": "models/rankings.jsonl",
    "weights": "models/fusion_weights.json",
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        cfg.validate()
        outdir = Path(args.output)
        with _output_lock(outdir):
            return args.func(args, cfg, outdir)
    except TailrecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return OutputError.exit_code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tailrec",
        description="Hybrid long-tail recommender: data generation, training, "
                    "serving, and offline benchmarking.")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--output", default="run",
                        help="working directory for data, models and reports")
    parser.add_argument("--force", action="store_true",
                        help="overwrite existing generated data files")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset + embeddings")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train pipeline components")
    p.add_argument("--component", default="all",
                   choices=["intent", "cf", "gen", "align", "all"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("recommend", help="print top-k for one user")
    p.add_argument("--user", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--cold-start-semantic", metavar="ITEMS",
                   help="comma-separated item ids to rank against for a user "
                        "without training history (semantic channel only)")
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("evaluate",
                       help="fusion vs single-source comparison on the hold-out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gridsearch", help="search fusion weights on validation")
    p.add_argument("--step", type=float, default=None)
    p.add_argument("--metric", default=None, help="recall@50 or ndcg@10")
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("bench", help="measure end-to-end recommendation latency")
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_bench)
    return parser


class _output_lock:
    """Marker file guarding against concurrent runs on one output dir."""

    def __init__(self, outdir: Path):
        self.path = outdir / LOCK_NAME
        self.outdir = outdir

    def __enter__(self):
        self.outdir.mkdir(parents=True, exist_ok=True)
        if self.path.exists():
            raise OutputError(
                f"output dir {self.outdir} is in use (stale {LOCK_NAME}? "
                "delete it if no other run is active)")
        self.path.write_text("locked\n", encoding="utf-8")
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def _data_paths(cfg: RunConfig, outdir: Path):
    return (outdir / cfg.catalog_path, outdir / cfg.interactions_path,
            outdir / cfg.embeddings_path)


def cmd_generate(args, cfg: RunConfig, outdir: Path) -> int:
    catalog_p, inter_p, emb_p = _data_paths(cfg, outdir)
    existing = [p for p in (catalog_p, inter_p, emb_p) if p.exists()]
    if existing and not args.force:
        raise OutputError(
            f"refusing to overwrite {existing[0]} (use --force)")
    s = cfg.synthetic
    dataset = generate_synthetic(cfg.seed, s.n_users, s.n_items,
                                 s.n_interactions, s.zipf_exponent, s.n_clusters)
    save_dataset(dataset, catalog_p, inter_p)
    matrix = embed_catalog(dataset, cfg.embedding_dim, cfg.seed, cfg.pooling)
    save_embeddings(matrix, emb_p)
    print(f"wrote {catalog_p} ({dataset.n_items} items)")
    print(f"wrote {inter_p} ({dataset.n_interactions} interactions, "
          f"{dataset.n_users} users)")
    print(f"wrote {emb_p} (dim {matrix.dim})")
    return 0


def _load_split(cfg: RunConfig, outdir: Path):
    catalog_p, inter_p, emb_p = _data_paths(cfg, outdir)
    for p in (catalog_p, inter_p, emb_p):
        if not p.exists():
            raise DependencyError(f"missing data file {p}; run generate first")
    dataset = load_dataset(catalog_p, inter_p)
    dataset = classify_head_tail(dataset, cfg.head_fraction)
    split = chronological_split(dataset, cfg.holdout_fraction)
    embeddings = ingest_embeddings(emb_p, dataset)
    return split, embeddings


def _model_path(outdir: Path, key: str) -> Path:
    return outdir / MODEL_FILES[key]


def _require(outdir: Path, key: str, stage: str) -> Path:
    p = _model_path(outdir, key)
    if not p.exists():
        raise DependencyError(f"missing artifact {p}; train the {stage!r} "
                              "stage first")
    return p


def cmd_train(args, cfg: RunConfig, outdir: Path) -> int:
    split, embeddings = _load_split(cfg, outdir)
    (outdir / "models").mkdir(exist_ok=True)
    component = args.component

    if component in ("intent", "all"):
        params, losses = train_intent(
            split, embeddings, xp.attention_training_config(cfg),
            t_max=cfg.attention.t_max,
            max_prefixes_per_user=cfg.attention.max_prefixes_per_user)
        save_params(params, _model_path(outdir, "intent"))
        _print_losses("intent", losses)

    if component in ("cf", "all"):
        backend, losses = xp.train_cf_backend(split, cfg)
        if cfg.cf.backend == "itemknn":
            from .cf import save_itemknn
            save_itemknn(backend, _model_path(outdir, "cf_itemknn"))
        else:
            from .cf import save_mf
            save_mf(backend, _model_path(outdir, "cf_bpr"))
        _print_losses("cf", losses)

    if component in ("gen", "all"):
        inner = chronological_split(split.train, xp.VALIDATION_FRACTION)
        markov = xp.fit_sequence_model(inner.train, cfg)
        save_markov(markov, _model_path(outdir, "markov"))
        print(f"gen: fitted order-{markov.order} model over "
              f"{len(markov.vocab)} items")

    if component in ("align", "all"):
        markov_p = _require(outdir, "markov", "gen")
        markov = load_markov(markov_p)
        inner = chronological_split(split.train, xp.VALIDATION_FRACTION)
        rankings = xp.build_feedback_rankings(markov, inner, cfg)
        save_rankings(rankings, _model_path(outdir, "rankings"))
        from .ranking import align_generative
        aligned, report = align_generative(markov, rankings, cfg.align.loss,
                                           xp.align_training_config(cfg))
        save_markov(aligned, _model_path(outdir, "markov_aligned"))
        print(f"align: violations {report.violations_before} -> "
              f"{report.violations_after} over {len(rankings)} rankings")

    if component == "all":
        weights = xp.grid_search(split, embeddings, cfg)
        _save_weights(weights, _model_path(outdir, "weights"))
        print(f"weights: {weights.lam_sem:.6g} {weights.lam_cf:.6g} "
              f"{weights.lam_gen:.6g}")
    return 0


def _print_losses(stage: str, losses) -> None:
    if losses:
        tail = " ".join(f"{x:.6g}" for x in losses[:3])
        print(f"{stage}: {len(losses)} epochs, first losses {tail}")
    else:
        print(f"{stage}: trained")


def _save_weights(weights: FusionWeights, path: Path) -> None:
    path.write_text(json.dumps({
        "lam_sem": weights.lam_sem,
        "lam_cf": weights.lam_cf,
        "lam_gen": weights.lam_gen,
    }, sort_keys=True) + "\n", encoding="utf-8")


def _load_weights(path: Path) -> FusionWeights:
    obj = json.loads(path.read_text(encoding="utf-8"))
    return FusionWeights(obj["lam_sem"], obj["lam_cf"], obj["lam_gen"])


def _load_components(cfg: RunConfig, outdir: Path, split, embeddings):
    from .cf import load_itemknn, load_mf

    params = load_params(_require(outdir, "intent", "intent"))
    if cfg.cf.backend == "itemknn":
        backend = load_itemknn(_require(outdir, "cf_itemknn", "cf"))
    else:
        backend = load_mf(_require(outdir, "cf_bpr", "cf"))
    aligned_p = _model_path(outdir, "markov_aligned")
    if aligned_p.exists():
        markov = load_markov(aligned_p)
    else:
        markov = load_markov(_require(outdir, "markov", "gen"))
    weights_p = _model_path(outdir, "weights")
    weights = (_load_weights(weights_p) if weights_p.exists()
               else FusionWeights(*cfg.fusion.weights))
    return xp.TrainedComponents(embeddings, params, backend, markov, markov,
                                []), weights


def cmd_recommend(args, cfg: RunConfig, outdir: Path) -> int:
    split, embeddings = _load_split(cfg, outdir)
    comps, weights = _load_components(cfg, outdir, split, embeddings)
    pipeline = xp.make_pipeline(split, comps, weights, cfg)
    if args.user not in split.train.user_sequences and args.cold_start_semantic:
        return _cold_start_semantic(args, cfg, split, embeddings)
    history = pipeline.history(args.user)  # raises ColdUserError if unknown
    cs = pipeline.candidate_scores(args.user, max(args.k, 1))
    triples = {iid: (cs.sem[i], cs.cf[i], cs.gen[i])
               for i, iid in enumerate(cs.items)}
    rec = pipeline.recommend(args.user, args.k)
    print(f"user {args.user} (history length {len(history.items)})")
    print("rank\titem_id\tfused\tsem\tcf\tgen")
    for rank, (iid, score) in enumerate(rec.items, start=1):
        s, c, g = triples[iid]
        print(f"{rank}\t{iid}\t{score:.6g}\t{s:.6g}\t{c:.6g}\t{g:.6g}")
    return 0


def _cold_start_semantic(args, cfg, split, embeddings) -> int:
    """Semantic-only ranking over a caller-supplied item list."""
    from .embeddings import top_k_semantic
    from .fusion import normalize_channel
    import numpy as np

    seed_items = [s for s in args.cold_start_semantic.split(",") if s]
    if not seed_items:
        raise ConfigError("--cold-start-semantic needs at least one item id")
    vecs = [embeddings.vector(iid) for iid in seed_items]
    query = np.mean(vecs, axis=0)
    ranked = top_k_semantic(query, embeddings, args.k, exclude=set(seed_items))
    print(f"user {args.user} (cold start, semantic-only over "
          f"{len(seed_items)} seed items)")
    print("rank\titem_id\tcosine")
    for rank, (iid, score) in enumerate(ranked, start=1):
        print(f"{rank}\t{iid}\t{score:.6g}")
    return 0


def cmd_evaluate(args, cfg: RunConfig, outdir: Path) -> int:
    split, embeddings = _load_split(cfg, outdir)
    comps, weights = _load_components(cfg, outdir, split, embeddings)
    specs = xp.default_specs(weights)
    reports, _ = xp.run_experiment(split, embeddings, cfg, specs, comps)
    report_dir = outdir / "reports"
    paths = xp.write_reports(reports, report_dir, cfg)
    paths += xp.write_figures(reports, report_dir)
    pipeline = xp.make_pipeline(split, comps, weights, cfg)
    latency = _bench_latency(pipeline, split, cfg, k=10)
    lat_path = report_dir / "latency.tsv"
    _write_latency(lat_path, latency)
    paths.append(lat_path)
    print(xp.format_table(reports), end="")
    print(f"latency_ms median={latency['median']:.6g} p95={latency['p95']:.6g} "
          f"mean={latency['mean']:.6g}")
    for p in paths:
        print(f"wrote {p}")
    return 0


def cmd_gridsearch(args, cfg: RunConfig, outdir: Path) -> int:
    from .fusion import grid_points

    split, embeddings = _load_split(cfg, outdir)
    step = args.step if args.step is not None else cfg.fusion.grid_step
    metric = args.metric or cfg.fusion.grid_metric
    weights = xp.grid_search(split, embeddings, cfg, step, metric)
    _save_weights(weights, _model_path(outdir, "weights"))
    n_points = len(grid_points(step))
    print(f"grid_points\t{n_points}")
    print(f"metric\t{metric}")
    print(f"weights\t{weights.lam_sem:.6g}\t{weights.lam_cf:.6g}\t"
          f"{weights.lam_gen:.6g}")
    return 0


def _bench_latency(pipeline, split, cfg, k: int):
    users = [u for u in split.train.users
             if split.train.user_sequences.get(u)]
    sample = users[:cfg.evaluation.latency_sample_users]
    warmup = min(cfg.evaluation.latency_warmup, max(0, len(sample) - 1))
    return measure_latency(lambda u: pipeline.recommend(u, k), sample, warmup)


def _write_latency(path: Path, latency) -> None:
    lines = [f"latency_ms_{k}\t{latency[k]:.6g}" for k in ("median", "p95", "mean")]
    lines.append(f"bound_200ms_ok\t{str(latency['median'] < 200.0).lower()}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_bench(args, cfg: RunConfig, outdir: Path) -> int:
    split, embeddings = _load_split(cfg, outdir)
    comps, weights = _load_components(cfg, outdir, split, embeddings)
    pipeline = xp.make_pipeline(split, comps, weights, cfg)
    latency = _bench_latency(pipeline, split, cfg, args.k)
    report_dir = outdir / "reports"
    report_dir.mkdir(parents=True, exist_ok=True)
    lat_path = report_dir / "latency.tsv"
    _write_latency(lat_path, latency)
    xp.write_latency_figure(latency, report_dir)
    print(f"latency_ms_median\t{latency['median']:.6g}")
    print(f"latency_ms_p95\t{latency['p95']:.6g}")
    print(f"latency_ms_mean\t{latency['mean']:.6g}")
    print(f"bound_200ms_ok\t{str(latency['median'] < 200.0).lower()}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
