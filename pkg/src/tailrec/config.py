"""Run configuration: nested dataclasses, JSON file loading, flag overrides.

Default hyperparameters: ten epochs at batch size 256, fusion-layer learning
rate 1e-4, beam width 5, fusion weights 0.4/0.4/0.2, metric cutoffs
{10, 100, 1000}, head fraction 0.10.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class TrainingConfig:
    epochs: int = 10
    batch_size: int = 256
    learning_rate: float = 1e-4
    seed: int = 0
    negatives_per_positive: int = 1

    def validate(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.negatives_per_positive < 1:
            raise ConfigError("negatives_per_positive must be >= 1")


@dataclass
class SyntheticConfig:
    n_users: int = 1000
    n_items: int = 5000
    n_interactions: int = 50000
    zipf_exponent: float = 1.1
    n_clusters: int = 8


@dataclass
class AttentionConfig:
    t_max: int = 50
    epochs: int = 10
    batch_size: int = 256
    learning_rate: float = 1e-4
    max_prefixes_per_user: int = 8


@dataclass
class CFConfig:
    backend: str = "itemknn"  # or "bpr"
    k_neighbors: int = 100
    factors: int = 32
    regularization: float = 1e-4
    learning_rate: float = 0.05
    epochs: int = 10
    batch_size: int = 256


@dataclass
class MarkovConfig:
    order: int = 2
    alpha: float = 0.1


@dataclass
class AlignConfig:
    loss: str = "listmle"  # or "ranknet"
    learning_rate: float = 0.1
    epochs: int = 10
    batch_size: int = 256
    ctr_weight: float = 1.0
    cvr_weight: float = 1.0


@dataclass
class FusionConfig:
    weights: tuple[float, float, float] = (0.4, 0.4, 0.2)
    normalization: str = "zscore"  # zscore | minmax | none
    grid_step: float = 0.1
    grid_metric: str = "recall@50"  # or "ndcg@10"


@dataclass
class EvalConfig:
    k_list: tuple[int, ...] = (10, 100, 1000)
    diversity_sample_pairs: int = 10000
    latency_sample_users: int = 50
    latency_warmup: int = 5


@dataclass
class RunConfig:
    seed: int = 0
    catalog_path: str = "catalog.jsonl"
    interactions_path: str = "interactions.jsonl"
    embeddings_path: str = "embeddings.jsonl"
    embedding_dim: int = 64
    pooling: str = "average"  # average | first
    head_fraction: float = 0.10
    holdout_fraction: float = 0.20
    beam_width: int = 5
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    cf: CFConfig = field(default_factory=CFConfig)
    markov: MarkovConfig = field(default_factory=MarkovConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        if not 0 < self.head_fraction < 1:
            raise ConfigError(f"head_fraction must be in (0,1), got {self.head_fraction}")
        if not 0 < self.holdout_fraction < 1:
            raise ConfigError(f"holdout_fraction must be in (0,1), "
                              f"got {self.holdout_fraction}")
        if self.beam_width < 1:
            raise ConfigError(f"beam_width must be >= 1, got {self.beam_width}")
        if self.pooling not in ("average", "first"):
            raise ConfigError(f"unknown pooling mode {self.pooling!r}")
        if self.cf.backend not in ("itemknn", "bpr"):
            raise ConfigError(f"unknown cf backend {self.cf.backend!r}")
        if self.fusion.normalization not in ("zscore", "minmax", "none"):
            raise ConfigError(f"unknown normalization {self.fusion.normalization!r}")
        if not 0 < self.fusion.grid_step <= 1:
            raise ConfigError(f"grid_step must be in (0,1], got {self.fusion.grid_step}")
        if self.align.loss not in ("listmle", "ranknet"):
            raise ConfigError(f"unknown alignment loss {self.align.loss!r}")
        if self.markov.order < 1:
            raise ConfigError(f"markov order must be >= 1, got {self.markov.order}")
        if self.markov.alpha <= 0:
            raise ConfigError(f"markov alpha must be > 0, got {self.markov.alpha}")
        if any(k < 1 for k in self.evaluation.k_list):
            raise ConfigError("all metric cutoffs must be >= 1")
        if min(self.fusion.weights) < 0 or max(self.fusion.weights) <= 0:
            raise ConfigError("fusion weights must be >= 0 and not all zero")
        return self


_SECTIONS = {
    "synthetic": SyntheticConfig,
    "attention": AttentionConfig,
    "cf": CFConfig,
    "markov": MarkovConfig,
    "align": AlignConfig,
    "fusion": FusionConfig,
    "evaluation": EvalConfig,
}


def _build(cls, obj, where):
    fields = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in obj.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if key in _SECTIONS and cls is RunConfig:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key!r} must be an object")
            kwargs[key] = _build(_SECTIONS[key], value, f"{where}{key}.")
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config section {where or '<root>'}: {exc}") from exc


def load_config(path) -> RunConfig:
    """Load a JSON config file into a validated RunConfig."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return _build(RunConfig, obj, "").validate()


def config_to_dict(cfg) -> dict:
    """Plain, JSON-serializable view of a config (tuples become lists)."""
    return json.loads(json.dumps(dataclasses.asdict(cfg), sort_keys=True))


def config_lines(cfg, prefix="config.") -> list[str]:
    """Flattened key<TAB>value lines for echoing into reports."""
    out = []

    def walk(obj, pfx):
        for key in sorted(obj):
            val = obj[key]
            if isinstance(val, dict):
                walk(val, f"{pfx}{key}.")
            else:
                out.append(f"{pfx}{key}\t{json.dumps(val)}")

    walk(config_to_dict(cfg), prefix)
    return out
