"""Hybrid long-tail recommendation engine with an offline benchmark harness.

Combines three scoring channels per candidate item: cosine similarity to an
attention-encoded user intent vector, collaborative filtering (item-kNN or
BPR matrix factorization), and next-item log-probability under a smoothed
Markov sequence model aligned to offline feedback with listwise/pairwise
ranking losses. Channel scores are fused by a weighted linear combination
tuned through validation grid search.
"""

from .config import RunConfig, TrainingConfig
from .data import (Dataset, InteractionRecord, ItemRecord, SplitDataset,
                   chronological_split, classify_head_tail, generate_synthetic,
                   load_dataset, save_dataset)
from .embeddings import (EmbeddingMatrix, cosine, embed_catalog,
                         ingest_embeddings, pool, pseudo_embed, top_k_semantic)
from .fusion import FusionWeights, HybridPipeline, RecommendationList, fuse
from .intent import AttentionParams, UserHistory, intent, train_intent
from .seqmodel import MarkovModel, beam_search, fit_markov, gen_log_prob

__version__ = "0.1.0"
