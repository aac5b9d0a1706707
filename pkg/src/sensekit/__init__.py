"""sensekit: multi-sense word embeddings with attention-based disambiguation."""

from .corpus import (
    ContextWindow,
    Corpus,
    NegativeSampler,
    Vocabulary,
    build_vocab,
    iter_windows,
    position_key,
    tokenize,
)
from .model import (
    SenseModelParams,
    context_embedding_global,
    context_embedding_iterative,
    init_params,
    mixture_context_prob,
    score_context_word,
    sense_posterior,
)
from .train import TrainConfig, combined_loss, distill_loss, sense_loss, train

__version__ = "0.1.0"

__all__ = [
    "ContextWindow",
    "Corpus",
    "NegativeSampler",
    "SenseModelParams",
    "TrainConfig",
    "Vocabulary",
    "build_vocab",
    "combined_loss",
    "context_embedding_global",
    "context_embedding_iterative",
    "distill_loss",
    "init_params",
    "iter_windows",
    "mixture_context_prob",
    "position_key",
    "score_context_word",
    "sense_loss",
    "sense_posterior",
    "tokenize",
    "train",
]
