"""Parameter storage and forward computations of the sense embedding model.

Every word owns one global embedding plus, per sense, a sense embedding
(used to score context words) and a disambiguation embedding (dotted with
a context embedding to produce sense logits).  All operations here are
pure reads; mutation is the trainer's job.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import ContextWindow

ITER_SHARED = "shared-window"
ITER_WORD_CENTERED = "word-centered"
ITER_MODES = (ITER_SHARED, ITER_WORD_CENTERED)


@dataclass
class SenseModelParams:
    """Model parameters: global (V,D), sense (V,K,D), disambiguation (V,K,D)."""

    global_emb: np.ndarray
    sense_emb: np.ndarray
    disamb_emb: np.ndarray

    @property
    def vocab_size(self) -> int:
        return self.global_emb.shape[0]

    @property
    def num_senses(self) -> int:
        return self.sense_emb.shape[1]

    @property
    def dim(self) -> int:
        return self.global_emb.shape[1]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"global": self.global_emb, "sense": self.sense_emb, "disamb": self.disamb_emb}

    def validate(self) -> None:
        v, d = self.global_emb.shape
        if self.sense_emb.shape[0] != v or self.sense_emb.shape[2] != d:
            raise ValueError("sense embedding shape inconsistent with global")
        if self.disamb_emb.shape != self.sense_emb.shape:
            raise ValueError("disambiguation embedding shape mismatch")
        for arr in (self.global_emb, self.sense_emb, self.disamb_emb):
            if not np.isfinite(arr).all():
                raise ValueError("non-finite model parameter")

    def copy(self) -> "SenseModelParams":
        return SenseModelParams(
            self.global_emb.copy(), self.sense_emb.copy(), self.disamb_emb.copy()
        )


def init_params(
    vocab_size: int,
    num_senses: int,
    dim: int,
    seed: int,
    dtype=np.float64,
) -> SenseModelParams:
    """Initialize all entries i.i.d. uniform on [-1/dim, 1/dim]."""
    if vocab_size < 1 or num_senses < 1 or dim < 1:
        raise ValueError("vocab_size, num_senses and dim must all be >= 1")
    rng = np.random.default_rng(seed)
    bound = 1.0 / dim
    g = rng.uniform(-bound, bound, size=(vocab_size, dim)).astype(dtype)
    v = rng.uniform(-bound, bound, size=(vocab_size, num_senses, dim)).astype(dtype)
    d = rng.uniform(-bound, bound, size=(vocab_size, num_senses, dim)).astype(dtype)
    return SenseModelParams(g, v, d)


def sigmoid(x):
    """Numerically stable logistic function 1/(1+exp(-x))."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax with max-subtraction for stability."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def context_embedding_global(window: ContextWindow, params: SenseModelParams) -> np.ndarray:
    """Mean of the global embeddings of the window's context words.

    Truncated windows divide by the actual context size, so the result is
    always an average regardless of paragraph-edge truncation.
    """
    if len(window.context) == 0:
        raise ValueError("window has no context words")
    return params.global_emb[window.context].mean(axis=0)


def sense_posterior(
    word_id: int,
    context_vec: np.ndarray,
    params: SenseModelParams,
    temperature: float = 1.0,
) -> np.ndarray:
    """Distribution over *word_id*'s senses given a context embedding.

    Sense logits are the dot products of the word's disambiguation
    embeddings with *context_vec*, divided by *temperature*.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = params.disamb_emb[word_id] @ np.asarray(context_vec, dtype=np.float64)
    if not np.isfinite(logits).all():
        raise ValueError(f"non-finite sense logits for word {word_id}")
    return softmax(logits / temperature)


def step_one_posteriors(
    window: ContextWindow,
    params: SenseModelParams,
    mode: str = ITER_SHARED,
    delta: int | None = None,
) -> np.ndarray:
    """First-pass sense posteriors for each context word, shape (m, K).

    Each context word is disambiguated against an average of global
    embeddings of the other window words (center included):

    - ``shared-window``: all other words of the window;
    - ``word-centered``: only those within ``delta`` of the context word's
      own offset (when ``delta`` is omitted it is recovered as the largest
      |offset| present).

    Callers treat the result as constant under differentiation.
    """
    if mode not in ITER_MODES:
        raise ValueError(f"unknown iterative-context mode {mode!r}")
    if len(window.context) == 0:
        raise ValueError("window has no context words")
    ids = np.concatenate(([window.center], window.context))
    offs = np.concatenate(([0], window.offsets))
    g = params.global_emb[ids]  # (m+1, D)
    m = len(window.context)
    posts = np.empty((m, params.num_senses), dtype=np.float64)
    if mode == ITER_SHARED:
        total = g.sum(axis=0)
        for j in range(m):
            c1 = (total - g[j + 1]) / (len(ids) - 1)
            posts[j] = sense_posterior(int(window.context[j]), c1, params)
    else:
        if delta is None:
            delta = int(np.abs(window.offsets).max())
        for j in range(m):
            near = (np.abs(offs - offs[j + 1]) <= delta) & (np.arange(len(ids)) != j + 1)
            c1 = g[near].mean(axis=0)
            posts[j] = sense_posterior(int(window.context[j]), c1, params)
    return posts


def context_embedding_iterative(
    window: ContextWindow,
    params: SenseModelParams,
    mode: str = ITER_SHARED,
    delta: int | None = None,
) -> np.ndarray:
    """Two-pass context embedding: posterior-weighted sense vectors, averaged.

    Pass one disambiguates every context word (see
    :func:`step_one_posteriors`); pass two averages each context word's
    sense embeddings weighted by those posteriors.  With K=1 this reduces
    exactly to the mean of the single sense vectors.
    """
    posts = step_one_posteriors(window, params, mode, delta)
    vs = params.sense_emb[window.context]  # (m, K, D)
    return np.einsum("mk,mkd->d", posts, vs) / len(window.context)


def score_context_word(
    context_id: int, center_id: int, sense: int, params: SenseModelParams
) -> float:
    """sigma(<global[context], sense[center, sense]>)."""
    dot = params.global_emb[context_id] @ params.sense_emb[center_id, sense]
    return float(sigmoid(dot))


def mixture_context_prob(
    context_id: int, window: ContextWindow, params: SenseModelParams
) -> float:
    """Probability of a context word under the sense mixture of the center.

    Per-sense sigmoid scores weighted by the center's sense posterior,
    with the posterior computed from the global context embedding.
    """
    c = context_embedding_global(window, params)
    alpha = sense_posterior(window.center, c, params)
    scores = sigmoid(params.sense_emb[window.center] @ params.global_emb[context_id])
    return float(alpha @ scores)
