"""Evaluation: sense induction scoring, contextual similarity, neighbors.

Dataset files are plain UTF-8 TSV.  Sense-induction lines read
``target<TAB>gold_label<TAB>context tokens...``; similarity lines read
``word1<TAB>word2<TAB>score<TAB>context1<TAB>context2`` where each context
marks the target occurrence as ``<b>word</b>``.  Out-of-vocabulary items
are skipped and counted, never imputed.
"""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import ContextWindow, Vocabulary
from .model import (
    ITER_SHARED,
    SenseModelParams,
    context_embedding_iterative,
    sense_posterior,
)

logger = logging.getLogger(__name__)

_MARK_RE = re.compile(r"<b>(.*?)</b>", re.DOTALL)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def ari(labels_a, labels_b) -> float:
    """Adjusted Rand Index between two labelings of the same items.

    Chance-corrected pair-counting agreement computed from the contingency
    table; 1.0 for identical clusterings up to relabeling, 0 expected for
    independent ones.  Degenerate cases where max equals expected (both
    all-singletons or both one-cluster) are identical partitions and score 1.
    """
    a = list(labels_a)
    b = list(labels_b)
    if len(a) != len(b):
        raise ValueError("labelings differ in length")
    n = len(a)
    if n < 2:
        raise ValueError("need at least 2 items")
    table = Counter(zip(a, b))
    rows = Counter(a)
    cols = Counter(b)

    def comb2(x: int) -> float:
        return x * (x - 1) / 2.0

    index = sum(comb2(c) for c in table.values())
    sum_rows = sum(comb2(c) for c in rows.values())
    sum_cols = sum(comb2(c) for c in cols.values())
    expected = sum_rows * sum_cols / comb2(n)
    maximum = (sum_rows + sum_cols) / 2.0
    if maximum == expected:
        return 1.0
    return (index - expected) / (maximum - expected)


def _average_ranks(xs: np.ndarray) -> np.ndarray:
    """Ranks starting at 1; tied values share the average of their ranks."""
    order = np.argsort(xs, kind="stable")
    ranks = np.empty(len(xs), dtype=np.float64)
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[order[j + 1]] == xs[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys) -> float:
    """Spearman's rho: Pearson correlation of average-tied ranks."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("need two equal-length 1-d sequences of length >= 2")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("non-finite input")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx @ rx) * (ry @ ry))
    if denom == 0.0:
        raise ValueError("zero rank variance")
    return float((rx @ ry) / denom)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


# ---------------------------------------------------------------------------
# Sense assignment
# ---------------------------------------------------------------------------


def _window_around(
    ids: list[int], at: int, delta: int, center: int
) -> ContextWindow | None:
    lo = max(0, at - delta)
    hi = min(len(ids), at + delta + 1)
    idx = list(range(lo, at)) + list(range(at + 1, hi))
    if not idx:
        return None
    return ContextWindow(
        center=center,
        context=np.array([ids[i] for i in idx], dtype=np.int64),
        offsets=np.array(idx, dtype=np.int64) - at,
    )


def context_window_for(
    tokens: list[str],
    target: str,
    vocab: Vocabulary,
    delta: int,
) -> ContextWindow | None:
    """Window of in-vocabulary ids around the first occurrence of *target*.

    Out-of-vocabulary tokens are removed first, so the radius counts
    in-vocabulary words, mirroring training.  Returns None when no context
    word survives.  Raises if *target* does not occur in *tokens*.
    """
    if target not in vocab.id_of:
        raise KeyError(f"target {target!r} not in vocabulary")
    kept = [(t, vocab.id_of[t]) for t in tokens if t in vocab.id_of]
    at = next((i for i, (t, _) in enumerate(kept) if t == target), None)
    if at is None:
        raise ValueError(f"target {target!r} does not occur in its context")
    ids = [i for _, i in kept]
    return _window_around(ids, at, delta, vocab.id_of[target])


def assign_sense(
    window: ContextWindow,
    params: SenseModelParams,
    iter_context: str = ITER_SHARED,
    return_posterior: bool = False,
    delta: int | None = None,
):
    """Most probable sense for the window's center; ties break to the lowest.

    The posterior uses the iterative context embedding, matching the
    neighbor and induction pipelines.
    """
    c = context_embedding_iterative(window, params, iter_context, delta)
    post = sense_posterior(window.center, c, params)
    k = int(np.argmax(post))
    if return_posterior:
        return k, post
    return k


# ---------------------------------------------------------------------------
# Word sense induction
# ---------------------------------------------------------------------------


@dataclass
class WsiInstance:
    target: str
    gold: str
    tokens: list[str]


def load_wsi(path: str | Path, vocab: Vocabulary):
    """Parse a sense-induction TSV; returns (instances by target, skipped)."""
    grouped: dict[str, list[WsiInstance]] = {}
    skipped = 0
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) < 3:
                raise ValueError(f"{path}:{lineno}: expected 3+ tab-separated fields")
            target, gold = parts[0].lower(), parts[1]
            tokens = " ".join(parts[2:]).split()
            tokens = [t.lower() for t in tokens]
            if target not in vocab.id_of or target not in tokens:
                skipped += 1
                continue
            grouped.setdefault(target, []).append(WsiInstance(target, gold, tokens))
    return grouped, skipped


@dataclass
class WsiResult:
    per_word: dict[str, float]
    mean: float
    scored_words: int
    skipped_instances: int
    skipped_words: int


def eval_wsi(
    grouped: dict[str, list[WsiInstance]],
    params: SenseModelParams,
    vocab: Vocabulary,
    delta: int = 5,
    iter_context: str = ITER_SHARED,
    skipped_instances: int = 0,
) -> WsiResult:
    """Per-target ARI of predicted senses vs gold labels; unweighted mean."""
    per_word: dict[str, float] = {}
    skipped_words = 0
    for word, instances in sorted(grouped.items()):
        preds: list[int] = []
        golds: list[str] = []
        for inst in instances:
            window = context_window_for(inst.tokens, word, vocab, delta)
            if window is None:
                skipped_instances += 1
                continue
            preds.append(assign_sense(window, params, iter_context, delta=delta))
            golds.append(inst.gold)
        if len(preds) < 2:
            logger.warning("skipping %r: fewer than 2 scorable instances", word)
            skipped_words += 1
            continue
        per_word[word] = ari(preds, golds)
    if not per_word:
        raise ValueError("no target word had enough scorable instances")
    mean = float(np.mean(list(per_word.values())))
    return WsiResult(per_word, mean, len(per_word), skipped_instances, skipped_words)


# ---------------------------------------------------------------------------
# Contextual word similarity
# ---------------------------------------------------------------------------


@dataclass
class ScwsPair:
    word1: str
    word2: str
    score: float
    context1: tuple[list[str], list[str]]  # tokens before / after the mark
    context2: tuple[list[str], list[str]]


def _parse_marked_context(text: str, expected: str, where: str) -> tuple[list[str], list[str]]:
    m = _MARK_RE.search(text)
    if m is None:
        raise ValueError(f"{where}: no <b>...</b> mark")
    from .corpus import tokenize

    marked = tokenize(m.group(1))
    if not marked:
        raise ValueError(f"{where}: empty <b>...</b> mark")
    if marked[0] != expected:
        logger.debug("%s: marked %r, scored word %r", where, marked[0], expected)
    return tokenize(text[: m.start()]), tokenize(text[m.end() :])


def load_scws(path: str | Path) -> list[ScwsPair]:
    pairs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields")
            w1, w2 = parts[0].lower(), parts[1].lower()
            score = float(parts[2])
            if not np.isfinite(score):
                raise ValueError(f"{path}:{lineno}: non-finite score")
            c1 = _parse_marked_context(parts[3], w1, f"{path}:{lineno}")
            c2 = _parse_marked_context(parts[4], w2, f"{path}:{lineno}")
            pairs.append(ScwsPair(w1, w2, score, c1, c2))
    return pairs


def _pair_window(
    word: str,
    context: tuple[list[str], list[str]],
    vocab: Vocabulary,
    delta: int | None,
) -> ContextWindow | None:
    """Window around the marked occurrence; ``delta=None`` keeps all context."""
    before = vocab.encode(context[0])
    after = vocab.encode(context[1])
    if delta is not None:
        before = before[-delta:]
        after = after[:delta]
    if not before and not after:
        return None
    ids = np.array(before + after, dtype=np.int64)
    offsets = np.array(
        list(range(-len(before), 0)) + list(range(1, len(after) + 1)), dtype=np.int64
    )
    return ContextWindow(center=vocab.id_of[word], context=ids, offsets=offsets)


def _pair_posteriors(
    pair: ScwsPair,
    params: SenseModelParams,
    vocab: Vocabulary,
    delta: int | None,
    iter_context: str,
):
    if pair.word1 not in vocab.id_of or pair.word2 not in vocab.id_of:
        return None
    win1 = _pair_window(pair.word1, pair.context1, vocab, delta)
    win2 = _pair_window(pair.word2, pair.context2, vocab, delta)
    if win1 is None or win2 is None:
        return None
    _, p1 = assign_sense(win1, params, iter_context, return_posterior=True, delta=delta)
    _, p2 = assign_sense(win2, params, iter_context, return_posterior=True, delta=delta)
    return win1.center, p1, win2.center, p2


def avg_simc(
    pair: ScwsPair,
    params: SenseModelParams,
    vocab: Vocabulary,
    delta: int | None = 5,
    iter_context: str = ITER_SHARED,
) -> float | None:
    """Probability-weighted cosine over all sense combinations, scaled by 1/K^2.

    Returns None for pairs that must be skipped (out-of-vocabulary word or
    no usable context).
    """
    got = _pair_posteriors(pair, params, vocab, delta, iter_context)
    if got is None:
        return None
    id1, p1, id2, p2 = got
    k = params.num_senses
    total = 0.0
    for i in range(k):
        for j in range(k):
            total += p1[i] * p2[j] * cosine(
                params.sense_emb[id1, i], params.sense_emb[id2, j]
            )
    return total / (k * k)


def max_simc(
    pair: ScwsPair,
    params: SenseModelParams,
    vocab: Vocabulary,
    delta: int | None = 5,
    iter_context: str = ITER_SHARED,
) -> float | None:
    """Cosine between each context's most probable sense vectors."""
    got = _pair_posteriors(pair, params, vocab, delta, iter_context)
    if got is None:
        return None
    id1, p1, id2, p2 = got
    i = int(np.argmax(p1))
    j = int(np.argmax(p2))
    return cosine(params.sense_emb[id1, i], params.sense_emb[id2, j])


@dataclass
class ScwsResult:
    metric: str
    rho: float
    pairs_scored: int
    skipped: int


def eval_scws(
    pairs: list[ScwsPair],
    params: SenseModelParams,
    vocab: Vocabulary,
    metric: str = "avgsimc",
    delta: int | None = 5,
    iter_context: str = ITER_SHARED,
) -> ScwsResult:
    """Spearman correlation of a similarity measure against human scores."""
    fn = {"avgsimc": avg_simc, "maxsimc": max_simc}.get(metric)
    if fn is None:
        raise ValueError(f"unknown similarity metric {metric!r}")
    model_scores: list[float] = []
    human_scores: list[float] = []
    skipped = 0
    for pair in pairs:
        s = fn(pair, params, vocab, delta, iter_context)
        if s is None:
            skipped += 1
            continue
        model_scores.append(s)
        human_scores.append(pair.score)
    if len(model_scores) < 2:
        raise ValueError("fewer than 2 scorable pairs")
    return ScwsResult(metric, spearman(model_scores, human_scores), len(model_scores), skipped)


# ---------------------------------------------------------------------------
# Nearest neighbors
# ---------------------------------------------------------------------------


def nearest_neighbors(
    word: str,
    context_tokens: list[str],
    params: SenseModelParams,
    vocab: Vocabulary,
    top_n: int = 5,
    delta: int = 5,
    iter_context: str = ITER_SHARED,
):
    """Vocabulary words closest to the word's in-context sense vector.

    Picks the most probable sense for the context, then ranks every
    vocabulary word (the query included) by cosine between that sense
    vector and the words' global embeddings.  Returns
    (sense index, sense probability, [(word, cosine), ...]).
    """
    if word not in vocab.id_of:
        raise KeyError(f"{word!r} not in vocabulary")
    window = context_window_for(context_tokens, word, vocab, delta)
    if window is None:
        raise ValueError("no in-vocabulary context words around the target")
    k, post = assign_sense(window, params, iter_context, return_posterior=True, delta=delta)
    query = params.sense_emb[vocab.id_of[word], k]
    g = params.global_emb
    norms = np.linalg.norm(g, axis=1) * np.linalg.norm(query)
    with np.errstate(invalid="ignore", divide="ignore"):
        cosines = np.where(norms > 0, g @ query / norms, 0.0)
    order = np.argsort(-cosines, kind="stable")[:top_n]
    ranked = [(vocab.words[i], float(cosines[i])) for i in order]
    return k, float(post[k]), ranked
