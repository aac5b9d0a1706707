"""Corpus handling: tokenization, vocabulary, context windows, negative sampling.

Text is organized as documents -> paragraphs -> tokens.  Context windows
slide over each paragraph independently and never cross a paragraph
boundary.  Out-of-vocabulary tokens are removed before windowing, so the
window radius counts in-vocabulary words only.
"""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

DOC_SEPARATOR = "<<<DOC>>>"

# Word-character runs and punctuation runs become separate tokens; the
# alnum filter below then drops pure-punctuation tokens.
_TOKEN_RE = re.compile(r"\w+|[^\w\s]+")

# Position keys pack (doc, paragraph, token offset) into one u64.
_DOC_BITS, _PARA_BITS, _TOK_BITS = 24, 20, 20


def tokenize(text: str) -> list[str]:
    """Lowercase *text* and split it into tokens.

    Splits on whitespace and on word/punctuation boundaries, then drops
    every token that contains no alphanumeric character ("..." or "!!!"
    disappear, "world" survives "world!").  Empty input yields an empty
    list.  Idempotent on its own (space-joined) output.
    """
    tokens = _TOKEN_RE.findall(text.lower())
    return [t for t in tokens if any(ch.isalnum() for ch in t)]


def split_paragraphs(text: str) -> list[str]:
    """Split *text* into paragraphs on blank lines."""
    parts = re.split(r"\n\s*\n", text)
    return [p for p in (part.strip() for part in parts) if p]


def split_documents(text: str) -> list[str]:
    """Split a concatenated corpus into documents on ``<<<DOC>>>`` lines."""
    docs: list[str] = []
    current: list[str] = []
    for line in text.splitlines():
        if line.strip() == DOC_SEPARATOR:
            docs.append("\n".join(current))
            current = []
        else:
            current.append(line)
    docs.append("\n".join(current))
    return [d for d in docs if d.strip()]


class Vocabulary:
    """Word/id bimap with corpus frequencies.

    Ids are contiguous ``0..V-1`` in the order words were supplied.  Counts
    are non-negative; zero counts only occur in fixed-list mode where a
    listed word never appeared in the corpus.
    """

    def __init__(self, words: Sequence[str], counts: Sequence[int]):
        if len(words) == 0:
            raise ValueError("empty vocabulary")
        if len(words) != len(counts):
            raise ValueError("words and counts length mismatch")
        self.words: list[str] = list(words)
        self.counts = np.asarray(counts, dtype=np.int64)
        if np.any(self.counts < 0):
            raise ValueError("negative word count")
        self.id_of: dict[str, int] = {w: i for i, w in enumerate(self.words)}
        if len(self.id_of) != len(self.words):
            raise ValueError("duplicate words in vocabulary")

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.id_of

    def encode(self, tokens: Iterable[str]) -> list[int]:
        """Map tokens to ids, silently dropping out-of-vocabulary tokens."""
        get = self.id_of.get
        return [i for i in (get(t) for t in tokens) if i is not None]

    def to_bytes(self) -> bytes:
        """Canonical serialization: one ``word<TAB>count`` line per id."""
        return "".join(
            f"{w}\t{int(c)}\n" for w, c in zip(self.words, self.counts)
        ).encode("utf-8")

    def digest(self) -> bytes:
        """16-byte MD5 of the canonical serialization; binds model files."""
        return hashlib.md5(self.to_bytes()).digest()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        words, counts = [], []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                try:
                    word, count = line.split("\t")
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: expected 'word<TAB>count'")
                words.append(word)
                counts.append(int(count))
        return cls(words, counts)


def build_vocab(
    tokens: Iterable[str],
    min_count: int = 1,
    fixed_words: Sequence[str] | None = None,
) -> Vocabulary:
    """Tally *tokens* and build a :class:`Vocabulary`.

    In fixed-list mode (``fixed_words`` given) only the listed words are
    retained, in list order, and zero counts are permitted.  Otherwise
    words with count below ``min_count`` are dropped and ids are assigned
    by descending count (ties alphabetical).
    """
    tally = Counter(tokens)
    if fixed_words is not None:
        return Vocabulary(list(fixed_words), [tally.get(w, 0) for w in fixed_words])
    kept = [(w, c) for w, c in tally.items() if c >= min_count]
    if not kept:
        raise ValueError("no words survive min_count filtering")
    kept.sort(key=lambda wc: (-wc[1], wc[0]))
    return Vocabulary([w for w, _ in kept], [c for _, c in kept])


@dataclass
class ContextWindow:
    """One training/evaluation unit: a center word and its neighbours.

    ``context`` holds the in-vocabulary word ids within ``delta`` positions
    of the center inside one paragraph, in text order; ``offsets`` holds
    each context word's signed distance from the center (never 0).
    """

    center: int
    context: np.ndarray
    offsets: np.ndarray
    position: tuple[int, int, int] = (0, 0, 0)  # (doc, paragraph, token offset)

    def __len__(self) -> int:
        return len(self.context)


def pack_position(doc: int, para: int, token: int) -> int:
    """Encode a window position as one u64 key: doc(24) | para(20) | token(20)."""
    if not (0 <= doc < 1 << _DOC_BITS):
        raise ValueError(f"doc index {doc} out of range")
    if not (0 <= para < 1 << _PARA_BITS):
        raise ValueError(f"paragraph index {para} out of range")
    if not (0 <= token < 1 << _TOK_BITS):
        raise ValueError(f"token offset {token} out of range")
    return (doc << (_PARA_BITS + _TOK_BITS)) | (para << _TOK_BITS) | token


def unpack_position(key: int) -> tuple[int, int, int]:
    mask_tok = (1 << _TOK_BITS) - 1
    mask_para = (1 << _PARA_BITS) - 1
    return key >> (_PARA_BITS + _TOK_BITS), (key >> _TOK_BITS) & mask_para, key & mask_tok


def position_key(window: ContextWindow) -> int:
    return pack_position(*window.position)


def iter_windows(
    ids: Sequence[int],
    delta: int,
    doc_index: int = 0,
    paragraph_index: int = 0,
) -> Iterator[ContextWindow]:
    """Yield one window per token of an in-vocabulary id sequence.

    Context is truncated at paragraph edges (never padded); positions whose
    context would be empty are skipped, so a one-token paragraph yields
    nothing.
    """
    if delta < 1:
        raise ValueError("delta must be >= 1")
    arr = np.asarray(ids, dtype=np.int64)
    n = len(arr)
    for i in range(n):
        lo = max(0, i - delta)
        hi = min(n, i + delta + 1)
        if hi - lo <= 1:
            continue
        idx = np.r_[lo:i, i + 1 : hi]
        yield ContextWindow(
            center=int(arr[i]),
            context=arr[idx],
            offsets=idx - i,
            position=(doc_index, paragraph_index, i),
        )


class NegativeSampler:
    """Draws word ids from the smoothed unigram distribution count^exponent.

    The table is a cumulative distribution over ids; draws are inverse-CDF
    lookups, deterministic for a given seed.
    """

    def __init__(self, counts: Sequence[int], exponent: float = 0.75, seed: int = 0):
        counts = np.asarray(counts, dtype=np.float64)
        if counts.ndim != 1 or len(counts) == 0:
            raise ValueError("counts must be a non-empty 1-d sequence")
        weights = np.power(counts, exponent, where=counts > 0, out=np.zeros_like(counts))
        total = weights.sum()
        if total <= 0:
            raise ValueError("no word has positive count")
        self.exponent = exponent
        self.seed = seed
        self.probs = weights / total
        self.cumulative = np.cumsum(self.probs)
        self.cumulative[-1] = 1.0  # guard against rounding drift at the tail
        self._rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self.probs)

    def draw(self, n: int, exclude: int | None = None) -> list[int]:
        """Draw *n* ids i.i.d., redrawing any sample equal to *exclude*."""
        if n < 1:
            raise ValueError("n must be >= 1")
        if len(self.probs) < 2:
            raise ValueError("need a vocabulary of at least 2 words")
        if exclude is not None and self.probs[exclude] > 1.0 - 1e-12:
            raise ValueError("all probability mass sits on the excluded word")
        out: list[int] = []
        while len(out) < n:
            u = self._rng.random(n - len(out))
            ids = np.searchsorted(self.cumulative, u, side="right")
            if exclude is not None:
                ids = ids[ids != exclude]
            out.extend(int(i) for i in ids)
        return out[:n]

    def draw_batch(self, shape: tuple[int, ...], exclude: np.ndarray | None = None) -> np.ndarray:
        """Vectorized draw of an id array, redrawing collisions with *exclude*.

        ``exclude`` must broadcast against *shape*; pass None to sample the
        raw distribution.
        """
        if len(self.probs) < 2:
            raise ValueError("need a vocabulary of at least 2 words")
        u = self._rng.random(shape)
        ids = np.searchsorted(self.cumulative, u, side="right").astype(np.int64)
        if exclude is not None:
            excl = np.broadcast_to(np.asarray(exclude, dtype=np.int64), ids.shape)
            bad = ids == excl
            while bad.any():
                u = self._rng.random(int(bad.sum()))
                ids[bad] = np.searchsorted(self.cumulative, u, side="right")
                bad = ids == excl
        return ids


class Corpus:
    """A tokenized corpus held in memory as (doc, paragraph) token lists."""

    def __init__(self, paragraphs: list[tuple[int, int, list[str]]]):
        self.paragraphs = paragraphs

    @classmethod
    def from_text(cls, text: str) -> "Corpus":
        paragraphs = []
        for d, doc in enumerate(split_documents(text)):
            for p, para in enumerate(split_paragraphs(doc)):
                toks = tokenize(para)
                if toks:
                    paragraphs.append((d, p, toks))
        return cls(paragraphs)

    @classmethod
    def from_paths(cls, paths: Sequence[str | Path]) -> "Corpus":
        """Read one or more corpus files; each may hold several documents."""
        paragraphs = []
        doc_base = 0
        for path in paths:
            text = Path(path).read_text(encoding="utf-8")
            docs = split_documents(text)
            for d, doc in enumerate(docs):
                for p, para in enumerate(split_paragraphs(doc)):
                    toks = tokenize(para)
                    if toks:
                        paragraphs.append((doc_base + d, p, toks))
            doc_base += len(docs)
        return cls(paragraphs)

    def token_stream(self) -> Iterator[str]:
        for _, _, toks in self.paragraphs:
            yield from toks

    def iter_windows(self, vocab: Vocabulary, delta: int) -> Iterator[ContextWindow]:
        for d, p, toks in self.paragraphs:
            yield from iter_windows(vocab.encode(toks), delta, d, p)

    def count_windows(self, vocab: Vocabulary, delta: int) -> int:
        return sum(1 for _ in self.iter_windows(vocab, delta))
