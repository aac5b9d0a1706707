"""Corpus windowing rules, mirrored from the trainer's documented contract.

The trainer and this tool must derive byte-identical window position keys
from the same corpus and vocabulary: tokens are lowercased word/punctuation
runs with punctuation-only tokens dropped, paragraphs never share windows,
out-of-vocabulary tokens are removed before windowing, and keys pack
``doc << 40 | paragraph << 20 | in-vocabulary token offset``.  Frozen test
vectors shared with the trainer's suite pin this alignment.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

DOC_SEPARATOR = "<<<DOC>>>"

_TOKEN_RE = re.compile(r"\w+|[^\w\s]+")

_DOC_BITS, _PARA_BITS, _TOK_BITS = 24, 20, 20


def tokenize(text: str) -> list[str]:
    """Lowercase, split into word/punctuation runs, drop non-alnum tokens."""
    tokens = _TOKEN_RE.findall(text.lower())
    return [t for t in tokens if any(ch.isalnum() for ch in t)]


def split_paragraphs(text: str) -> list[str]:
    parts = re.split(r"\n\s*\n", text)
    return [p for p in (part.strip() for part in parts) if p]


def split_documents(text: str) -> list[str]:
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


def pack_position(doc: int, para: int, token: int) -> int:
    if not (0 <= doc < 1 << _DOC_BITS):
        raise ValueError(f"doc index {doc} out of range")
    if not (0 <= para < 1 << _PARA_BITS):
        raise ValueError(f"paragraph index {para} out of range")
    if not (0 <= token < 1 << _TOK_BITS):
        raise ValueError(f"token offset {token} out of range")
    return (doc << (_PARA_BITS + _TOK_BITS)) | (para << _TOK_BITS) | token


class Vocab:
    """Vocabulary file reader: ``word<TAB>count`` lines, line order is id."""

    def __init__(self, words: list[str], counts: list[int]):
        self.words = words
        self.counts = counts
        self.id_of = {w: i for i, w in enumerate(words)}

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.id_of

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
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
        if not words:
            raise ValueError(f"{path}: empty vocabulary")
        return cls(words, counts)

    def digest(self) -> bytes:
        """MD5 over the canonical ``word<TAB>count\\n`` serialization."""
        blob = "".join(
            f"{w}\t{int(c)}\n" for w, c in zip(self.words, self.counts)
        ).encode("utf-8")
        return hashlib.md5(blob).digest()


@dataclass
class ParagraphTokens:
    doc: int
    para: int
    tokens: list[str]  # all tokens, in text order
    invocab_token_idx: list[int]  # token index of each in-vocabulary token
    invocab_ids: list[int]  # matching word ids


def iter_paragraphs(paths: list[str | Path], vocab: Vocab) -> Iterator[ParagraphTokens]:
    doc_base = 0
    for path in paths:
        text = Path(path).read_text(encoding="utf-8")
        docs = split_documents(text)
        for d, doc in enumerate(docs):
            for p, para in enumerate(split_paragraphs(doc)):
                tokens = tokenize(para)
                if not tokens:
                    continue
                idx = [i for i, t in enumerate(tokens) if t in vocab.id_of]
                ids = [vocab.id_of[tokens[i]] for i in idx]
                yield ParagraphTokens(doc_base + d, p, tokens, idx, ids)
        doc_base += len(docs)


def iter_window_spans(n_invocab: int, delta: int) -> Iterator[tuple[int, list[int]]]:
    """(center position, context positions) over the in-vocabulary sequence."""
    for i in range(n_invocab):
        lo = max(0, i - delta)
        hi = min(n_invocab, i + delta + 1)
        ctx = [j for j in range(lo, hi) if j != i]
        if ctx:
            yield i, ctx
