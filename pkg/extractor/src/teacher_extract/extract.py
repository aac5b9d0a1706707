"""Extraction pipeline: corpus windows -> pooled vectors -> record file.

The encoder sees each paragraph's full token sequence (out-of-vocabulary
tokens included, since they are part of the text), while records cover
only the in-vocabulary words of each window, keyed so the trainer finds
every one of its windows.  Windows touching a word with failed subword
alignment are skipped and counted; over-long paragraphs likewise.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import HfEncoder
from .records import Record, RecordWriter
from .windows import Vocab, iter_paragraphs, iter_window_spans, pack_position


@dataclass
class ExtractStats:
    paragraphs: int = 0
    paragraphs_skipped_length: int = 0
    windows_written: int = 0
    windows_skipped_alignment: int = 0


def extract(
    corpus_paths: list[str | Path],
    vocab_path: str | Path,
    encoder_spec: str,
    delta: int,
    out_path: str | Path,
    batch_size: int = 8,
    max_length: int | None = None,
) -> ExtractStats:
    if delta < 1:
        raise ValueError("window radius must be >= 1")
    vocab = Vocab.load(vocab_path)
    encoder = HfEncoder(encoder_spec, max_length=max_length)
    stats = ExtractStats()
    paragraphs = list(iter_paragraphs(corpus_paths, vocab))
    with RecordWriter(out_path, encoder.dim, delta, vocab.digest()) as writer:
        for start in range(0, len(paragraphs), batch_size):
            chunk = paragraphs[start : start + batch_size]
            encoded = encoder.encode_batch([p.tokens for p in chunk])
            for para, vectors in zip(chunk, encoded):
                stats.paragraphs += 1
                n = len(para.invocab_ids)
                if vectors is None:
                    stats.paragraphs_skipped_length += 1
                    stats.windows_skipped_alignment += sum(
                        1 for _ in iter_window_spans(n, delta)
                    )
                    continue
                for center, ctx in iter_window_spans(n, delta):
                    span = [j for j in ctx if j < center] + [center] + [
                        j for j in ctx if j > center
                    ]
                    pooled = [vectors[para.invocab_token_idx[j]] for j in span]
                    if any(v is None for v in pooled):
                        stats.windows_skipped_alignment += 1
                        continue
                    writer.write(
                        Record(
                            key=pack_position(para.doc, para.para, center),
                            center=para.invocab_ids[center],
                            offsets=[j - center for j in span],
                            word_ids=[para.invocab_ids[j] for j in span],
                            vectors=np.stack(pooled),
                        )
                    )
                    stats.windows_written += 1
    return stats
