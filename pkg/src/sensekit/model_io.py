"""Binary and text persistence of model parameters.

The binary layout is little-endian: a fixed header (magic ``SNS1``,
version, shapes, float width, vocabulary digest) followed by the global
rows, the sense rows (word-major, sense-minor), then the disambiguation
rows.  The vocabulary itself is stored separately and bound by digest so
model files stay shape-only.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .corpus import Vocabulary
from .model import SenseModelParams

MAGIC = b"SNS1"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIB16s")  # magic, version, V, K, D, width, digest


class ModelIOError(ValueError):
    """Base class for model file problems."""


class BadMagicError(ModelIOError):
    pass


class TruncatedModelError(ModelIOError):
    pass


class VocabDigestError(ModelIOError):
    pass


def save_model(
    params: SenseModelParams,
    vocab: Vocabulary,
    path: str | Path,
    width: int = 4,
) -> None:
    """Write parameters atomically; ``width`` selects f32 (4) or f64 (8)."""
    if width not in (4, 8):
        raise ValueError("float width must be 4 or 8")
    params.validate()
    if params.vocab_size != len(vocab):
        raise ValueError("parameter shape does not match vocabulary size")
    dtype = "<f4" if width == 4 else "<f8"
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(
                _HEADER.pack(
                    MAGIC, VERSION, params.vocab_size, params.num_senses,
                    params.dim, width, vocab.digest(),
                )
            )
            f.write(np.ascontiguousarray(params.global_emb, dtype=dtype).tobytes())
            f.write(np.ascontiguousarray(params.sense_emb, dtype=dtype).tobytes())
            f.write(np.ascontiguousarray(params.disamb_emb, dtype=dtype).tobytes())
        tmp.replace(path)
    except OSError as e:
        raise ModelIOError(f"cannot write model file {path}: {e}") from e


def load_model(path: str | Path, vocab: Vocabulary) -> SenseModelParams:
    """Exact inverse of :func:`save_model`; validates sizes before allocating."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ModelIOError(f"cannot read model file {path}: {e}") from e
    if len(data) < _HEADER.size:
        raise TruncatedModelError(f"{path}: file shorter than header")
    magic, version, v, k, d, width, digest = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ModelIOError(f"{path}: unsupported version {version}")
    if width not in (4, 8):
        raise ModelIOError(f"{path}: invalid float width {width}")
    expected = width * v * d * (1 + 2 * k)
    if len(data) - _HEADER.size != expected:
        raise TruncatedModelError(
            f"{path}: payload is {len(data) - _HEADER.size} bytes, expected {expected}"
        )
    if digest != vocab.digest():
        raise VocabDigestError(f"{path}: vocabulary digest mismatch")
    if v != len(vocab):
        raise ModelIOError(f"{path}: header V={v} but vocabulary has {len(vocab)}")
    dtype = np.dtype("<f4" if width == 4 else "<f8")
    off = _HEADER.size
    n_g, n_s = v * d, v * k * d
    g = np.frombuffer(data, dtype=dtype, count=n_g, offset=off).reshape(v, d).copy()
    off += n_g * width
    sv = np.frombuffer(data, dtype=dtype, count=n_s, offset=off).reshape(v, k, d).copy()
    off += n_s * width
    dv = np.frombuffer(data, dtype=dtype, count=n_s, offset=off).reshape(v, k, d).copy()
    return SenseModelParams(g, sv, dv)


def export_text(params: SenseModelParams, vocab: Vocabulary, path: str | Path) -> None:
    """Text export: header ``<V*(K+1)> <D>``, then per word the global vector
    line ``word v1..vD`` followed by one ``word#k`` line per sense, with 9
    significant digits."""
    params.validate()
    if params.vocab_size != len(vocab):
        raise ValueError("parameter shape does not match vocabulary size")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    k = params.num_senses
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(f"{params.vocab_size * (k + 1)} {params.dim}\n")
        for i, word in enumerate(vocab.words):
            vals = " ".join(f"{x:.9g}" for x in params.global_emb[i])
            f.write(f"{word} {vals}\n")
            for s in range(k):
                vals = " ".join(f"{x:.9g}" for x in params.sense_emb[i, s])
                f.write(f"{word}#{s} {vals}\n")
    tmp.replace(path)
