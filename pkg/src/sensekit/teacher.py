"""Teacher sense model: fit sense vectors to pooled contextual embeddings.

Records of pooled per-word context vectors are ingested from a binary
``TSE1`` file; the fit decomposes each center vector as a posterior-
weighted sum of per-sense vectors trained by MSE.  Softened posteriors are
exported to a ``TPO1`` sidecar keyed by window position so distillation
never re-runs the fit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .train import AdamState, GradientSet, RowGrads, adam_step
from .model import softmax

TSE_MAGIC = b"TSE1"
TPO_MAGIC = b"TPO1"
TSE_VERSION = 1
_TSE_HEADER = struct.Struct("<4sIIIQ16s")  # magic, version, Dt, delta, count, digest
_REC_HEAD = struct.Struct("<QIB")  # key, center id, m
_ENTRY_HEAD = struct.Struct("<bI")  # offset, word id
_TPO_HEADER = struct.Struct("<4sIQ")  # magic, K, count


class TeacherFileError(ValueError):
    """Malformed, truncated, or mismatched teacher-side binary file."""


@dataclass
class TeacherRecord:
    """Pooled contextual vectors for one window; the center sits at offset 0."""

    key: int
    center: int
    offsets: np.ndarray  # (m,) int8, within [-delta, delta]
    word_ids: np.ndarray  # (m,) int64
    vectors: np.ndarray  # (m, Dt) float32

    def center_vector(self) -> np.ndarray:
        at = np.nonzero(self.offsets == 0)[0]
        if len(at) != 1:
            raise TeacherFileError(f"record {self.key}: center vector missing")
        return self.vectors[at[0]]


@dataclass
class TeacherRecordStore:
    dim: int  # Dt
    delta: int
    vocab_digest: bytes
    records: list[TeacherRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[TeacherRecord]:
        return iter(self.records)


def save_records(store: TeacherRecordStore, path: str | Path) -> None:
    tmp = Path(path).with_suffix(Path(path).suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(
            _TSE_HEADER.pack(
                TSE_MAGIC, TSE_VERSION, store.dim, store.delta,
                len(store.records), store.vocab_digest,
            )
        )
        for rec in store.records:
            if len(rec.vectors) > 255:
                raise TeacherFileError("record has more than 255 vectors")
            f.write(_REC_HEAD.pack(rec.key, rec.center, len(rec.vectors)))
            vecs = np.ascontiguousarray(rec.vectors, dtype="<f4")
            for off, wid, vec in zip(rec.offsets, rec.word_ids, vecs):
                f.write(_ENTRY_HEAD.pack(int(off), int(wid)))
                f.write(vec.tobytes())
    tmp.replace(path)


def load_records(
    path: str | Path, expected_digest: bytes | None = None
) -> TeacherRecordStore:
    data = Path(path).read_bytes()
    if len(data) < _TSE_HEADER.size:
        raise TeacherFileError(f"{path}: truncated header")
    magic, version, dim, delta, count, digest = _TSE_HEADER.unpack_from(data, 0)
    if magic != TSE_MAGIC:
        raise TeacherFileError(f"{path}: bad magic {magic!r}")
    if version != TSE_VERSION:
        raise TeacherFileError(f"{path}: unsupported version {version}")
    if expected_digest is not None and digest != expected_digest:
        raise TeacherFileError(f"{path}: vocabulary digest mismatch")
    store = TeacherRecordStore(dim, delta, digest)
    pos = _TSE_HEADER.size
    vec_bytes = 4 * dim
    for i in range(count):
        if pos + _REC_HEAD.size > len(data):
            raise TeacherFileError(f"{path}: truncated at record {i}")
        key, center, m = _REC_HEAD.unpack_from(data, pos)
        pos += _REC_HEAD.size
        need = m * (_ENTRY_HEAD.size + vec_bytes)
        if pos + need > len(data):
            raise TeacherFileError(f"{path}: truncated at record {i}")
        offsets = np.empty(m, dtype=np.int8)
        word_ids = np.empty(m, dtype=np.int64)
        vectors = np.empty((m, dim), dtype=np.float32)
        for j in range(m):
            off, wid = _ENTRY_HEAD.unpack_from(data, pos)
            pos += _ENTRY_HEAD.size
            if abs(off) > delta:
                raise TeacherFileError(f"{path}: record {i} offset {off} out of range")
            offsets[j] = off
            word_ids[j] = wid
            vectors[j] = np.frombuffer(data, dtype="<f4", count=dim, offset=pos)
            pos += vec_bytes
        if not (offsets == 0).any():
            raise TeacherFileError(f"{path}: record {i} lacks a center vector")
        store.records.append(TeacherRecord(key, center, offsets, word_ids, vectors))
    if pos != len(data):
        raise TeacherFileError(f"{path}: {len(data) - pos} trailing bytes")
    return store


@dataclass
class TeacherSenseParams:
    """Teacher-space sense vectors (V,K,Dt) and disambiguation vectors (V,K,Dt)."""

    sense_emb: np.ndarray
    disamb_emb: np.ndarray

    @property
    def num_senses(self) -> int:
        return self.sense_emb.shape[1]

    @property
    def dim(self) -> int:
        return self.sense_emb.shape[2]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"sense": self.sense_emb, "disamb": self.disamb_emb}


def teacher_context_embedding(record: TeacherRecord) -> np.ndarray:
    """Mean of every pooled vector in the record, center included."""
    if len(record.vectors) == 0:
        raise ValueError("empty teacher record")
    return record.vectors.astype(np.float64).mean(axis=0)


def teacher_sense_posterior(
    center: int,
    record: TeacherRecord,
    tparams: TeacherSenseParams,
    temperature: float = 1.0,
) -> np.ndarray:
    """Softmax over <disamb[center, k], context mean> / temperature."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    c = teacher_context_embedding(record)
    logits = tparams.disamb_emb[center] @ c
    if not np.isfinite(logits).all():
        raise ValueError(f"non-finite teacher logits for word {center}")
    return softmax(logits / temperature)


def bert_sense_loss(record: TeacherRecord, tparams: TeacherSenseParams) -> float:
    """Squared reconstruction error of the center's pooled vector."""
    p = teacher_sense_posterior(record.center, record, tparams)
    recon = p @ tparams.sense_emb[record.center]
    r = recon - record.center_vector().astype(np.float64)
    return float(r @ r)


def _teacher_arrays(store: TeacherRecordStore):
    centers = np.array([r.center for r in store.records], dtype=np.int64)
    cmean = np.stack([teacher_context_embedding(r) for r in store.records])
    b = np.stack([r.center_vector().astype(np.float64) for r in store.records])
    return centers, cmean, b


def _teacher_batch_grads(
    centers: np.ndarray,
    cmean: np.ndarray,
    b: np.ndarray,
    tparams: TeacherSenseParams,
) -> tuple[float, GradientSet]:
    u, dt = tparams.sense_emb, tparams.disamb_emb
    touched = np.unique(centers)
    pos = np.searchsorted(touched, centers)
    z = np.einsum("rkd,rd->rk", dt[centers], cmean)
    p = softmax(z, axis=1)
    u_ctr = u[centers]
    resid = np.einsum("rk,rkd->rd", p, u_ctr) - b
    loss = float((resid * resid).sum())

    acc_u = np.zeros((len(touched),) + u.shape[1:])
    acc_dt = np.zeros_like(acc_u)
    np.add.at(acc_u, pos, 2.0 * p[:, :, None] * resid[:, None, :])
    a = 2.0 * np.einsum("rd,rkd->rk", resid, u_ctr)
    dz = p * (a - (p * a).sum(axis=1, keepdims=True))
    np.add.at(acc_dt, pos, dz[:, :, None] * cmean[:, None, :])
    return loss, {"sense": RowGrads(touched, acc_u), "disamb": RowGrads(touched, acc_dt)}


def bert_sense_loss_grad(
    record: TeacherRecord, tparams: TeacherSenseParams
) -> GradientSet:
    """Exact analytic gradient of :func:`bert_sense_loss` for one record."""
    centers = np.array([record.center], dtype=np.int64)
    cmean = teacher_context_embedding(record)[None, :]
    b = record.center_vector().astype(np.float64)[None, :]
    _, grads = _teacher_batch_grads(centers, cmean, b, tparams)
    return grads


@dataclass
class TeacherFitStats:
    epoch: int
    mean_loss: float


def init_teacher_params(
    vocab_size: int, num_senses: int, dim: int, seed: int
) -> TeacherSenseParams:
    rng = np.random.default_rng(seed)
    bound = 1.0 / dim
    u = rng.uniform(-bound, bound, size=(vocab_size, num_senses, dim))
    dt = rng.uniform(-bound, bound, size=(vocab_size, num_senses, dim))
    return TeacherSenseParams(u, dt)


def fit_teacher(
    store: TeacherRecordStore,
    vocab_size: int,
    num_senses: int,
    dim: int | None = None,
    epochs: int = 5,
    lr: float = 0.001,
    seed: int = 1,
    batch_size: int = 256,
) -> tuple[TeacherSenseParams, list[TeacherFitStats]]:
    """Fit teacher sense and disambiguation vectors by Adam on the MSE loss."""
    if len(store) == 0:
        raise ValueError("empty record store")
    if dim is None:
        dim = store.dim
    if dim != store.dim:
        raise TeacherFileError(
            f"record store holds {store.dim}-dim vectors, expected {dim}"
        )
    tparams = init_teacher_params(vocab_size, num_senses, dim, seed)
    centers, cmean, b = _teacher_arrays(store)
    state = AdamState.init(tparams.as_dict())
    pdict = tparams.as_dict()
    stats = []
    for epoch in range(1, epochs + 1):
        total = 0.0
        for start in range(0, len(centers), batch_size):
            sl = slice(start, start + batch_size)
            loss, grads = _teacher_batch_grads(centers[sl], cmean[sl], b[sl], tparams)
            total += loss
            adam_step(pdict, grads, state, lr)
        stats.append(TeacherFitStats(epoch, total / len(centers)))
    return tparams, stats


class PosteriorStore(Mapping[int, np.ndarray]):
    """Window-position-keyed teacher sense posteriors, persistable as TPO1."""

    def __init__(self, num_senses: int, posteriors: dict[int, np.ndarray] | None = None):
        self.num_senses = num_senses
        self._data: dict[int, np.ndarray] = posteriors or {}

    def __getitem__(self, key: int) -> np.ndarray:
        return self._data[key]

    def __iter__(self):
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def put(self, key: int, posterior: np.ndarray) -> None:
        p = np.asarray(posterior, dtype=np.float64)
        if p.shape != (self.num_senses,):
            raise ValueError("posterior has wrong length")
        if abs(p.sum() - 1.0) > 1e-6:
            raise ValueError(f"posterior for key {key} does not sum to 1")
        self._data[key] = p

    def save(self, path: str | Path) -> None:
        tmp = Path(path).with_suffix(Path(path).suffix + ".tmp")
        with open(tmp, "wb") as f:
            f.write(_TPO_HEADER.pack(TPO_MAGIC, self.num_senses, len(self._data)))
            for key in sorted(self._data):
                f.write(struct.pack("<Q", key))
                f.write(self._data[key].astype("<f4").tobytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "PosteriorStore":
        data = Path(path).read_bytes()
        if len(data) < _TPO_HEADER.size:
            raise TeacherFileError(f"{path}: truncated header")
        magic, k, count = _TPO_HEADER.unpack_from(data, 0)
        if magic != TPO_MAGIC:
            raise TeacherFileError(f"{path}: bad magic {magic!r}")
        entry = 8 + 4 * k
        if len(data) != _TPO_HEADER.size + count * entry:
            raise TeacherFileError(f"{path}: size does not match entry count")
        store = cls(k)
        pos = _TPO_HEADER.size
        for _ in range(count):
            (key,) = struct.unpack_from("<Q", data, pos)
            vec = np.frombuffer(data, dtype="<f4", count=k, offset=pos + 8)
            store._data[key] = vec.astype(np.float64)
            pos += entry
        return store


def export_posteriors(
    store: TeacherRecordStore,
    tparams: TeacherSenseParams,
    temperature: float = 1.0,
) -> PosteriorStore:
    """One temperature-softened posterior per record, keyed by window position."""
    out = PosteriorStore(tparams.num_senses)
    for rec in store.records:
        out.put(
            rec.key,
            teacher_sense_posterior(rec.center, rec, tparams, temperature),
        )
    return out
