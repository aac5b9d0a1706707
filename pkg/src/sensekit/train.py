"""Losses, analytic gradients, Adam optimizer, and the training loop.

The public per-window operations (`sense_loss`, `combined_loss`, ...) are
straightforward compositions of the model forwards.  Training itself runs
through a vectorized batch kernel that computes the same losses and their
exact gradients for many windows at once; tests pin the kernel against the
per-window forms and against finite differences.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .corpus import ContextWindow, Corpus, NegativeSampler, Vocabulary, position_key
from .model import (
    ITER_MODES,
    ITER_SHARED,
    SenseModelParams,
    context_embedding_global,
    context_embedding_iterative,
    init_params,
    sense_posterior,
    sigmoid,
    softmax,
)

logger = logging.getLogger(__name__)

LOG_EPS = 1e-12

KD_PAPER = "paper"  # student distribution outside the log
KD_TEACHER_OUTSIDE = "teacher-outside"  # conventional cross-entropy H(teacher, student)
KD_DIRECTIONS = (KD_PAPER, KD_TEACHER_OUTSIDE)


class DistillDataError(ValueError):
    """A window lacks the teacher posterior required for distillation."""


@dataclass
class TrainConfig:
    """Training hyperparameters; defaults follow the reference protocol."""

    window: int = 5  # context radius
    negatives: int = 10  # negative samples per (center, context) pair
    senses: int = 3
    dim: int = 300
    lr: float = 0.001
    alpha: float = 1.0  # weight of the transfer loss
    temperature: float = 4.0  # softening temperature for distillation
    epochs: int = 2
    batch_size: int = 2048
    seed: int = 1
    distill: bool = False
    iter_context: str = ITER_SHARED
    kd_direction: str = KD_PAPER
    threads: int = 1

    def validate(self) -> None:
        if min(self.window, self.negatives, self.senses, self.dim, self.epochs,
               self.batch_size, self.threads) < 1:
            raise ValueError("window, negatives, senses, dim, epochs, batch_size, "
                             "threads must all be >= 1")
        if self.lr <= 0 or self.temperature <= 0:
            raise ValueError("lr and temperature must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.iter_context not in ITER_MODES:
            raise ValueError(f"unknown iter_context {self.iter_context!r}")
        if self.kd_direction not in KD_DIRECTIONS:
            raise ValueError(f"unknown kd_direction {self.kd_direction!r}")


@dataclass
class RowGrads:
    """Gradient block for a set of parameter rows; ids are unique and sorted."""

    ids: np.ndarray
    grad: np.ndarray


GradientSet = dict[str, RowGrads]


@dataclass
class AdamState:
    """First/second-moment accumulators shaped like the parameter set."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: GradientSet,
    state: AdamState,
    lr: float,
) -> None:
    """One bias-corrected Adam update applied in place to the touched rows.

    Moments of untouched rows are left alone (they stay zero as long as the
    rows are never touched, which matches the dense update exactly).
    """
    for rg in grads.values():
        if not np.isfinite(rg.grad).all():
            raise ValueError("non-finite gradient")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, rg in grads.items():
        if len(rg.ids) == 0:
            continue
        m = state.m[name]
        v = state.v[name]
        ids = rg.ids
        m[ids] = state.beta1 * m[ids] + (1.0 - state.beta1) * rg.grad
        v[ids] = state.beta2 * v[ids] + (1.0 - state.beta2) * rg.grad**2
        m_hat = m[ids] / c1
        v_hat = v[ids] / c2
        params[name][ids] -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def merge_gradients(parts: Sequence[GradientSet]) -> GradientSet:
    """Coalesce gradient sets from batch shards, summing duplicate rows."""
    out: GradientSet = {}
    names = {name for part in parts for name in part}
    for name in names:
        blocks = [p[name] for p in parts if name in p and len(p[name].ids)]
        if not blocks:
            continue
        ids = np.concatenate([b.ids for b in blocks])
        grad = np.concatenate([b.grad for b in blocks])
        uniq, inv = np.unique(ids, return_inverse=True)
        acc = np.zeros((len(uniq),) + grad.shape[1:], dtype=grad.dtype)
        np.add.at(acc, inv, grad)
        out[name] = RowGrads(uniq, acc)
    return out


# ---------------------------------------------------------------------------
# Per-window losses
# ---------------------------------------------------------------------------


def sense_loss(
    window: ContextWindow,
    negatives: Sequence[Sequence[int]],
    params: SenseModelParams,
) -> float:
    """Negative-sampling loss of one window.

    Sums, over context words, the negative log mixture probability of the
    observed word plus the negative log complement for each of its negative
    samples; negatives are scored through the same sense mixture.
    """
    if len(negatives) != len(window.context):
        raise ValueError("need one negative list per context word")
    c = context_embedding_global(window, params)
    alpha = sense_posterior(window.center, c, params)
    vc = params.sense_emb[window.center]  # (K, D)
    loss = 0.0
    for j, ctx_id in enumerate(window.context):
        p = float(alpha @ sigmoid(vc @ params.global_emb[ctx_id]))
        loss -= np.log(max(p, LOG_EPS))
        for neg in negatives[j]:
            pn = float(alpha @ sigmoid(vc @ params.global_emb[neg]))
            loss -= np.log(max(1.0 - pn, LOG_EPS))
    return float(loss)


def distill_loss(
    student_logits: np.ndarray,
    teacher_posterior: np.ndarray,
    temperature: float,
    direction: str = KD_PAPER,
) -> float:
    """Transfer loss between softened student and teacher distributions.

    The default form keeps the student distribution outside the log,
    -T^2 * sum_k p_student(k) log p_teacher(k); ``teacher-outside`` swaps
    the roles into the conventional cross-entropy.  The teacher posterior
    is expected to be softened already (see the teacher export).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if direction not in KD_DIRECTIONS:
        raise ValueError(f"unknown kd direction {direction!r}")
    q = np.asarray(teacher_posterior, dtype=np.float64)
    if abs(q.sum() - 1.0) > 1e-6 or (q < 0).any():
        raise ValueError("teacher posterior is not a probability distribution")
    p = softmax(np.asarray(student_logits, dtype=np.float64) / temperature)
    t2 = temperature * temperature
    if direction == KD_PAPER:
        return float(-t2 * (p @ np.log(np.maximum(q, LOG_EPS))))
    return float(-t2 * (q @ np.log(np.maximum(p, LOG_EPS))))


def distill_loss_grad(
    student_logits: np.ndarray,
    teacher_posterior: np.ndarray,
    temperature: float,
    direction: str = KD_PAPER,
) -> np.ndarray:
    """Exact gradient of :func:`distill_loss` w.r.t. the student logits."""
    q = np.asarray(teacher_posterior, dtype=np.float64)
    p = softmax(np.asarray(student_logits, dtype=np.float64) / temperature)
    if direction == KD_PAPER:
        lq = np.log(np.maximum(q, LOG_EPS))
        return -temperature * p * (lq - p @ lq)
    return temperature * (p - q)


def student_distill_logits(
    window: ContextWindow,
    params: SenseModelParams,
    iter_context: str = ITER_SHARED,
    delta: int | None = None,
) -> np.ndarray:
    """Sense logits of the center word over the iterative context embedding."""
    c_it = context_embedding_iterative(window, params, iter_context, delta)
    return params.disamb_emb[window.center] @ c_it


def combined_loss(
    window: ContextWindow,
    negatives: Sequence[Sequence[int]],
    params: SenseModelParams,
    teacher_posterior: np.ndarray | None,
    config: TrainConfig,
) -> float:
    """sense loss + alpha * transfer loss for one window."""
    loss = sense_loss(window, negatives, params)
    if not config.distill or config.alpha == 0.0:
        return loss
    if teacher_posterior is None:
        doc, para, tok = window.position
        raise DistillDataError(
            f"no teacher posterior for window at doc={doc} paragraph={para} token={tok}"
        )
    logits = student_distill_logits(window, params, config.iter_context, config.window)
    return loss + config.alpha * distill_loss(
        logits, teacher_posterior, config.temperature, config.kd_direction
    )


# ---------------------------------------------------------------------------
# Vectorized batch kernel
# ---------------------------------------------------------------------------


@dataclass
class WindowBatch:
    centers: np.ndarray  # (B,)
    context: np.ndarray  # (B, M) padded
    offsets: np.ndarray  # (B, M) padded
    mask: np.ndarray  # (B, M) 1.0 where real
    sizes: np.ndarray  # (B,) context counts
    keys: np.ndarray  # (B,) position keys


def make_batch(windows: Sequence[ContextWindow]) -> WindowBatch:
    b = len(windows)
    m = max(len(w.context) for w in windows)
    centers = np.empty(b, dtype=np.int64)
    context = np.zeros((b, m), dtype=np.int64)
    offsets = np.zeros((b, m), dtype=np.int64)
    mask = np.zeros((b, m), dtype=np.float64)
    keys = np.empty(b, dtype=np.uint64)
    for i, w in enumerate(windows):
        k = len(w.context)
        centers[i] = w.center
        context[i, :k] = w.context
        offsets[i, :k] = w.offsets
        mask[i, :k] = 1.0
        keys[i] = position_key(w)
    return WindowBatch(centers, context, offsets, mask, mask.sum(axis=1), keys)


def _positions(touched: np.ndarray, ids: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Map ids into row positions of `touched`; invalid slots map to row 0."""
    safe = np.where(valid, ids, touched[0])
    return np.searchsorted(touched, safe)


def batch_loss_and_grads(
    batch: WindowBatch,
    negatives: np.ndarray,
    params: SenseModelParams,
    config: TrainConfig,
    teacher: np.ndarray | None = None,
) -> tuple[float, float, GradientSet]:
    """Losses and exact gradients for a padded batch of windows.

    Returns (sense-loss sum, transfer-loss sum, gradients).  ``negatives``
    has shape (B, M, n) aligned with the padded context.  ``teacher`` is a
    (B, K) array of softened teacher posteriors; pass None when not
    distilling.  First-pass posteriors of the iterative context embedding
    are treated as constants, so no gradient flows through them.
    """
    g, v, d = params.global_emb, params.sense_emb, params.disamb_emb
    centers, ctx, mask = batch.centers, batch.context, batch.mask
    sizes = batch.sizes
    valid = mask > 0
    nvalid = np.broadcast_to(valid[:, :, None], negatives.shape)

    distill = teacher is not None and config.alpha > 0.0

    touched_g = np.unique(np.concatenate([ctx[valid], negatives[nvalid]]))
    touched_c = np.unique(centers)
    if distill:
        touched_v = np.unique(np.concatenate([centers, ctx[valid]]))
    else:
        touched_v = touched_c

    K, D = v.shape[1], v.shape[2]
    acc_g = np.zeros((len(touched_g), D))
    acc_v = np.zeros((len(touched_v), K, D))
    acc_d = np.zeros((len(touched_c), K, D))

    pos_ctx = _positions(touched_g, ctx, valid)
    pos_neg = _positions(touched_g, negatives, nvalid)
    pos_c_v = np.searchsorted(touched_v, centers)
    pos_c_d = np.searchsorted(touched_c, centers)

    ctx_safe = np.where(valid, ctx, centers[:, None])
    neg_safe = np.where(nvalid, negatives, centers[:, None, None])

    # --- sense loss forward ---
    g_ctx = g[ctx_safe]  # (B, M, D)
    c = (g_ctx * mask[:, :, None]).sum(axis=1) / sizes[:, None]
    d_ctr = d[centers]  # (B, K, D)
    z = np.einsum("bkd,bd->bk", d_ctr, c)
    alpha = softmax(z, axis=1)
    v_ctr = v[centers]  # (B, K, D)
    s_pos = sigmoid(np.einsum("bmd,bkd->bmk", g_ctx, v_ctr))
    p_pos = np.einsum("bmk,bk->bm", s_pos, alpha)
    g_neg = g[neg_safe]  # (B, M, n, D)
    s_neg = sigmoid(np.einsum("bmnd,bkd->bmnk", g_neg, v_ctr))
    p_neg = np.einsum("bmnk,bk->bmn", s_neg, alpha)

    loss_sense = float(
        -(np.log(np.maximum(p_pos, LOG_EPS)) * mask).sum()
        - (np.log(np.maximum(1.0 - p_neg, LOG_EPS)) * mask[:, :, None]).sum()
    )

    # --- sense loss backward ---
    w_pos = np.where(p_pos > LOG_EPS, -1.0 / p_pos, 0.0) * mask
    w_neg = np.where(1.0 - p_neg > LOG_EPS, 1.0 / (1.0 - p_neg), 0.0) * mask[:, :, None]
    a_pos = w_pos[:, :, None] * s_pos * (1.0 - s_pos) * alpha[:, None, :]
    a_neg = w_neg[:, :, :, None] * s_neg * (1.0 - s_neg) * alpha[:, None, None, :]

    grad_v_ctr = np.einsum("bmk,bmd->bkd", a_pos, g_ctx) + np.einsum(
        "bmnk,bmnd->bkd", a_neg, g_neg
    )
    np.add.at(acc_v, pos_c_v, grad_v_ctr)

    grad_g_ctx = np.einsum("bmk,bkd->bmd", a_pos, v_ctr)
    grad_g_neg = np.einsum("bmnk,bkd->bmnd", a_neg, v_ctr)

    dl_dalpha = np.einsum("bm,bmk->bk", w_pos, s_pos) + np.einsum(
        "bmn,bmnk->bk", w_neg, s_neg
    )
    beta = alpha * (dl_dalpha - (alpha * dl_dalpha).sum(axis=1, keepdims=True))
    np.add.at(acc_d, pos_c_d, beta[:, :, None] * c[:, None, :])

    dl_dc = np.einsum("bk,bkd->bd", beta, d_ctr)
    grad_g_ctx += (mask / sizes[:, None])[:, :, None] * dl_dc[:, None, :]

    np.add.at(acc_g, pos_ctx, grad_g_ctx)
    np.add.at(acc_g, pos_neg.reshape(-1), grad_g_neg.reshape(-1, D))

    # --- transfer loss ---
    loss_transfer = 0.0
    if distill:
        q = np.asarray(teacher, dtype=np.float64)
        if (np.abs(q.sum(axis=1) - 1.0) > 1e-6).any() or (q < 0).any():
            raise ValueError("teacher posteriors are not probability distributions")
        t = config.temperature

        # first-pass posteriors (constants for differentiation)
        all_ids = np.concatenate([centers[:, None], ctx_safe], axis=1)  # (B, M+1)
        wm = np.concatenate([np.ones((len(centers), 1)), mask], axis=1)
        g_all = g[all_ids]
        if config.iter_context == ITER_SHARED:
            total = (g_all * wm[:, :, None]).sum(axis=1)
            cnt = wm.sum(axis=1)
            c1 = (total[:, None, :] - g_all[:, 1:, :]) / (cnt[:, None, None] - 1.0)
        else:
            offs = np.concatenate(
                [np.zeros((len(centers), 1), dtype=np.int64), batch.offsets], axis=1
            )
            near = np.abs(offs[:, :, None] - offs[:, None, :]) <= config.window
            allow = near & (wm[:, :, None] > 0) & (wm[:, None, :] > 0)
            allow &= ~np.eye(all_ids.shape[1], dtype=bool)[None, :, :]
            allow_t = allow[:, :, 1:].astype(np.float64)  # source i -> target j
            denom = allow_t.sum(axis=1)
            c1 = np.einsum("bij,bid->bjd", allow_t, g_all) / np.maximum(denom, 1.0)[:, :, None]
        d_ctx = d[ctx_safe]
        pi = softmax(np.einsum("bmkd,bmd->bmk", d_ctx, c1), axis=2)

        v_ctx = v[ctx_safe]
        c_it = np.einsum("bmk,bmkd->bd", pi * mask[:, :, None], v_ctx) / sizes[:, None]
        z_s = np.einsum("bkd,bd->bk", d_ctr, c_it)
        p = softmax(z_s / t, axis=1)

        if config.kd_direction == KD_PAPER:
            lq = np.log(np.maximum(q, LOG_EPS))
            loss_transfer = float(-t * t * (p * lq).sum())
            dz = -t * p * (lq - (p * lq).sum(axis=1, keepdims=True))
        else:
            loss_transfer = float(-t * t * (q * np.log(np.maximum(p, LOG_EPS))).sum())
            dz = t * (p - q)

        a = config.alpha
        np.add.at(acc_d, pos_c_d, a * dz[:, :, None] * c_it[:, None, :])
        dl_dcit = a * np.einsum("bk,bkd->bd", dz, d_ctr)
        pos_ctx_v = _positions(touched_v, ctx, valid)
        contrib = (pi * (mask / sizes[:, None])[:, :, None])[:, :, :, None] * dl_dcit[
            :, None, None, :
        ]
        np.add.at(acc_v, pos_ctx_v, contrib)

    grads: GradientSet = {
        "global": RowGrads(touched_g, acc_g),
        "sense": RowGrads(touched_v, acc_v),
        "disamb": RowGrads(touched_c, acc_d),
    }
    return loss_sense, loss_transfer, grads


def sense_loss_grad(
    window: ContextWindow,
    negatives: Sequence[Sequence[int]],
    params: SenseModelParams,
) -> GradientSet:
    """Exact analytic gradient of :func:`sense_loss` for one window."""
    batch = make_batch([window])
    neg = np.asarray(negatives, dtype=np.int64)[None, :, :]
    _, _, grads = batch_loss_and_grads(batch, neg, params, TrainConfig())
    return grads


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    mean_transfer_loss: float
    windows: int


def format_epoch_line(stats: EpochStats) -> str:
    return (
        f"{stats.epoch}\t{stats.mean_loss:.6f}\t"
        f"{stats.mean_transfer_loss:.6f}\t{stats.windows}"
    )


def _gather_teacher(
    batch: WindowBatch, store: Mapping[int, np.ndarray], num_senses: int
) -> np.ndarray:
    out = np.empty((len(batch.centers), num_senses), dtype=np.float64)
    for i, key in enumerate(batch.keys):
        q = store.get(int(key))
        if q is None:
            doc = int(key) >> 40
            para = (int(key) >> 20) & 0xFFFFF
            tok = int(key) & 0xFFFFF
            raise DistillDataError(
                f"no teacher posterior for window at doc={doc} "
                f"paragraph={para} token={tok}"
            )
        out[i] = q
    return out


def train(
    corpus: Corpus,
    vocab: Vocabulary,
    config: TrainConfig,
    posterior_store: Mapping[int, np.ndarray] | None = None,
) -> tuple[SenseModelParams, list[EpochStats]]:
    """Mini-batch training over all context windows of *corpus*.

    Windows are visited in corpus order; negatives are redrawn every epoch.
    With ``threads == 1`` the run is fully deterministic for the given seed.
    Per-epoch means of the sense and transfer losses are returned alongside
    the final parameters.
    """
    config.validate()
    if config.distill and config.alpha > 0.0 and posterior_store is None:
        raise DistillDataError("distillation requested but no posterior store given")
    distill = config.distill and config.alpha > 0.0 and posterior_store is not None

    windows = list(corpus.iter_windows(vocab, config.window))
    if not windows:
        raise ValueError("corpus yields no context windows")

    params = init_params(len(vocab), config.senses, config.dim, config.seed)
    sampler = NegativeSampler(vocab.counts, seed=config.seed + 1)
    state = AdamState.init(params.as_dict())
    pdict = params.as_dict()

    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    stats: list[EpochStats] = []
    try:
        for epoch in range(1, config.epochs + 1):
            sum_sense = 0.0
            sum_transfer = 0.0
            for start in range(0, len(windows), config.batch_size):
                chunk = windows[start : start + config.batch_size]
                batch = make_batch(chunk)
                negs = sampler.draw_batch(
                    batch.context.shape + (config.negatives,),
                    exclude=batch.context[:, :, None],
                )
                teacher = (
                    _gather_teacher(batch, posterior_store, config.senses)
                    if distill
                    else None
                )
                if pool is None:
                    ls, lt, grads = batch_loss_and_grads(
                        batch, negs, params, config, teacher
                    )
                else:
                    ls, lt, grads = _sharded_batch(
                        pool, config.threads, batch, negs, params, config, teacher
                    )
                sum_sense += ls
                sum_transfer += lt
                adam_step(pdict, grads, state, config.lr)
            n = len(windows)
            stats.append(
                EpochStats(epoch, sum_sense / n, sum_transfer / n, n)
            )
            logger.info("%s", format_epoch_line(stats[-1]))
    finally:
        if pool is not None:
            pool.shutdown()
    return params, stats


def _sharded_batch(pool, shards, batch, negs, params, config, teacher):
    """Split a batch row-wise, compute gradients concurrently, merge."""
    b = len(batch.centers)
    bounds = np.linspace(0, b, shards + 1, dtype=int)
    jobs = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        if lo == hi:
            continue
        sub = WindowBatch(
            batch.centers[lo:hi],
            batch.context[lo:hi],
            batch.offsets[lo:hi],
            batch.mask[lo:hi],
            batch.sizes[lo:hi],
            batch.keys[lo:hi],
        )
        subteacher = teacher[lo:hi] if teacher is not None else None
        jobs.append(
            pool.submit(
                batch_loss_and_grads, sub, negs[lo:hi], params, config, subteacher
            )
        )
    results = [j.result() for j in jobs]
    loss_s = sum(r[0] for r in results)
    loss_t = sum(r[1] for r in results)
    return loss_s, loss_t, merge_gradients([r[2] for r in results])
