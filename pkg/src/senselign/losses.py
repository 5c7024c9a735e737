"""Training objectives: symmetric InfoNCE over sentence embeddings (sense
mixtures and contextual states) and a label-smoothed LM loss, plus their
weighted combination."""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DegenerateVectorError
from .model import norm_pool_weights

NOT_COMPUTED = math.nan  # reported value for a term whose weight is exactly 0


@dataclass
class LossBreakdown:
    l_sns: float
    l_ctx: float
    l_lm: float
    l_total: float
    weights_used: tuple
    temps_used: tuple
    total: T.Tensor  # graph node for backward


def info_nce_symmetric(u_src, u_tgt, tau):
    """-(1/2B) sum_i [log p_ii + log p'_ii] where p is the row-softmax of the
    similarity matrix at temperature tau and p' its transpose-direction twin.

    Rows of both inputs must be unit vectors; B >= 2.
    """
    u_src, u_tgt = T.as_tensor(u_src), T.as_tensor(u_tgt)
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if u_src.ndim != 2 or u_tgt.ndim != 2 or u_src.shape != u_tgt.shape:
        raise ValueError("expected matching (B, d) embedding matrices")
    B = u_src.shape[0]
    if B < 2:
        raise ValueError("InfoNCE needs a batch of at least 2 for in-batch negatives")
    for name, u in (("src", u_src), ("tgt", u_tgt)):
        norms = np.linalg.norm(u.data, axis=1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ValueError(f"{name} rows must be unit-norm within 1e-6")

    sim = T.matmul(u_src, T.swapaxes(u_tgt, 0, 1)) / tau
    diag_idx = np.arange(B)
    log_p = T.gather_index(T.log_softmax(sim, axis=-1), diag_idx)
    log_p_rev = T.gather_index(T.log_softmax(T.swapaxes(sim, 0, 1), axis=-1), diag_idx)
    return -(log_p.sum() + log_p_rev.sum()) / (2.0 * B)


def _pooled_sense_embedding(model, batch, tau_pool):
    """Unit sentence vector from norm-pooled sense mixtures, mean-pooled over
    non-pad tokens."""
    s = model.sense_vectors(batch.ids, batch.mask)          # (B, T, K, d)
    pi = norm_pool_weights(s, tau_pool)                     # (B, T, K)
    B, TT, K, d = s.shape
    mixed = T.reshape(T.matmul(T.reshape(pi, (B * TT, 1, K)),
                               T.reshape(s, (B * TT, K, d))), (B, TT, d))
    pooled = T.masked_mean_pool(mixed, batch.mask)
    return _normalize_sentences(pooled)


def _contextual_sense_embedding(model, batch):
    """Alternative pooling: the contextual mixture h_t instead of the
    norm-pooled one (kept behind the ``pooling`` switch)."""
    decomp = model.contextual_mixture(batch.ids, batch.mask)
    pooled = T.masked_mean_pool(decomp.h, batch.mask)
    return _normalize_sentences(pooled)


def _normalize_sentences(pooled):
    try:
        return T.l2_normalize(pooled, axis=-1)
    except DegenerateVectorError as e:
        raise DegenerateVectorError(
            f"degenerate pooled embedding for sentence {e.index}", index=e.index) from None


def sense_loss(model, src_batch, tgt_batch, tau_sns, tau_pool, pooling="norm"):
    """Symmetric InfoNCE between per-sentence sense-mixture embeddings."""
    if src_batch.ids.shape[0] != tgt_batch.ids.shape[0]:
        raise ValueError("source and target batches must pair row-wise")
    if pooling == "norm":
        z_src = _pooled_sense_embedding(model, src_batch, tau_pool)
        z_tgt = _pooled_sense_embedding(model, tgt_batch, tau_pool)
    elif pooling == "context":
        z_src = _contextual_sense_embedding(model, src_batch)
        z_tgt = _contextual_sense_embedding(model, tgt_batch)
    else:
        raise ValueError(f"unknown sense pooling {pooling!r}")
    return info_nce_symmetric(z_src, z_tgt, tau_sns)


def context_embedding(model, batch):
    """Unit vector per sentence: contextual state of the last non-pad token."""
    c = model.context_states(batch.ids, batch.mask)
    z = T.take_positions(c, batch.last_index)
    return _normalize_sentences(z)


def context_loss(model, src_batch, tgt_batch, tau_ctx):
    """Symmetric InfoNCE between last-token contextual states."""
    if src_batch.ids.shape[0] != tgt_batch.ids.shape[0]:
        raise ValueError("source and target batches must pair row-wise")
    return info_nce_symmetric(context_embedding(model, src_batch),
                              context_embedding(model, tgt_batch), tau_ctx)


def lm_loss(logits, target_ids, pad_mask, epsilon):
    """Label-smoothed cross-entropy averaged over non-pad positions.

    The smoothed target puts 1 - eps + eps/V on the gold id and eps/V
    elsewhere.  Callers align logits with targets (next-token shift included).
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"label smoothing must be in [0, 1), got {epsilon}")
    logits = T.as_tensor(logits)
    target_ids = np.asarray(target_ids, dtype=np.int64)
    mask = np.asarray(pad_mask, dtype=np.float64)
    if logits.shape[:-1] != target_ids.shape:
        raise ValueError("logits rows must match target positions")
    n_tokens = mask.sum()
    if n_tokens == 0:
        from .errors import EmptySequenceError
        raise EmptySequenceError("no non-pad target positions")
    V = logits.shape[-1]
    ls = T.log_softmax(logits, axis=-1)
    gold = T.gather_index(ls, target_ids)
    per_pos = -((1.0 - epsilon) * gold + (epsilon / V) * ls.sum(axis=-1))
    return (per_pos * mask).sum() / n_tokens


def next_token_lm_loss(model, batch, epsilon, mixture_mode=None):
    """LM loss on one side of a batch under the next-token convention."""
    logits, _ = model.forward_lm(batch.ids, batch.mask, mixture_mode=mixture_mode)
    B, TT, V = logits.shape
    if TT < 2:
        raise ValueError("need at least two positions for next-token prediction")
    return lm_loss(logits[:, :-1, :], batch.ids[:, 1:], batch.mask[:, 1:], epsilon)


def total_loss(model, src_batch, tgt_batch, weights, label_smoothing,
               tau_pool, sense_pooling="norm"):
    """Weighted combination of the three objectives.

    ``weights`` is a PhaseWeights-like object carrying w_sns/w_ctx/w_lm and
    the two InfoNCE temperatures.  A term with weight exactly 0 is skipped
    (reported as NaN) without affecting the total.
    """
    w_sns, w_ctx, w_lm = weights.w_sns, weights.w_ctx, weights.w_lm
    for name, w in (("w_sns", w_sns), ("w_ctx", w_ctx), ("w_lm", w_lm)):
        if w < 0:
            raise ValueError(f"{name} must be non-negative, got {w}")

    total = None
    vals = {}
    for name, w, fn in (
        ("l_sns", w_sns, lambda: sense_loss(model, src_batch, tgt_batch,
                                            weights.tau_sns, tau_pool, pooling=sense_pooling)),
        ("l_ctx", w_ctx, lambda: context_loss(model, src_batch, tgt_batch, weights.tau_ctx)),
        ("l_lm", w_lm, lambda: next_token_lm_loss(model, tgt_batch, label_smoothing)),
    ):
        if w == 0.0:
            vals[name] = NOT_COMPUTED
            continue
        term = fn()
        vals[name] = term.item()
        total = term * w if total is None else total + term * w

    if total is None:
        total = T.Tensor(0.0)
    return LossBreakdown(l_sns=vals["l_sns"], l_ctx=vals["l_ctx"], l_lm=vals["l_lm"],
                         l_total=total.item(),
                         weights_used=(w_sns, w_ctx, w_lm),
                         temps_used=(weights.tau_sns, weights.tau_ctx),
                         total=total)
