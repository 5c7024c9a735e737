"""Inference-time sense-mixture overrides, the token cross-entropy evaluator,
and the loss/phase ablation switches for the trainer."""

import math
from dataclasses import dataclass, replace

import numpy as np

from . import corpus as corpus_mod
from . import tensor as T


@dataclass(frozen=True)
class MixtureMode:
    kind: str            # "full" | "topk" | "uniform"
    k: int = None

    def __post_init__(self):
        if self.kind not in ("full", "topk", "uniform"):
            raise ValueError(f"unknown mixture mode {self.kind!r}")
        if self.kind == "topk":
            if self.k is None or self.k < 1:
                raise ValueError("topk mode needs k >= 1")
        elif self.k is not None:
            raise ValueError(f"mode {self.kind!r} takes no k")

    @classmethod
    def parse(cls, text):
        """Accepts "full", "uniform", "top1", "topk:N"."""
        text = text.strip().lower()
        if text in ("full", "uniform"):
            return cls(text)
        if text.startswith("top"):
            rest = text[3:].lstrip("k").lstrip(":")
            try:
                return cls("topk", k=int(rest))
            except ValueError:
                pass
        raise ValueError(f"cannot parse mixture mode {text!r}")

    def label(self):
        return f"top{self.k}" if self.kind == "topk" else self.kind


FULL = MixtureMode("full")


def override_mixture(pi, mode):
    """Replace sense distributions along the last axis.

    full: unchanged.  topk(k): keep the k largest entries (ties broken by
    lower index), renormalized.  uniform: 1/K everywhere.  Input rows must be
    valid distributions; output rows are too.
    """
    pi = np.asarray(pi, dtype=np.float64)
    K = pi.shape[-1]
    if (pi < -1e-12).any() or np.abs(pi.sum(axis=-1) - 1.0).max() > 1e-6:
        raise ValueError("pi rows must be valid distributions")
    if mode.kind == "full":
        return pi.copy()
    if mode.kind == "uniform":
        return np.full_like(pi, 1.0 / K)
    if mode.k > K:
        raise ValueError(f"topk k={mode.k} exceeds K={K}")
    # stable sort => lowest index wins among tied magnitudes
    ranks = np.argsort(-pi, axis=-1, kind="stable")
    keep = np.zeros_like(pi, dtype=bool)
    np.put_along_axis(keep, ranks[..., :mode.k], True, axis=-1)
    kept = np.where(keep, pi, 0.0)
    denom = kept.sum(axis=-1, keepdims=True)
    denom = np.where(denom > 0.0, denom, 1.0)
    out = kept / denom
    # rows whose kept mass was all zero fall back to uniform over the kept set
    zero_rows = (kept.sum(axis=-1) == 0.0)
    if zero_rows.any():
        out[zero_rows] = keep[zero_rows] / mode.k
    return out


def override_alpha(alpha, mode):
    """Lift a K-space override to the (position, sense) mixture.

    alpha factors as (position marginal) x (per-position sense distribution);
    the sense factor is overridden and the product renormalized.  Rows with
    no mass (pad query positions) stay all-zero.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if mode.kind == "full":
        return alpha.copy()
    pos_marginal = alpha.sum(axis=-1, keepdims=True)            # (B, T, J, 1)
    safe = np.where(pos_marginal > 0.0, pos_marginal, 1.0)
    sense_factor = alpha / safe
    K = alpha.shape[-1]
    if mode.kind == "uniform":
        new_factor = np.full_like(sense_factor, 1.0 / K)
    else:
        flat = sense_factor.reshape(-1, K)
        live = flat.sum(axis=-1) > 0.0
        out_flat = np.zeros_like(flat)
        if live.any():
            out_flat[live] = override_mixture(flat[live], mode)
        new_factor = out_flat.reshape(sense_factor.shape)
    out = pos_marginal * new_factor
    totals = out.sum(axis=(-2, -1), keepdims=True)
    safe_tot = np.where(totals > 0.0, totals, 1.0)
    return out / safe_tot


def cross_entropy_eval(model, pairs, vocab, mode=FULL, batch_size=64, max_len=None):
    """Mean token-level cross-entropy (nats) of the target side under the
    next-token convention, with the sense mixture overridden per ``mode``.

    With mode=full this is exactly the trainer's unsmoothed evaluation CE.
    """
    if not pairs:
        raise ValueError("evaluation set is empty")
    max_len = max_len or model.config.max_positions
    total_nll, total_tokens = 0.0, 0
    batches = corpus_mod.build_batches(pairs, vocab, max(2, batch_size), max_len,
                                       seed=0, shuffle=False)
    for batch in batches:
        ids, mask = batch.tgt.ids, batch.tgt.mask
        if ids.shape[1] < 2:
            continue
        logits, _ = model.forward_lm(ids, mask, mixture_mode=mode)
        ls = T.log_softmax(logits[:, :-1, :], axis=-1).data
        gold = np.take_along_axis(ls, ids[:, 1:, None], axis=-1)[..., 0]
        m = mask[:, 1:]
        total_nll += float(-(gold * m).sum())
        total_tokens += int(m.sum())
    if total_tokens == 0:
        raise ValueError("evaluation set has no scorable target tokens")
    return total_nll / total_tokens


ABLATION_VARIANTS = ("full", "no_sense", "no_context", "no_lm",
                     "no_align", "no_joint", "no_polish")


def _zero_component(cfg, index):
    def zero(triple):
        t = list(triple)
        t[index] = 0.0
        return tuple(t)
    return replace(cfg, align_weights=zero(cfg.align_weights),
                   joint_weights=zero(cfg.joint_weights),
                   polish_weights=zero(cfg.polish_weights))


def ablation_switches(variant, sched_cfg, train_cfg):
    """(ScheduleConfig, TrainConfig) realizing one named ablation.

    Loss ablations zero one weight at every step.  no_align starts from the
    joint-phase triple; no_joint jumps from alignment into polish; no_polish
    truncates training at the joint/polish boundary.
    """
    variant = (variant or "full").lower()
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}; "
                         f"expected one of {ABLATION_VARIANTS}")
    if variant == "full":
        return sched_cfg, train_cfg
    if variant == "no_sense":
        return _zero_component(sched_cfg, 0), train_cfg
    if variant == "no_context":
        return _zero_component(sched_cfg, 1), train_cfg
    if variant == "no_lm":
        return _zero_component(sched_cfg, 2), train_cfg
    if variant == "no_align":
        return replace(sched_cfg, align_weights=sched_cfg.joint_weights), train_cfg
    if variant == "no_joint":
        z = sched_cfg.a + 1.0 / sched_cfg.total_steps
        if not z < 1.0:
            raise ValueError("schedule too short to skip the joint phase")
        return replace(sched_cfg, joint_weights=sched_cfg.polish_weights, z=z), train_cfg
    # no_polish: stop at the joint/polish boundary; progress still normalized
    # by the original total, so the polish segment is never entered.
    truncated = int(math.floor(sched_cfg.z * sched_cfg.total_steps))
    return sched_cfg, replace(train_cfg, total_steps=truncated)
