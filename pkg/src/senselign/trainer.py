"""The optimization loop: Adam with linear warmup and global-norm clipping,
phase-driven loss weights and freezing, periodic evaluation, checkpointing,
and CSV metrics logging."""

import csv
import io
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import corpus as corpus_mod
from . import losses as losses_mod
from . import schedule as schedule_mod
from .ablation import FULL, cross_entropy_eval
from .fileio import atomic_write_text
from .model import norm_pool_weights, save_checkpoint

METRICS_FORMAT_VERSION = 1

METRICS_COLUMNS = ("step", "phase", "w_sns", "w_ctx", "w_lm", "l_sns", "l_ctx",
                   "l_lm", "l_total", "recall_s2t", "recall_t2s", "entropy_tgt",
                   "ppl_tgt", "lr")

# Paper-scale reference values (App-style production run); the desk defaults
# below are what the test suite exercises.
PAPER_TRAIN = dict(learning_rate=5e-5, batch_size=64, warmup_ratio=0.1,
                   clip_norm=1.0, label_smoothing=0.05, total_steps=150_000,
                   eval_every=2_000, seed=1234)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-3
    batch_size: int = 32
    warmup_ratio: float = 0.1
    clip_norm: float = 1.0
    label_smoothing: float = 0.05
    total_steps: int = 2000
    eval_every: int = 200
    seed: int = 1234

    def __post_init__(self):
        if self.learning_rate <= 0 or self.clip_norm <= 0:
            raise ValueError("learning_rate and clip_norm must be positive")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ValueError("warmup_ratio must be a fraction")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")


@dataclass
class EvalMetrics:
    recall_s2t: float
    recall_t2s: float
    entropy_tgt: float
    ppl_tgt: float


@dataclass
class TrainResult:
    model: object
    metrics_rows: list
    checkpoint_paths: dict = field(default_factory=dict)
    metrics_csv: str = None


def clip_gradients(grads, clip_norm):
    """Scale all gradients by clip_norm/g when the global L2 norm g exceeds
    clip_norm; returns (grads, global_norm_before)."""
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    sq = 0.0
    for g in grads.values():
        sq += float((g * g).sum())
    norm = math.sqrt(sq)
    if norm > clip_norm:
        scale = clip_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def lr_at(step, cfg):
    """Linear warmup from 0 over warmup_ratio * total_steps, then constant."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warm = cfg.warmup_ratio * cfg.total_steps
    if warm > 0 and step < warm:
        return cfg.learning_rate * step / warm
    return cfg.learning_rate


class Adam:
    """Adam with bias correction; frozen parameters are skipped entirely so
    they stay bit-identical."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v = {}, {}
        self.t = 0

    def step(self, params, grads, lr, trainable):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, tensor in params.items():
            if not trainable.get(name, True):
                continue
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(tensor.data)
                self.m[name] = m
                self.v[name] = np.zeros_like(tensor.data)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            tensor.data = tensor.data - lr * mhat / (np.sqrt(vhat) + self.eps)


def _batched_context_embeddings(model, pairs, vocab, side, batch_size, max_len):
    from .losses import context_embedding
    out = []
    batches = corpus_mod.build_batches(pairs, vocab, max(2, batch_size), max_len,
                                       seed=0, shuffle=False)
    for b in batches:
        z = context_embedding(model, b.src if side == "src" else b.tgt)
        out.append(z.data)
    return np.concatenate(out, axis=0)


def recall_at_1(z_src, z_tgt):
    """Bidirectional cosine nearest-neighbor retrieval accuracy."""
    sims = z_src @ z_tgt.T
    s2t = float((sims.argmax(axis=1) == np.arange(len(sims))).mean())
    t2s = float((sims.argmax(axis=0) == np.arange(len(sims))).mean())
    return s2t, t2s


def sense_entropy(model, pairs, vocab, tau_pool, batch_size=64, max_len=None,
                  side="tgt", source="norm_pool"):
    """Mean Shannon entropy of per-token sense weights over non-pad tokens.

    ``source`` picks the distribution: the norm-pooled weights (default) or
    the contextual mixture's per-token sense marginal.
    """
    max_len = max_len or model.config.max_positions
    total, count = 0.0, 0
    batches = corpus_mod.build_batches(pairs, vocab, max(2, batch_size), max_len,
                                       seed=0, shuffle=False)
    for b in batches:
        batch = b.tgt if side == "tgt" else b.src
        if source == "norm_pool":
            s = model.sense_vectors(batch.ids, batch.mask)
            pi = norm_pool_weights(s, tau_pool).data
        elif source == "alpha_marginal":
            decomp = model.contextual_mixture(batch.ids, batch.mask)
            pi = decomp.alpha.data.sum(axis=2)
            live = pi.sum(axis=-1, keepdims=True)
            pi = pi / np.where(live > 0, live, 1.0)
        else:
            raise ValueError(f"unknown entropy source {source!r}")
        p = np.clip(pi, 1e-300, None)
        ent = -(pi * np.log(p)).sum(axis=-1)
        total += float((ent * batch.mask).sum())
        count += int(batch.mask.sum())
    return total / max(count, 1)


def evaluate(model, dev_pairs, vocab, tau_pool, batch_size=64,
             retrieval_embedding="context", entropy_source="norm_pool"):
    """Retrieval recall@1 both directions, target-side sense entropy, and
    target-side perplexity (exp of unsmoothed token cross-entropy)."""
    if not dev_pairs:
        raise ValueError("dev set is empty")
    max_len = model.config.max_positions
    if retrieval_embedding == "context":
        z_src = _batched_context_embeddings(model, dev_pairs, vocab, "src", batch_size, max_len)
        z_tgt = _batched_context_embeddings(model, dev_pairs, vocab, "tgt", batch_size, max_len)
    elif retrieval_embedding == "sense":
        from .losses import _pooled_sense_embedding
        z_src, z_tgt = [], []
        for b in corpus_mod.build_batches(dev_pairs, vocab, max(2, batch_size),
                                          max_len, seed=0, shuffle=False):
            z_src.append(_pooled_sense_embedding(model, b.src, tau_pool).data)
            z_tgt.append(_pooled_sense_embedding(model, b.tgt, tau_pool).data)
        z_src, z_tgt = np.concatenate(z_src), np.concatenate(z_tgt)
    else:
        raise ValueError(f"unknown retrieval embedding {retrieval_embedding!r}")
    s2t, t2s = recall_at_1(z_src, z_tgt)
    ent = sense_entropy(model, dev_pairs, vocab, tau_pool, batch_size, max_len,
                        source=entropy_source)
    ce = cross_entropy_eval(model, dev_pairs, vocab, mode=FULL, batch_size=batch_size,
                            max_len=max_len)
    return EvalMetrics(recall_s2t=s2t, recall_t2s=t2s, entropy_tgt=ent,
                       ppl_tgt=math.exp(ce))


def format_metrics_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in METRICS_COLUMNS])
    return buf.getvalue()


def _fmt(x):
    if isinstance(x, float):
        if math.isnan(x):
            return ""
        return repr(x)
    return x


def load_metrics_csv(path):
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        for rec in csv.DictReader(f):
            row = {}
            for k, v in rec.items():
                if k in ("step",):
                    row[k] = int(v)
                elif k == "phase":
                    row[k] = v
                else:
                    row[k] = math.nan if v == "" else float(v)
            rows.append(row)
    return rows


def train(model, train_pairs, dev_pairs, vocab, train_cfg, sched_cfg,
          out_dir=None, sense_pooling="norm", retrieval_embedding="context",
          entropy_source="norm_pool"):
    """Run the three-phase adaptation loop.

    Deterministic given the configs and seed.  Metrics rows are produced at
    every eval_every-th step and at the final step; checkpoints are written
    alongside when ``out_dir`` is given.  Raises on a non-finite loss term,
    naming the term and step.
    """
    if not train_pairs:
        raise ValueError("training corpus is empty")
    if train_cfg.total_steps < 0:
        raise ValueError("total_steps must be >= 0")

    seed = train_cfg.seed
    max_len = model.config.max_positions
    optimizer = Adam()
    rows = []
    checkpoint_paths = {}
    untied = not model.config.tie_output

    def log_row(step, weights, breakdown, lr):
        ev = evaluate(model, dev_pairs, vocab, sched_cfg.tau_pool,
                      batch_size=train_cfg.batch_size,
                      retrieval_embedding=retrieval_embedding,
                      entropy_source=entropy_source) if dev_pairs else None
        row = {
            "step": step, "phase": weights.phase,
            "w_sns": weights.w_sns, "w_ctx": weights.w_ctx, "w_lm": weights.w_lm,
            "l_sns": breakdown.l_sns if breakdown else math.nan,
            "l_ctx": breakdown.l_ctx if breakdown else math.nan,
            "l_lm": breakdown.l_lm if breakdown else math.nan,
            "l_total": breakdown.l_total if breakdown else math.nan,
            "recall_s2t": ev.recall_s2t if ev else math.nan,
            "recall_t2s": ev.recall_t2s if ev else math.nan,
            "entropy_tgt": ev.entropy_tgt if ev else math.nan,
            "ppl_tgt": ev.ppl_tgt if ev else math.nan,
            "lr": lr,
        }
        rows.append(row)
        if out_dir:
            path = os.path.join(out_dir, f"checkpoint-{step:06d}.bin")
            save_checkpoint(model, path, seed)
            checkpoint_paths[step] = path

    batches, epoch, cursor = [], 0, 0
    breakdown = None
    for step in range(1, train_cfg.total_steps + 1):
        if cursor >= len(batches):
            batches = corpus_mod.build_batches(train_pairs, vocab, train_cfg.batch_size,
                                               max_len, seed, epoch=epoch)
            epoch += 1
            cursor = 0
        batch = batches[cursor]
        cursor += 1

        weights = schedule_mod.weights_at(step - 1, sched_cfg)
        if weights.freeze_sense_machinery and model.config.tie_output and not untied:
            model.untie_output()
            untied = True
        trainable = schedule_mod.freeze_mask(weights.phase, model.params)

        model.params.zero_grads()
        breakdown = losses_mod.total_loss(model, batch.src, batch.tgt, weights,
                                          train_cfg.label_smoothing, sched_cfg.tau_pool,
                                          sense_pooling=sense_pooling)
        for term in ("l_sns", "l_ctx", "l_lm", "l_total"):
            val = getattr(breakdown, term)
            if not math.isnan(val) and not math.isfinite(val):
                raise RuntimeError(f"non-finite {term} at step {step}")

        lr = lr_at(step - 1, train_cfg)
        if breakdown.total.requires_grad:
            breakdown.total.backward()
            grads = {name: t.grad for name, t in model.params.items() if t.grad is not None}
            grads, _ = clip_gradients(grads, train_cfg.clip_norm)
            optimizer.step(model.params, grads, lr, trainable)

        if step % train_cfg.eval_every == 0 or step == train_cfg.total_steps:
            log_row(step, weights, breakdown, lr)

    if train_cfg.total_steps == 0 and dev_pairs:
        log_row(0, schedule_mod.weights_at(0, sched_cfg), None, lr_at(0, train_cfg))

    metrics_csv = None
    if out_dir:
        metrics_csv = os.path.join(out_dir, "metrics.csv")
        atomic_write_text(metrics_csv, format_metrics_csv(rows))
        final = os.path.join(out_dir, "checkpoint-final.bin")
        save_checkpoint(model, final, seed)
        checkpoint_paths["final"] = final
    return TrainResult(model=model, metrics_rows=rows,
                       checkpoint_paths=checkpoint_paths, metrics_csv=metrics_csv)
