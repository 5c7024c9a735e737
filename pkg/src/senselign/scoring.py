"""Multiple-choice scoring: length-normalized conditional log-likelihood, a
PMI correction against unconditional continuation bias, their lambda/alpha
combination, grid search, and accuracy."""

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .corpus import tokenize
from .errors import ParseError

GRID = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass(frozen=True)
class MCItem:
    context: str
    candidates: tuple
    gold_index: int

    def __post_init__(self):
        if len(self.candidates) < 2:
            raise ValueError("an item needs at least two candidates")
        if not 0 <= self.gold_index < len(self.candidates):
            raise ValueError("gold_index outside candidates")


@dataclass(frozen=True)
class ScoreParams:
    scheme: str = "combined"     # "cond" | "combined"
    lam: float = 1.0
    alpha: float = 0.0

    def __post_init__(self):
        if self.scheme not in ("cond", "combined"):
            raise ValueError(f"unknown scoring scheme {self.scheme!r}")
        if not 0.0 <= self.lam <= 1.0 or not 0.0 <= self.alpha <= 1.0:
            raise ValueError("lambda and alpha must lie in [0, 1]")


def _candidate_token_logprobs(model, vocab, candidate, context):
    """Log-probs of the candidate tokens given [begin marker] + context.

    The eos id doubles as the begin marker so position 0 is conditioned;
    candidate tokens carry no trailing eos (length is the candidate's own
    token count)."""
    cand_ids = tokenize(candidate, vocab, append_eos=False)
    if not cand_ids:
        raise ValueError("candidate tokenizes to no tokens")
    ctx_ids = [vocab.eos_id] + (tokenize(context, vocab, append_eos=False) if context.strip() else [])
    seq = np.asarray([ctx_ids + cand_ids])
    if seq.shape[1] > model.config.max_positions:
        seq = seq[:, -model.config.max_positions:]
    logits, _ = model.forward_lm(seq, np.ones_like(seq, dtype=np.float64))
    ls = T.log_softmax(logits, axis=-1).data[0]
    start = seq.shape[1] - len(cand_ids)
    out = [float(ls[start - 1 + t, cand_ids[t]]) for t in range(len(cand_ids))]
    return out


def mean_loglik(model, vocab, candidate, context):
    """(1/|A|) sum_t log p(a_t | a_<t, context) over candidate tokens only."""
    lps = _candidate_token_logprobs(model, vocab, candidate, context)
    return float(np.mean(lps))


def pmi(model, vocab, candidate, context):
    """mean_loglik(A | C) - mean_loglik(A | empty)."""
    return mean_loglik(model, vocab, candidate, context) - mean_loglik(model, vocab, candidate, "")


@dataclass(frozen=True)
class CandidateStats:
    """Cached per-candidate quantities so parameter sweeps reuse forwards."""
    cond: float
    uncond: float
    n_tokens: int

    def score(self, params):
        if params.scheme == "cond":
            return self.cond + params.alpha * self.n_tokens
        return ((1.0 - params.lam) * (self.cond - self.uncond)
                + params.lam * self.cond + params.alpha * self.n_tokens)


def candidate_stats(model, vocab, item):
    out = []
    for cand in item.candidates:
        cond = mean_loglik(model, vocab, cand, item.context)
        uncond = mean_loglik(model, vocab, cand, "")
        out.append(CandidateStats(cond=cond, uncond=uncond,
                                  n_tokens=len(tokenize(cand, vocab, append_eos=False))))
    return out


def combined_score(model, vocab, candidate, context, params):
    """(1-lambda) PMI + lambda mean_loglik + alpha * len; the cond scheme
    drops the PMI interpolation."""
    stats = CandidateStats(cond=mean_loglik(model, vocab, candidate, context),
                           uncond=mean_loglik(model, vocab, candidate, ""),
                           n_tokens=len(tokenize(candidate, vocab, append_eos=False)))
    return stats.score(params)


def predict(model, vocab, item, params, stats=None):
    """Argmax candidate index; exact ties go to the lowest index."""
    stats = stats or candidate_stats(model, vocab, item)
    scores = [s.score(params) for s in stats]
    return int(np.argmax(scores))


def accuracy(model, vocab, items, params, stats_list=None):
    if not items:
        raise ValueError("empty item set")
    stats_list = stats_list or [candidate_stats(model, vocab, it) for it in items]
    hits = sum(predict(model, vocab, it, params, stats=st) == it.gold_index
               for it, st in zip(items, stats_list))
    return hits / len(items)


def grid_search(model, vocab, items):
    """Best ScoreParams over the cond scheme's alpha grid plus the full
    11 x 11 (lambda, alpha) combined grid.

    Deterministic tie-break: cond before combined, then smaller lambda, then
    smaller alpha (realized by scan order + strict improvement).
    Returns (best_params, report_rows) with one (scheme, lambda, alpha,
    accuracy) row per grid point.
    """
    if not items:
        raise ValueError("empty validation set")
    stats_list = [candidate_stats(model, vocab, it) for it in items]
    candidates = [ScoreParams(scheme="cond", lam=0.0, alpha=a) for a in GRID]
    candidates += [ScoreParams(scheme="combined", lam=l, alpha=a)
                   for l in GRID for a in GRID]
    best, best_acc, rows = None, -1.0, []
    for params in candidates:
        acc = accuracy(model, vocab, items, params, stats_list=stats_list)
        rows.append((params.scheme, params.lam, params.alpha, acc))
        if acc > best_acc:
            best, best_acc = params, acc
    return best, rows


# -- file formats ---------------------------------------------------------------

def load_mc_items_tsv(path):
    """TSV per line: context, then >= 2 candidates, then the gold index."""
    items = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) < 4:
                raise ParseError("expected context, >=2 candidates, gold index",
                                 line_number=lineno)
            try:
                gold = int(cols[-1])
            except ValueError:
                raise ParseError(f"gold index {cols[-1]!r} is not an integer",
                                 line_number=lineno) from None
            try:
                items.append(MCItem(context=cols[0], candidates=tuple(cols[1:-1]),
                                    gold_index=gold))
            except ValueError as e:
                raise ParseError(str(e), line_number=lineno) from None
    return items


def results_csv(model, vocab, items, params):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["item", "prediction", "gold", "correct", "scores"])
    for i, item in enumerate(items):
        stats = candidate_stats(model, vocab, item)
        scores = [s.score(params) for s in stats]
        pred = int(np.argmax(scores))
        w.writerow([i, pred, item.gold_index, int(pred == item.gold_index),
                    " ".join(f"{s:.6f}" for s in scores)])
    return buf.getvalue()


def grid_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scheme", "lambda", "alpha", "accuracy"])
    for scheme, lam, alpha, acc in rows:
        w.writerow([scheme, lam, alpha, repr(acc)])
    return buf.getvalue()
