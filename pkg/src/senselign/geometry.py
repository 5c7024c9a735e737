"""Sense-space analyses: local per-word topology via cosine-Gram Spearman
correlation, global structure via orthogonal Procrustes, and paired-bootstrap
significance.  Everything here is plain numpy over frozen model outputs."""

from dataclasses import dataclass, field

import numpy as np

from .errors import PairDiscarded, UndefinedCorrelationError
from .seeding import STREAM_SUBSAMPLE, rng_for
from .tensor import EPSILON_NORM


@dataclass
class SenseMatrixPair:
    """K x d sense matrices for one aligned word pair (post subword pooling)."""
    v_src: np.ndarray
    v_tgt: np.ndarray

    def __post_init__(self):
        self.v_src = np.asarray(self.v_src, dtype=np.float64)
        self.v_tgt = np.asarray(self.v_tgt, dtype=np.float64)
        if self.v_src.shape != self.v_tgt.shape or self.v_src.ndim != 2:
            raise ValueError("sense matrices must both be (K, d)")
        if not (np.isfinite(self.v_src).all() and np.isfinite(self.v_tgt).all()):
            raise ValueError("sense matrices must be finite")


@dataclass
class TopologyReport:
    rhos: list
    mean_rho: float
    bootstrap_mean_rho: float = None
    control_mean_rho: float = None
    delta_vs_control: float = None
    p_value: float = None
    n_discarded: int = 0
    n_undefined: int = 0


@dataclass
class ProcrustesReport:
    q: np.ndarray
    mean_cosine: float
    n_pairs: int
    subsample_means: list = field(default_factory=list)
    rank_deficient: bool = False
    n_discarded: int = 0


@dataclass
class BootstrapResult:
    mean_a: float
    mean_b: float
    delta: float
    p_value: float


def pool_subword_senses(position_senses):
    """Element-wise mean of the per-position (K, d) sense matrices of a word
    span.  Raises PairDiscarded when row counts disagree (fewer than K senses
    available)."""
    arrs = [np.asarray(m, dtype=np.float64) for m in position_senses]
    if not arrs:
        raise ValueError("word span is empty")
    K, d = arrs[0].shape
    for m in arrs:
        if m.shape != (K, d):
            raise PairDiscarded("span positions disagree on sense count")
    return np.mean(arrs, axis=0)


def center_normalize(v):
    """Subtract the mean sense row, then row-wise L2 normalize.  A row that
    centers to (near-)zero discards the pair."""
    v = np.asarray(v, dtype=np.float64)
    centered = v - v.mean(axis=0, keepdims=True)
    norms = np.linalg.norm(centered, axis=1, keepdims=True)
    if (norms <= EPSILON_NORM).any():
        raise PairDiscarded("degenerate sense row after centering")
    return centered / norms


def _rank_with_ties(x):
    """Average ranks (1-based) with ties sharing their mean rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y):
    """Pearson correlation of tie-averaged ranks."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("need two equal-length vectors of length >= 2")
    if (x == x[0]).all() or (y == y[0]).all():
        raise UndefinedCorrelationError("constant input has no rank correlation")
    rx, ry = _rank_with_ties(x), _rank_with_ties(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0.0:
        raise UndefinedCorrelationError("constant ranks")
    return float((rx * ry).sum() / denom)


def upper_triangle(g):
    iu = np.triu_indices(g.shape[0], k=1)
    return g[iu]


def topology_rho(pair):
    """Spearman correlation between the upper triangles of the two sides'
    cosine Gram matrices.  Needs K >= 3 senses."""
    K = pair.v_src.shape[0]
    if K < 3:
        raise ValueError("topology needs at least 3 senses per word")
    vs = center_normalize(pair.v_src)
    vt = center_normalize(pair.v_tgt)
    g_src = upper_triangle(vs @ vs.T)
    g_tgt = upper_triangle(vt @ vt.T)
    return spearman(g_src, g_tgt)


def topology_report(pairs, iters=0, seed=0):
    """Mean rho over pairs, skipping discarded/undefined ones with counts;
    optionally bootstrap the mean."""
    rhos = []
    n_disc, n_undef = 0, 0
    for p in pairs:
        try:
            rhos.append(topology_rho(p))
        except PairDiscarded:
            n_disc += 1
        except UndefinedCorrelationError:
            n_undef += 1
    mean = float(np.mean(rhos)) if rhos else float("nan")
    boot = None
    if iters and rhos:
        rng = rng_for(seed, STREAM_SUBSAMPLE)
        idx = rng.integers(0, len(rhos), size=(iters, len(rhos)))
        boot = float(np.asarray(rhos)[idx].mean(axis=1).mean())
    return TopologyReport(rhos=rhos, mean_rho=mean, bootstrap_mean_rho=boot,
                          n_discarded=n_disc, n_undefined=n_undef)


def mixture_embedding(senses, pi):
    """Unit-norm weighted sum of a word's K sense vectors."""
    senses = np.asarray(senses, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    if senses.ndim != 2 or pi.shape != (senses.shape[0],):
        raise ValueError("expected (K, d) senses and a K-vector of weights")
    e = pi @ senses
    n = np.linalg.norm(e)
    if n <= EPSILON_NORM:
        raise PairDiscarded("degenerate mixture embedding")
    return e / n


def random_orthogonal(d, rng):
    """Haar-distributed orthogonal matrix via sign-corrected QR."""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def procrustes_align(t_rows, e_rows, subsample_size=None, n_subsamples=5, seed=0):
    """Best orthogonal map Q of the target rows onto the source rows.

    Q = U V^T from the SVD of T^T E; mean cosine is measured between T_i Q
    and E_i.  When ``subsample_size`` is set, the cosine is additionally
    averaged over seeded subsamples.
    """
    t_rows = np.asarray(t_rows, dtype=np.float64)
    e_rows = np.asarray(e_rows, dtype=np.float64)
    if t_rows.shape != e_rows.shape or t_rows.ndim != 2:
        raise ValueError("expected matching (N, d) matrices")
    n, d = t_rows.shape
    if n < d:
        import warnings
        warnings.warn(f"only {n} pairs for dimension {d}; rotation may overfit")

    def solve(tm, em):
        m = tm.T @ em
        u, s, vt = np.linalg.svd(m)
        q = u @ vt
        mapped = tm @ q
        num = (mapped * em).sum(axis=1)
        den = np.linalg.norm(mapped, axis=1) * np.linalg.norm(em, axis=1)
        den = np.where(den > 0, den, 1.0)
        return q, float((num / den).mean()), s

    q, mean_cos, svals = solve(t_rows, e_rows)
    rank_deficient = bool(svals.min() < 1e-10 * max(svals.max(), 1.0))

    sub_means = []
    if subsample_size:
        rng = rng_for(seed, STREAM_SUBSAMPLE)
        size = min(subsample_size, n)
        for _ in range(n_subsamples):
            idx = rng.choice(n, size=size, replace=False)
            _, mc, _ = solve(t_rows[idx], e_rows[idx])
            sub_means.append(mc)
        mean_cos = float(np.mean(sub_means))
    return ProcrustesReport(q=q, mean_cosine=mean_cos, n_pairs=n,
                            subsample_means=sub_means, rank_deficient=rank_deficient)


def paired_bootstrap(scores_a, scores_b, iters, seed):
    """Resample matched score pairs with replacement; report the mean paired
    delta over iterations and a two-sided sign-flip p-value (doubled fraction
    of iterations whose delta crosses zero, capped at 1).

    Resampling convention: one (iters, n) index matrix drawn from
    default_rng(seed).integers.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("score lists must have identical length")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(a), size=(iters, len(a)))
    mean_a = a[idx].mean(axis=1)
    mean_b = b[idx].mean(axis=1)
    deltas = mean_a - mean_b
    frac_le = float((deltas <= 0.0).mean())
    frac_ge = float((deltas >= 0.0).mean())
    p = min(1.0, 2.0 * min(frac_le, frac_ge))
    return BootstrapResult(mean_a=float(mean_a.mean()), mean_b=float(mean_b.mean()),
                           delta=float(deltas.mean()), p_value=p)


# -- corpus-level extraction ------------------------------------------------------

def word_pair_occurrences(pairs, links, vocab, min_count=5, stop_words=()):
    """One-to-one aligned word occurrences that clear a frequency threshold.

    Returns (pair_index, src_word, tgt_word, src_pos, tgt_pos) tuples; words
    are whitespace tokens.  Frequency is counted per side over the given
    bitext; stop words are excluded on either side.
    """
    stop = set(stop_words)
    src_tokens = [p.src_text.split() for p in pairs]
    tgt_tokens = [p.tgt_text.split() for p in pairs]
    freq = {}
    for toks in src_tokens + tgt_tokens:
        for w in toks:
            freq[w] = freq.get(w, 0) + 1
    occ = []
    for link in links:
        if link.pair_index >= len(pairs):
            raise ValueError(f"alignment references pair {link.pair_index} "
                             f"beyond corpus size {len(pairs)}")
        st = src_tokens[link.pair_index]
        tt = tgt_tokens[link.pair_index]
        if link.src_word_index >= len(st) or link.tgt_word_index >= len(tt):
            raise ValueError(
                f"alignment index outside sentence (pair {link.pair_index})")
        sw, tw = st[link.src_word_index], tt[link.tgt_word_index]
        if sw in stop or tw in stop:
            continue
        if freq[sw] < min_count or freq[tw] < min_count:
            continue
        occ.append((link.pair_index, sw, tw, link.src_word_index, link.tgt_word_index))
    return occ


def sense_matrix_for_word(model, vocab, word):
    """Pre-context (K, d) sense matrix of a whitespace word, pooling over its
    (single, under this tokenizer) token."""
    from .corpus import tokenize
    ids = tokenize(word, vocab, append_eos=False)
    if not ids:
        raise PairDiscarded(f"word {word!r} produced no tokens")
    s = model.sense_vectors(np.asarray([ids]), np.ones((1, len(ids))))
    return pool_subword_senses([s.data[0, t] for t in range(len(ids))])
