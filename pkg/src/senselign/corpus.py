"""Bitext handling: vocabulary and whitespace tokenization (a stand-in for a
shared subword vocabulary), padded batching, the bitext filtering pipeline,
Pharaoh alignment ingestion, and a deterministic synthetic bilingual corpus
for end-to-end checks."""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError
from .fileio import atomic_write_text
from .seeding import STREAM_BATCH, STREAM_SAMPLE, STREAM_SPLIT, STREAM_SYNTH, rng_for

VOCAB_FORMAT_VERSION = 1

PAD_TOKEN, UNK_TOKEN, EOS_TOKEN = "<pad>", "<unk>", "<eos>"


@dataclass
class ParallelPair:
    src_text: str
    tgt_text: str
    similarity: float = None
    source_corpus: str = None

    def __post_init__(self):
        self.src_text = self.src_text.strip()
        self.tgt_text = self.tgt_text.strip()
        if not self.src_text or not self.tgt_text:
            raise ValueError("both sides of a pair must be non-empty")

    def key(self):
        return (self.src_text, self.tgt_text)


class Vocab:
    """Token <-> id bijection with pad/unk/eos specials."""

    def __init__(self, tokens, pad_id, unk_id, eos_id):
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate token in vocabulary")
        self.pad_id, self.unk_id, self.eos_id = pad_id, unk_id, eos_id
        if len({pad_id, unk_id, eos_id}) != 3:
            raise ValueError("special ids must be distinct")
        for sid in (pad_id, unk_id, eos_id):
            if not 0 <= sid < len(self.id_to_token):
                raise ValueError("special id outside vocabulary")

    def __len__(self):
        return len(self.id_to_token)

    @classmethod
    def build(cls, words):
        """Specials first, then the given words in their given order."""
        tokens = [PAD_TOKEN, UNK_TOKEN, EOS_TOKEN] + list(words)
        return cls(tokens, pad_id=0, unk_id=1, eos_id=2)

    def save(self, path):
        lines = [f"# vocab_format = {VOCAB_FORMAT_VERSION}",
                 f"# pad_id = {self.pad_id}",
                 f"# unk_id = {self.unk_id}",
                 f"# eos_id = {self.eos_id}"]
        lines.extend(self.id_to_token)
        atomic_write_text(path, "\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        specials = {}
        tokens = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.rstrip("\n")
                if line.startswith("#"):
                    body = line[1:].strip()
                    if "=" in body:
                        k, v = (x.strip() for x in body.split("=", 1))
                        specials[k] = v
                    continue
                tokens.append(line)
        try:
            return cls(tokens, pad_id=int(specials["pad_id"]),
                       unk_id=int(specials["unk_id"]), eos_id=int(specials["eos_id"]))
        except KeyError as e:
            raise ParseError(f"{path}: missing special declaration {e}") from None


def tokenize(text, vocab, append_eos=True):
    """Whitespace tokens to ids; unknown words map to unk; eos appended."""
    ids = [vocab.token_to_id.get(w, vocab.unk_id) for w in text.split()]
    if append_eos:
        ids.append(vocab.eos_id)
    return ids


def detokenize(ids, vocab, strip_specials=True):
    toks = []
    for i in ids:
        t = vocab.id_to_token[int(i)]
        if strip_specials and t in (PAD_TOKEN, EOS_TOKEN):
            continue
        toks.append(t)
    return " ".join(toks)


@dataclass
class TokenizedBatch:
    """One side of a batch: right-padded ids, pad mask, last non-pad index."""
    ids: np.ndarray          # (B, T) int64
    mask: np.ndarray         # (B, T) float64 in {0, 1}
    last_index: np.ndarray   # (B,) int64


@dataclass
class PairBatch:
    src: TokenizedBatch
    tgt: TokenizedBatch
    pair_indices: np.ndarray  # (B,) indices into the corpus ordering


def _pad_side(id_lists, pad_id):
    width = max(len(x) for x in id_lists)
    B = len(id_lists)
    ids = np.full((B, width), pad_id, dtype=np.int64)
    mask = np.zeros((B, width))
    last = np.zeros(B, dtype=np.int64)
    for r, seq in enumerate(id_lists):
        ids[r, :len(seq)] = seq
        mask[r, :len(seq)] = 1.0
        last[r] = len(seq) - 1
    return TokenizedBatch(ids=ids, mask=mask, last_index=last)


def tokenize_pairs(pairs, vocab, max_len):
    """Pre-tokenize both sides; truncation keeps the earliest tokens."""
    out = []
    for p in pairs:
        out.append((tokenize(p.src_text, vocab)[:max_len],
                    tokenize(p.tgt_text, vocab)[:max_len]))
    return out


def build_batches(pairs, vocab, batch_size, max_len, seed, shuffle=True, epoch=0):
    """Padded pair batches in a seeded order (one shuffle per epoch index).

    Pairing is preserved row-wise.  A trailing batch of a single pair is
    dropped (in-batch contrastive terms need at least two rows).
    """
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2 for in-batch negatives")
    tokenized = tokenize_pairs(pairs, vocab, max_len)
    order = np.arange(len(tokenized))
    if shuffle:
        order = rng_for(seed, STREAM_BATCH, epoch).permutation(len(tokenized))
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        if len(chunk) < 2:
            break
        src = _pad_side([tokenized[i][0] for i in chunk], vocab.pad_id)
        tgt = _pad_side([tokenized[i][1] for i in chunk], vocab.pad_id)
        batches.append(PairBatch(src=src, tgt=tgt, pair_indices=chunk))
    return batches


# -- bitext TSV ----------------------------------------------------------------

def load_bitext_tsv(path):
    """UTF-8 TSV: src <TAB> tgt [<TAB> corpus_label] per line."""
    pairs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) < 2:
                raise ParseError("expected at least two tab-separated columns",
                                 line_number=lineno)
            label = cols[2] if len(cols) > 2 and cols[2] else None
            try:
                pairs.append(ParallelPair(cols[0], cols[1], source_corpus=label))
            except ValueError as e:
                raise ParseError(str(e), line_number=lineno) from None
    return pairs


def save_bitext_tsv(pairs, path):
    lines = []
    for p in pairs:
        cols = [p.src_text, p.tgt_text]
        if p.source_corpus:
            cols.append(p.source_corpus)
        lines.append("\t".join(cols))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def split_pairs(pairs, dev_fraction, seed):
    """Disjoint (train, dev) split in seeded shuffled order."""
    if not 0.0 <= dev_fraction < 1.0:
        raise ValueError("dev_fraction must be in [0, 1)")
    perm = rng_for(seed, STREAM_SPLIT).permutation(len(pairs))
    n_dev = int(round(dev_fraction * len(pairs)))
    dev_idx = set(perm[:n_dev].tolist())
    train = [p for i, p in enumerate(pairs) if i not in dev_idx]
    dev = [p for i, p in enumerate(pairs) if i in dev_idx]
    return train, dev


# -- filtering pipeline ----------------------------------------------------------

@dataclass(frozen=True)
class FilterConfig:
    ratio_low: float = 0.6
    ratio_high: float = 1.7
    sim_threshold: float = 0.80
    per_corpus_cap: int = 1_000_000
    target_size: int = 2_000_000
    seed: int = 1234

    def __post_init__(self):
        if not self.ratio_low < self.ratio_high:
            raise ValueError("ratio_low must be < ratio_high")


@dataclass
class FilterStats:
    n_input: int = 0
    removed_duplicate: int = 0
    removed_ratio: int = 0
    removed_similarity: int = 0
    removed_cap: int = 0
    removed_sampling: int = 0
    n_output: int = 0

    STAGES = ("duplicate", "ratio", "similarity", "cap", "sampling")

    def removed(self, stage):
        return getattr(self, f"removed_{stage}")

    def consistent(self):
        return self.n_input == self.n_output + sum(self.removed(s) for s in self.STAGES)

    def as_text(self):
        lines = [f"input pairs            {self.n_input}"]
        for s in self.STAGES:
            lines.append(f"removed at {s:<12}{self.removed(s)}")
        lines.append(f"output pairs           {self.n_output}")
        if self.n_output == 0:
            lines.append("warning: no pairs survived filtering")
        return "\n".join(lines) + "\n"

    def as_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["stage", "removed"])
        w.writerow(["input", self.n_input])
        for s in self.STAGES:
            w.writerow([s, self.removed(s)])
        w.writerow(["output", self.n_output])
        return buf.getvalue()


def length_ratio(pair):
    """Whitespace-token length ratio |src| / |tgt|."""
    return len(pair.src_text.split()) / len(pair.tgt_text.split())


def filter_pipeline(pairs, cfg, similarity_fn):
    """Stage order: exact-pair dedup, open-interval length ratio, similarity
    threshold, per-corpus cap, seeded uniform sampling down to target_size.
    Output order is stable (input order) except for the final sampling stage,
    which also preserves input order of the survivors."""
    stats = FilterStats(n_input=len(pairs))

    seen = set()
    deduped = []
    for p in pairs:
        k = p.key()
        if k in seen:
            stats.removed_duplicate += 1
            continue
        seen.add(k)
        deduped.append(p)

    ratio_ok = []
    for p in deduped:
        r = length_ratio(p)
        if cfg.ratio_low < r < cfg.ratio_high:
            ratio_ok.append(p)
        else:
            stats.removed_ratio += 1

    sim_ok = []
    for p in ratio_ok:
        sim = similarity_fn(p)
        if not -1.0 <= sim <= 1.0:
            raise ValueError(f"similarity_fn returned {sim}, outside [-1, 1]")
        p.similarity = sim
        if sim >= cfg.sim_threshold:
            sim_ok.append(p)
        else:
            stats.removed_similarity += 1

    counts = {}
    capped = []
    for p in sim_ok:
        label = p.source_corpus or ""
        counts[label] = counts.get(label, 0) + 1
        if counts[label] <= cfg.per_corpus_cap:
            capped.append(p)
        else:
            stats.removed_cap += 1

    if len(capped) > cfg.target_size:
        rng = rng_for(cfg.seed, STREAM_SAMPLE)
        keep = rng.choice(len(capped), size=cfg.target_size, replace=False)
        keep_set = set(keep.tolist())
        sampled = [p for i, p in enumerate(capped) if i in keep_set]
        stats.removed_sampling = len(capped) - len(sampled)
    else:
        sampled = capped

    stats.n_output = len(sampled)
    return sampled, stats


def similarity_constant(value=1.0):
    def fn(pair):
        return value
    return fn


def similarity_token_overlap(pair):
    """Jaccard overlap of whitespace token sets; a deterministic stand-in for
    an external sentence-embedding similarity."""
    a, b = set(pair.src_text.split()), set(pair.tgt_text.split())
    if not a or not b:
        return 0.0
    return len(a & b) / len(a | b)


SIMILARITY_REGISTRY = {
    "constant": similarity_constant(1.0),
    "overlap": similarity_token_overlap,
}


# -- Pharaoh alignments -----------------------------------------------------------

@dataclass(frozen=True)
class AlignmentLink:
    pair_index: int
    src_word_index: int
    tgt_word_index: int


def parse_pharaoh_line(line, pair_index, lineno):
    """Space-separated "i-j" items; links violating one-to-one are dropped."""
    links = []
    for item in line.split():
        parts = item.split("-")
        if len(parts) != 2:
            raise ParseError(f"malformed alignment item {item!r}", line_number=lineno)
        try:
            i, j = int(parts[0]), int(parts[1])
        except ValueError:
            raise ParseError(f"malformed alignment item {item!r}", line_number=lineno) from None
        if i < 0 or j < 0:
            raise ParseError(f"negative index in {item!r}", line_number=lineno)
        links.append((i, j))
    src_counts = {}
    tgt_counts = {}
    for i, j in links:
        src_counts[i] = src_counts.get(i, 0) + 1
        tgt_counts[j] = tgt_counts.get(j, 0) + 1
    kept, dropped = [], 0
    for i, j in links:
        if src_counts[i] > 1 or tgt_counts[j] > 1:
            dropped += 1
            continue
        kept.append(AlignmentLink(pair_index, i, j))
    return kept, dropped


def load_alignments(path):
    """(links, n_dropped): one Pharaoh line per pair, one-to-one links only."""
    links, dropped = [], 0
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            kept, d = parse_pharaoh_line(line.strip(), pair_index=lineno - 1, lineno=lineno)
            links.extend(kept)
            dropped += d
    return links, dropped


def save_alignments(per_pair_links, path):
    """per_pair_links: list over pairs of [(i, j), ...]."""
    lines = [" ".join(f"{i}-{j}" for i, j in links) for links in per_pair_links]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


# -- synthetic bilingual corpus ----------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Sizes of the toy grammar's word classes.

    ``n_homographs`` noun forms double as verbs, so context must pick the
    reading; this is what gives the sense machinery real work to do.
    """
    n_nouns: int = 20
    n_verbs: int = 12
    n_adjs: int = 8
    n_advs: int = 6
    n_dets: int = 3
    n_preps: int = 4
    n_homographs: int = 6


# Slot templates of the source language.  The target language applies the
# deterministic local reorderings (ADJ NOUN) -> (NOUN ADJ) and
# (VERB ADV) -> (ADV VERB) after the token cipher.
TEMPLATES = (
    ("DET", "ADJ", "NOUN", "VERB"),
    ("DET", "NOUN", "VERB", "ADV"),
    ("NOUN", "VERB", "DET", "NOUN"),
    ("DET", "NOUN", "PREP", "DET", "NOUN", "VERB"),
    ("ADJ", "NOUN", "VERB", "DET", "NOUN"),
    ("NOUN", "VERB", "PREP", "DET", "NOUN"),
    ("DET", "NOUN", "VERB", "NOUN", "ADV"),
    ("NOUN", "VERB", "ADV"),
)

_SWAPPED_BIGRAMS = (("ADJ", "NOUN"), ("VERB", "ADV"))

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _word_forms(rng, count, n_syllables, taken):
    forms = []
    while len(forms) < count:
        w = "".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS))
                    for _ in range(n_syllables))
        if w in taken:
            continue
        taken.add(w)
        forms.append(w)
    return forms


def _target_order(slots):
    """Deterministic local permutation: position j in the target sentence is
    filled by source position order[j]."""
    order = list(range(len(slots)))
    i = 0
    while i < len(slots) - 1:
        if (slots[i], slots[i + 1]) in _SWAPPED_BIGRAMS:
            order[i], order[i + 1] = order[i + 1], order[i]
            i += 2
        else:
            i += 1
    return order


@dataclass
class SyntheticCorpus:
    pairs: list
    alignments: list          # per pair: [(src_idx, tgt_idx), ...]
    vocab: Vocab
    cipher: dict              # source form -> target form
    spec: SyntheticSpec = field(default_factory=SyntheticSpec)


def generate_synthetic(seed, n_pairs, spec=None):
    """A seeded phrase-grammar source language plus its ciphered, locally
    reordered target twin, with gold one-to-one word alignments.

    Pairs are unique; everything is reproducible from the seed.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    spec = spec or SyntheticSpec()
    rng = rng_for(seed, STREAM_SYNTH)

    taken = set()
    src_classes = {
        "NOUN": _word_forms(rng, spec.n_nouns, 2, taken),
        "VERB": _word_forms(rng, spec.n_verbs, 2, taken),
        "ADJ": _word_forms(rng, spec.n_adjs, 2, taken),
        "ADV": _word_forms(rng, spec.n_advs, 2, taken),
        "DET": _word_forms(rng, spec.n_dets, 1, taken),
        "PREP": _word_forms(rng, spec.n_preps, 1, taken),
    }
    # homograph forms: first n noun forms can also fill VERB slots
    n_h = min(spec.n_homographs, spec.n_nouns)
    src_classes["VERB"] = src_classes["VERB"] + src_classes["NOUN"][:n_h]

    src_forms = sorted(set(w for ws in src_classes.values() for w in ws))
    tgt_forms = _word_forms(rng, len(src_forms), 3, taken)
    cipher = dict(zip(src_forms, tgt_forms))

    pairs, alignments = [], []
    seen = set()
    attempts = 0
    max_attempts = n_pairs * 200
    while len(pairs) < n_pairs:
        attempts += 1
        if attempts > max_attempts:
            raise RuntimeError(
                f"could not generate {n_pairs} unique sentences; grammar too small")
        slots = TEMPLATES[rng.integers(len(TEMPLATES))]
        words = tuple(src_classes[s][rng.integers(len(src_classes[s]))] for s in slots)
        if words in seen:
            continue
        seen.add(words)
        order = _target_order(slots)
        tgt_words = [cipher[words[i]] for i in order]
        pairs.append(ParallelPair(" ".join(words), " ".join(tgt_words)))
        alignments.append([(i, j) for j, i in enumerate(order)])

    vocab = Vocab.build(src_forms + sorted(tgt_forms))
    return SyntheticCorpus(pairs=pairs, alignments=alignments, vocab=vocab,
                           cipher=cipher, spec=spec)
