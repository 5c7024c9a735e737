"""The sense-decomposed causal language model.

Each token embedding is projected through K learned matrices into K sense
vectors.  A small causal transformer produces contextual states; a weight
head turns those states into a distribution over (earlier position, sense)
cells, and the token representation fed to the LM head is the convex mixture
of sense vectors under that distribution.
"""

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .errors import EmptySequenceError, InvalidTokenError
from .seeding import STREAM_INIT, rng_for

CHECKPOINT_MAGIC = b"SENSELIGN-CKPT\n"
CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    n_senses: int = 4
    max_positions: int = 64
    tie_output: bool = True

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.n_senses < 1:
            raise ValueError("n_senses must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")


# Parameter names with any of these prefixes form the "sense machinery":
# the sense projections, the token embeddings they read from, and the
# weight head that scores (position, sense) cells.  These are the arrays
# frozen during the polish phase.
SENSE_MACHINERY_PREFIXES = ("tok_emb", "sense_proj", "wh_")

# Cap (via tanh) on how far weight-head scores may separate senses at one
# position.  Unbounded scores let a tiny model collapse each mixture onto a
# single (position, sense) cell, which erases the soft blending the
# architecture is about; position preferences stay unbounded.
SENSE_SCORE_BOUND = 0.75


class ModelParameters:
    """Named trainable arrays, iterable in a stable order."""

    def __init__(self, named):
        self.named = dict(named)

    def __getitem__(self, name):
        return self.named[name]

    def __contains__(self, name):
        return name in self.named

    def items(self):
        return self.named.items()

    def names(self):
        return list(self.named.keys())

    def n_values(self):
        return sum(t.data.size for t in self.named.values())

    def zero_grads(self):
        for t in self.named.values():
            t.zero_grad()

    def copy_values(self):
        return {name: t.data.copy() for name, t in self.named.items()}


def init_parameters(config, seed):
    """Fresh parameters: N(0, 0.02) for embeddings/heads and linear maps,
    identity plus N(0, 0.02/sqrt(K)) for the sense projections."""
    rng = rng_for(seed, STREAM_INIT)
    d, K, V = config.d_model, config.n_senses, config.vocab_size
    std = 0.02

    def normal(*shape, scale=std):
        return T.parameter(rng.normal(0.0, scale, size=shape))

    named = {}
    named["tok_emb"] = normal(V, d)
    named["pos_emb"] = normal(config.max_positions, d)
    eye = np.broadcast_to(np.eye(d), (K, d, d)).copy()
    named["sense_proj"] = T.parameter(eye + rng.normal(0.0, std / np.sqrt(K), size=(K, d, d)))
    for i in range(config.n_layers):
        p = f"layers.{i}."
        named[p + "ln1.g"] = T.parameter(np.ones(d))
        named[p + "ln1.b"] = T.parameter(np.zeros(d))
        named[p + "attn.w_qkv"] = normal(d, 3 * d)
        named[p + "attn.b_qkv"] = T.parameter(np.zeros(3 * d))
        named[p + "attn.w_out"] = normal(d, d)
        named[p + "attn.b_out"] = T.parameter(np.zeros(d))
        named[p + "ln2.g"] = T.parameter(np.ones(d))
        named[p + "ln2.b"] = T.parameter(np.zeros(d))
        named[p + "mlp.w1"] = normal(d, 4 * d)
        named[p + "mlp.b1"] = T.parameter(np.zeros(4 * d))
        named[p + "mlp.w2"] = normal(4 * d, d)
        named[p + "mlp.b2"] = T.parameter(np.zeros(d))
    named["ln_f.g"] = T.parameter(np.ones(d))
    named["ln_f.b"] = T.parameter(np.zeros(d))
    # one attention (query, key) pair per sense, plus a per-sense score from c
    named["wh_query"] = normal(K, d, d)
    named["wh_key"] = normal(K, d, d)
    named["wh_sense"] = normal(d, K)
    named["wh_sense_b"] = T.parameter(np.zeros(K))
    if not config.tie_output:
        named["out_head"] = normal(d, V)
    return ModelParameters(named)


@dataclass
class SenseDecomposition:
    """Forward-pass byproducts: sense vectors, the mixture distribution,
    mixed representations, and contextual states (all graph tensors)."""
    s: T.Tensor        # (B, T, K, d)
    alpha: T.Tensor    # (B, T, T, K); alpha[b, t, j, k], zero for j > t or pads
    h: T.Tensor        # (B, T, d)
    c: T.Tensor        # (B, T, d)


def norm_pool_weights(s, tau_pool):
    """Per-token sense distribution from sense-vector magnitudes.

    pi[..., k] = softmax_k(||s[..., k, :]|| / tau_pool).
    """
    if not tau_pool > 0:
        raise ValueError(f"tau_pool must be positive, got {tau_pool}")
    norms = T.l2_norm(s, axis=-1)
    return T.softmax(norms, tau=tau_pool, axis=-1)


class BackpackLM:
    """Config + parameters + the forward passes."""

    def __init__(self, config, params):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config, seed):
        return cls(config, init_parameters(config, seed))

    # -- input validation ------------------------------------------------------
    def _check_inputs(self, ids, mask):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ValueError(f"token ids must be (batch, time), got shape {ids.shape}")
        if ids.min(initial=0) < 0 or ids.max(initial=0) >= self.config.vocab_size:
            raise InvalidTokenError(
                f"token id out of range [0, {self.config.vocab_size})")
        if mask is None:
            mask = np.ones(ids.shape)
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != ids.shape:
            raise ValueError("pad mask shape must match token ids")
        if (mask.sum(axis=1) == 0).any():
            raise EmptySequenceError("a batch row consists only of padding")
        if ids.shape[1] > self.config.max_positions:
            raise ValueError(
                f"sequence length {ids.shape[1]} exceeds max_positions "
                f"{self.config.max_positions}")
        return ids, mask

    # -- forward pieces ---------------------------------------------------------
    def sense_vectors(self, ids, mask=None):
        """s[b, t, k, :] = tok_emb[ids[b, t]] @ sense_proj[k]; (B, T, K, d)."""
        ids, _ = self._check_inputs(ids, mask)
        x = T.gather_rows(self.params["tok_emb"], ids)          # (B, T, d)
        return self._senses_from(x)

    def _senses_from(self, x):
        B, TT, d = x.shape
        proj = self.params["sense_proj"]                         # (K, d, d)
        xb = T.reshape(x, (B, 1, TT, d))
        s = T.matmul(xb, T.reshape(proj, (1,) + proj.shape))     # (B, K, T, d)
        return T.swapaxes(s, 1, 2)                               # (B, T, K, d)

    def context_states(self, ids, mask=None):
        """Causal transformer states over token+position embeddings; (B, T, d)."""
        ids, mask = self._check_inputs(ids, mask)
        x = T.gather_rows(self.params["tok_emb"], ids)
        return self._context_from(x, mask)

    def _context_from(self, x, mask):
        cfg = self.config
        B, TT, d = x.shape
        pos = T.gather_rows(self.params["pos_emb"], np.arange(TT))
        h = x + pos
        causal = np.tril(np.ones((TT, TT), dtype=bool))
        # keys must be non-pad; queries are whatever position asks
        attn_mask = causal[None, None, :, :] & (mask[:, None, None, :] > 0)
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            a_in = T.layer_norm(h, self.params[p + "ln1.g"], self.params[p + "ln1.b"])
            h = h + self._attention(a_in, attn_mask, p)
            m_in = T.layer_norm(h, self.params[p + "ln2.g"], self.params[p + "ln2.b"])
            h = h + self._mlp(m_in, p)
        return T.layer_norm(h, self.params["ln_f.g"], self.params["ln_f.b"])

    def _attention(self, x, attn_mask, prefix):
        cfg = self.config
        B, TT, d = x.shape
        H, dh = cfg.n_heads, d // cfg.n_heads
        qkv = T.matmul(x, self.params[prefix + "attn.w_qkv"]) + self.params[prefix + "attn.b_qkv"]
        q, k, v = qkv[:, :, :d], qkv[:, :, d:2 * d], qkv[:, :, 2 * d:]

        def split(t):
            return T.swapaxes(T.reshape(t, (B, TT, H, dh)), 1, 2)   # (B, H, T, dh)

        q, k, v = split(q), split(k), split(v)
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) / np.sqrt(dh)
        att = T.softmax(scores, tau=1.0, axis=-1, mask=attn_mask)
        out = T.matmul(att, v)                                       # (B, H, T, dh)
        out = T.reshape(T.swapaxes(out, 1, 2), (B, TT, d))
        return T.matmul(out, self.params[prefix + "attn.w_out"]) + self.params[prefix + "attn.b_out"]

    def _mlp(self, x, prefix):
        h = T.matmul(x, self.params[prefix + "mlp.w1"]) + self.params[prefix + "mlp.b1"]
        h = T.gelu(h)
        return T.matmul(h, self.params[prefix + "mlp.w2"]) + self.params[prefix + "mlp.b2"]

    def contextual_mixture(self, ids, mask=None, mixture_mode=None):
        """Full decomposition: senses, (position, sense) mixture, mixed h, states c.

        ``mixture_mode`` (an ablation override, see senselign.ablation) swaps
        the per-position sense factor of alpha at inference time; the
        returned graph is then detached at alpha.
        """
        ids, mask = self._check_inputs(ids, mask)
        cfg = self.config
        B, TT = ids.shape
        K, d = cfg.n_senses, cfg.d_model

        x = T.gather_rows(self.params["tok_emb"], ids)
        s = self._senses_from(x)                                    # (B, T, K, d)
        c = self._context_from(x, mask)                             # (B, T, d)

        # per-sense attention over positions: scores[b, t, j, k]
        wq, wk = self.params["wh_query"], self.params["wh_key"]
        cb = T.reshape(c, (B, 1, TT, d))
        xb = T.reshape(x, (B, 1, TT, d))
        q = T.matmul(cb, T.reshape(wq, (1, K, d, d)))               # (B, K, T, d)
        keys = T.matmul(xb, T.reshape(wk, (1, K, d, d)))            # (B, K, T, d)
        att = T.matmul(q, T.swapaxes(keys, -1, -2)) / np.sqrt(d)    # (B, K, Tq, Tj)
        att = T.swapaxes(T.swapaxes(att, 1, 2), 2, 3)               # (B, Tq, Tj, K)
        sense_scores = T.matmul(c, self.params["wh_sense"]) + self.params["wh_sense_b"]

        # split position preference (unbounded) from sense preference (capped)
        bound = SENSE_SCORE_BOUND
        pos_pref = att.mean(axis=-1, keepdims=True)
        sense_dev = T.tanh((att - pos_pref) / bound) * bound
        sense_bias = T.tanh(sense_scores / bound) * bound
        logits = pos_pref + sense_dev + T.reshape(sense_bias, (B, TT, 1, K))
        causal = np.tril(np.ones((TT, TT), dtype=bool))
        cell_mask = (causal[None, :, :, None]
                     & (mask[:, None, :, None] > 0)       # source position j non-pad
                     & (mask[:, :, None, None] > 0))      # query position t non-pad
        cell_mask = np.broadcast_to(cell_mask, (B, TT, TT, K))
        flat = T.reshape(logits, (B, TT, TT * K))
        alpha = T.softmax(flat, tau=1.0, axis=-1,
                          mask=cell_mask.reshape(B, TT, TT * K))
        alpha = T.reshape(alpha, (B, TT, TT, K))

        if mixture_mode is not None:
            from .ablation import override_alpha
            alpha = T.Tensor(override_alpha(alpha.data, mixture_mode))

        h = T.matmul(T.reshape(alpha, (B, TT, TT * K)), T.reshape(s, (B, TT * K, d)))
        return SenseDecomposition(s=s, alpha=alpha, h=h, c=c)

    def output_matrix(self):
        """(d, V) LM head; shares token-embedding values when tied."""
        if self.config.tie_output and "out_head" not in self.params:
            return T.swapaxes(self.params["tok_emb"], 0, 1)
        return self.params["out_head"]

    def forward_lm(self, ids, mask=None, mixture_mode=None):
        """Next-token logits (B, T, V): logits at t score the token at t+1."""
        decomp = self.contextual_mixture(ids, mask, mixture_mode=mixture_mode)
        logits = T.matmul(decomp.h, self.output_matrix())
        return logits, decomp

    def untie_output(self):
        """Give the LM head its own copy of the embedding matrix (used when
        the embeddings freeze but the head must keep training)."""
        if "out_head" not in self.params:
            self.params.named["out_head"] = T.parameter(
                np.swapaxes(self.params["tok_emb"].data, 0, 1).copy())
        self.config = ModelConfig(**{**asdict(self.config), "tie_output": False})

    def generate_greedy(self, prompt_ids, max_new_tokens, eos_id=None):
        """Greedy continuation for debugging; not a quality surface."""
        ids = list(int(i) for i in prompt_ids)
        for _ in range(max_new_tokens):
            window = ids[-self.config.max_positions:]
            arr = np.asarray([window])
            logits, _ = self.forward_lm(arr, np.ones_like(arr, dtype=np.float64))
            nxt = int(np.argmax(logits.data[0, -1]))
            ids.append(nxt)
            if eos_id is not None and nxt == eos_id:
                break
        return ids


# -- checkpoint io ------------------------------------------------------------
#
# Layout: MAGIC, 8-byte little-endian header length, UTF-8 JSON header, then
# the parameter values as raw little-endian float32 in manifest order.
# Offsets in the manifest are float32 counts from the start of the blob.

def save_checkpoint(model, path, seed):
    manifest = []
    offset = 0
    blobs = []
    for name, t in model.params.items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        blobs.append(arr.tobytes())
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(model.config),
        "seed": int(seed),
        "manifest": manifest,
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    from .fileio import atomic_write_bytes
    atomic_write_bytes(path, CHECKPOINT_MAGIC + struct.pack("<Q", len(payload))
                       + payload + b"".join(blobs))


def load_checkpoint(path):
    """Returns (model, header dict).  Values are bit-exact float32."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    n = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<Q", raw[n:n + 8])
    header = json.loads(raw[n + 8:n + 8 + hlen].decode("utf-8"))
    if header["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {header['format_version']}")
    blob = np.frombuffer(raw[n + 8 + hlen:], dtype="<f4")
    config = ModelConfig(**header["config"])
    named = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        arr = blob[entry["offset"]:entry["offset"] + size].reshape(shape)
        named[entry["name"]] = T.parameter(arr.astype(np.float64))
    return BackpackLM(config, ModelParameters(named)), header


def read_checkpoint_raw(path):
    """Name -> raw float32 bytes, for byte-level comparisons."""
    with open(path, "rb") as f:
        raw = f.read()
    n = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<Q", raw[n:n + 8])
    header = json.loads(raw[n + 8:n + 8 + hlen].decode("utf-8"))
    blob = raw[n + 8 + hlen:]
    out = {}
    for entry in header["manifest"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"] * 4
        out[entry["name"]] = blob[start:start + size * 4]
    return out
