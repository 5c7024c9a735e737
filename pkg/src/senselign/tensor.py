"""Dense float64 arrays with reverse-mode differentiation.

A deliberately small tape: each operation records its parents and a vector-
Jacobian closure on the output node.  ``backward`` on a scalar loss walks the
graph once in reverse topological order and accumulates gradients into every
tensor with ``requires_grad``.  Values produced by a forward pass are treated
as immutable; replaying the same computation on the same inputs is
bit-identical.

The primitive set is the minimal closure needed by the model and losses:
matmul, add/sub/mul/div, masked mean-pool, temperature softmax, log-softmax,
layer normalization, GELU, embedding gather, L2 norm / normalize, plus the
structural ops (slice, reshape, swapaxes, reductions) that batching requires.
"""

import numpy as np
from scipy.special import erf

from .errors import DegenerateVectorError, EmptySequenceError

# Norm below which a vector is considered degenerate for normalization.
EPSILON_NORM = 1e-8

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A float64 array plus an optional gradient accumulator and tape node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None, _op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp
        self._op = _op

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self._op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    # -- gradient entry point ------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every requires_grad
        tensor reachable from this scalar.  Repeated calls sum."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        order = topo_order(self)
        flowing = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                acc = flowing.get(id(parent))
                flowing[id(parent)] = pg if acc is None else acc + pg

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data):
    """A trainable leaf."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def topo_order(root):
    """Parents-before-children ordering of the graph below ``root``."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make(data, parents, vjp, op):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=parents if req else (),
                  _vjp=vjp if req else None, _op=op)


# -- arithmetic ---------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), vjp, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), vjp, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), vjp, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), vjp, "div")


def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return _make(out, (a, b), vjp, "matmul")


# -- structure ----------------------------------------------------------------

def getitem(a, idx):
    a = as_tensor(a)
    out = a.data[idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(out, (a,), vjp, "getitem")


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _make(out, (a,), vjp, "reshape")


def swapaxes(a, ax1, ax2):
    a = as_tensor(a)
    out = np.swapaxes(a.data, ax1, ax2)

    def vjp(g):
        return (np.swapaxes(g, ax1, ax2),)

    return _make(out, (a,), vjp, "swapaxes")


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make(out, (a,), vjp, "sum")


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def gather_rows(table, ids):
    """Embedding lookup: ``table[ids]`` with scatter-add backward."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(out, (table,), vjp, "gather_rows")


def gather_index(a, ids):
    """Pick one entry along the last axis per leading index: out[...] = a[..., ids[...]]."""
    a = as_tensor(a)
    ids = np.asarray(ids)
    expanded = np.expand_dims(ids, -1)
    out = np.take_along_axis(a.data, expanded, axis=-1)[..., 0]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, expanded, np.expand_dims(g, -1), axis=-1)
        return (ga,)

    return _make(out, (a,), vjp, "gather_index")


def take_positions(a, idx):
    """Select one time step per batch row: (B, T, ...) -> (B, ...)."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    rows = np.arange(a.data.shape[0])
    out = a.data[rows, idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, idx), g)
        return (ga,)

    return _make(out, (a,), vjp, "take_positions")


# -- nonlinear primitives -------------------------------------------------------

def softmax(x, tau=1.0, axis=-1, mask=None):
    """Temperature softmax along ``axis`` with max-subtraction.

    ``mask`` (bool, broadcastable) marks entries allowed to receive mass;
    fully-masked slices yield all-zero rows rather than an error, which is
    what padded positions need.  Raises on tau <= 0 or non-finite (unmasked)
    input.
    """
    x = as_tensor(x)
    if not tau > 0:
        raise ValueError(f"softmax temperature must be positive, got {tau}")
    z = x.data / tau
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if mask.any() and not np.isfinite(z[mask]).all():
            raise ValueError("non-finite softmax input")
        z = np.where(mask, z, -np.inf)
    elif not np.isfinite(z).all():
        raise ValueError("non-finite softmax input")
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    denom = e.sum(axis=axis, keepdims=True)
    safe = np.where(denom > 0.0, denom, 1.0)
    p = e / safe

    def vjp(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return ((p * (g - inner)) / tau,)

    return _make(p, (x,), vjp, "softmax")


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    zmax = np.max(x.data, axis=axis, keepdims=True)
    shifted = x.data - zmax
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), vjp, "log_softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.data.shape[-1]

    def vjp(g):
        gxhat = g * gain.data
        gx = inv / n * (n * gxhat
                        - gxhat.sum(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.data.shape)
        gbias = _unbroadcast(g, bias.data.shape)
        return (gx, ggain, gbias)

    return _make(out, (x, gain, bias), vjp, "layer_norm")


def gelu(x):
    """Exact GELU: x * Phi(x)."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = x.data * cdf

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _make(out, (x,), vjp, "gelu")


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _make(out, (x,), vjp, "tanh")


def l2_norm(x, axis=-1, keepdims=False):
    """Euclidean norm along ``axis``; zero vectors get a zero subgradient."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    out = n if keepdims else np.squeeze(n, axis=axis)

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(n > 0.0, n, 1.0)
        return (gg * x.data / safe,)

    return _make(out, (x,), vjp, "l2_norm")


def l2_normalize(x, axis=-1):
    """Rescale vectors along ``axis`` to unit norm.

    Raises DegenerateVectorError (with the first offending flat row index)
    when any norm is at or below EPSILON_NORM.
    """
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    bad = n <= EPSILON_NORM
    if bad.any():
        index = int(np.argwhere(bad.reshape(-1))[0][0])
        raise DegenerateVectorError(
            f"cannot normalize near-zero vector (norm <= {EPSILON_NORM}) at row {index}",
            index=index)
    out = x.data / n

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - out * inner) / n,)

    return _make(out, (x,), vjp, "l2_normalize")


def masked_mean_pool(x, mask):
    """Mean of x over axis 1 restricted to mask == 1.

    x: (B, T, D); mask: (B, T) in {0, 1}.  A row with no unmasked token
    raises EmptySequenceError.
    """
    x = as_tensor(x)
    m = np.asarray(mask, dtype=np.float64)
    counts = m.sum(axis=1)
    if (counts == 0).any():
        index = int(np.argwhere(counts == 0)[0][0])
        raise EmptySequenceError(f"row {index} has no non-pad token to pool")
    w = (m / counts[:, None])[:, :, None]
    out = (x.data * w).sum(axis=1)

    def vjp(g):
        return (g[:, None, :] * w,)

    return _make(out, (x,), vjp, "masked_mean_pool")


def cosine_similarity_matrix(a, b):
    """Pairwise cosine similarities between rows of a (M,D) and b (N,D)."""
    return matmul(l2_normalize(a, axis=-1), swapaxes(l2_normalize(b, axis=-1), -1, -2))
