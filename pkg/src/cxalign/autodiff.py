"""Reverse-mode autodiff over dense float32 numpy arrays.

A Tensor wraps an ndarray and remembers the primitive application that
produced it; backward() replays the graph in reverse topological order.
The primitive set is fixed: matmul, add, mul, scale, softmax, layer norm,
embedding lookup, GELU, row L2 normalization, cross entropy from logits,
dropout, mean/sum reductions, plus shape plumbing (reshape, transpose,
concat, row gather).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "tensor",
    "add",
    "mul",
    "scale",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "take_rows",
    "sum_",
    "mean_",
    "softmax",
    "layer_norm",
    "gelu",
    "exp",
    "minimum_const",
    "maximum_const",
    "l2_normalize",
    "embedding",
    "cross_entropy",
    "dropout",
    "backward",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


class NonFiniteError(ValueError):
    """Raised when a primitive receives NaN or infinite input."""


def _check_finite(a: np.ndarray, what: str) -> None:
    # min+max reductions instead of isfinite().all(): no bool temporary, and
    # any NaN/inf propagates into the sum
    if a.size and not np.isfinite(float(a.min()) + float(a.max())):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """Dense float32 array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _bwd=None):
        self.data = np.asarray(data, dtype=np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._bwd = _bwd

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float32, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # light operator sugar used throughout the towers
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    t = Tensor(data, requires_grad=requires_grad)
    _check_finite(t.data, "tensor()")
    return t


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def _track(out: np.ndarray, parents, bwd) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if needs:
        return Tensor(out, requires_grad=True, _parents=tuple(parents), _bwd=bwd)
    return Tensor(out)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} incompatible") from e

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _track(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} incompatible") from e

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _track(out, (a, b), bwd)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    out = a.data * np.float32(c)

    def bwd(g):
        return (g * np.float32(c),)

    return _track(out, (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim < 1 or a.shape[-1] != b.shape[0 if b.data.ndim == 1 else -2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} incompatible")
    _check_finite(a.data, "matmul lhs")
    _check_finite(b.data, "matmul rhs")
    out = a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _track(out, (a, b), bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _track(out, (a,), bwd)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def bwd(g):
        return (np.transpose(g, inv),)

    return _track(out, (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _track(out, tuple(ts), bwd)


def take_rows(a, idx) -> Tensor:
    """Gather rows of a 2-D tensor; gradient scatters back with accumulation."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"take_rows: expected 2-D input, got {a.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    out = a.data[idx]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _track(out, (a,), bwd)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _track(np.asarray(out, dtype=np.float32), (a,), bwd)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a) -> Tensor:
    """Row softmax over the last axis (numerically stable)."""
    a = _as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    # -inf logits (masked positions) are fine; NaN, +inf, or an all--inf row
    # is not: the per-row max catches each case
    if not np.isfinite(m).all():
        raise NonFiniteError("softmax: NaN/+inf logits or a fully masked row")
    e = np.exp(a.data - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _track(out, (a,), bwd)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    a = _as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def bwd(g):
        n = a.shape[-1]
        gsum = g.sum(axis=-1, keepdims=True)
        gdot = (g * out).sum(axis=-1, keepdims=True)
        return (inv * (g - gsum / n - out * gdot / n),)

    return _track(out, (a,), bwd)


_GELU_C = np.float32(np.sqrt(2.0 / np.pi))


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        dt = (1.0 - t * t) * dinner
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _track(out, (a,), bwd)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _track(out, (a,), bwd)


def minimum_const(a, c: float) -> Tensor:
    a = _as_tensor(a)
    out = np.minimum(a.data, np.float32(c))
    passed = (a.data < c).astype(np.float32)

    def bwd(g):
        return (g * passed,)

    return _track(out, (a,), bwd)


def maximum_const(a, c: float) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, np.float32(c))
    passed = (a.data > c).astype(np.float32)

    def bwd(g):
        return (g * passed,)

    return _track(out, (a,), bwd)


def l2_normalize(a, eps: float = 1e-12) -> Tensor:
    """Row-wise L2 normalization over the last axis; zero rows are rejected."""
    a = _as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    if np.any(norm < 1e-8):
        raise ValueError("l2_normalize: zero-norm row has undefined direction")
    out = a.data / (norm + eps)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - out * dot) / (norm + eps),)

    return _track(out, (a,), bwd)


def embedding(table, ids) -> Tensor:
    """Lookup rows of an (V, d) table by an integer id array of any shape."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: id out of range for table with {table.shape[0]} rows"
        )
    out = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _track(out, (table,), bwd)


def cross_entropy(logits, targets) -> Tensor:
    """Mean cross entropy of (N, V) logits against integer targets.

    Fused log-softmax + NLL; gradient is (softmax - onehot) / N.
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: expected (N, V) logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: targets shape {targets.shape} vs logits {logits.shape}"
        )
    n = logits.shape[0]
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    # -inf rows of masked-out candidates are fine; NaN is not
    if np.any(np.isnan(x)):
        raise NonFiniteError("cross_entropy: NaN logits")
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=-1))
    nll = lse - x[np.arange(n), targets]
    out = np.float32(nll.mean())
    probs = np.exp(x - lse[:, None])

    def bwd(g):
        gl = probs.copy()
        gl[np.arange(n), targets] -= 1.0
        return (gl * (np.asarray(g, dtype=np.float32) / n),)

    return _track(out, (logits,), bwd)


def dropout(a, p: float, rng: np.random.Generator, train: bool = True) -> Tensor:
    """Inverted dropout; identity when train is False or p == 0."""
    a = _as_tensor(a)
    if not train or p <= 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p={p} outside [0, 1)")
    keep = (rng.random(a.shape) >= p).astype(np.float32) / np.float32(1.0 - p)
    out = a.data * keep

    def bwd(g):
        return (g * keep,)

    return _track(out, (a,), bwd)


def backward(root: Tensor, leaves=None) -> dict:
    """Accumulate gradients of a scalar root into every reachable node.

    Returns a mapping from leaf to gradient array when `leaves` is given;
    leaves the root never touched get zeros.
    """
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._bwd is None or node.grad is None:
            continue
        grads = node._bwd(node.grad)
        for p, g in zip(node._parents, grads):
            if p.requires_grad and g is not None:
                p._accumulate(g)
    if leaves is None:
        return {}
    out = {}
    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        out[id(leaf)] = leaf.grad
    return out
