"""Dense float64 tensor ops with reverse-mode differentiation.

The whole artifact computes on one value type: a float64 numpy array wrapped
in :class:`Tensor`. While gradients are enabled (the default), operations on
tensors that sit on a differentiable path are recorded on an acyclic graph;
``backward`` then accumulates d(root)/d(node) into each node's ``grad`` slot.
Inside :func:`no_grad` nothing is recorded and no gradient state is allocated.

Gradient slots accumulate with ``+=`` and must be cleared explicitly through
``zero_grads`` between backward passes; reuse without a reset raises.

Also here: :class:`Rng`, a seeded PCG64 generator every stochastic choice in
the artifact goes through, and :func:`finite_diff_check`, the central
difference oracle used to validate every analytic gradient.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GradientStateError(RuntimeError):
    """Gradient slots were reused without an explicit reset."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording. Ops inside allocate no gradient state."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 array plus its slot in the differentiation graph.

    ``data`` is the value (row-major numpy array). ``grad`` mirrors its shape,
    zero-initialized, for tensors created with ``requires_grad=True`` or
    produced from such tensors while recording; otherwise it stays ``None``.
    ``op`` and ``parents`` describe how the tensor was produced.
    """

    __slots__ = ("data", "grad", "op", "parents", "requires_grad",
                 "_backward_fn", "_grad_dirty")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward_fn=None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values produced by op '{op}'")
        self.data = arr
        self.op = op
        self.parents = parents
        self.requires_grad = bool(requires_grad)
        self._backward_fn = backward_fn
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._grad_dirty = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0
        self._grad_dirty = False

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and arrays coerce to constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, op: str, parents: tuple, backward_fn) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=parents,
                      backward_fn=backward_fn)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _result(a.data + b.data, "add", (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, "sub", (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, "mul", (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return (ga, gb)

    # non-finite results (e.g. division by zero) are rejected by the
    # Tensor constructor, so the numpy warning is redundant noise
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _result(out, "div", (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def bw(g):
        return (g @ b.data.T, a.data.T @ g)

    return _result(a.data @ b.data, "matmul", (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    return _result(a.data.T, "transpose", (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), "reshape", (a,),
                   lambda g: (g.reshape(old),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _result(a.data * mask, "relu", (a,), bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - y * y),)

    return _result(y, "tanh", (a,), bw)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def bw(g):
        return (g * y,)

    return _result(y, "exp", (a,), bw)


def log(a: Tensor) -> Tensor:
    def bw(g):
        return (g / a.data,)

    return _result(np.log(a.data), "log", (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)

    def bw(g):
        return (g * 0.5 / y,)

    return _result(y, "sqrt", (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    def bw(g):
        return (np.full(a.shape, float(g)),)

    return _result(a.data.sum(), "sum_all", (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    n = a.size

    def bw(g):
        return (np.full(a.shape, float(g) / n),)

    return _result(a.data.mean(), "mean_all", (a,), bw)


def row_sums(a: Tensor) -> Tensor:
    """Sum along the last axis of a matrix, keeping a (m, 1) column."""
    if a.data.ndim != 2:
        raise ShapeError(f"row_sums expects a matrix, got shape {a.shape}")

    def bw(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(a.data.sum(axis=1, keepdims=True), "row_sums", (a,), bw)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"concat_rows width mismatch: {a.shape} vs {b.shape}")
    na = a.shape[0]

    def bw(g):
        return (g[:na], g[na:])

    return _result(np.concatenate([a.data, b.data], axis=0), "concat_rows", (a, b), bw)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols height mismatch: {a.shape} vs {b.shape}")
    na = a.shape[1]

    def bw(g):
        return (g[:, :na], g[:, na:])

    return _result(np.concatenate([a.data, b.data], axis=1), "concat_cols", (a, b), bw)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"slice_rows expects a matrix, got shape {a.shape}")

    def bw(g):
        out = np.zeros(a.shape)
        out[start:stop] = g
        return (out,)

    return _result(a.data[start:stop].copy(), "slice_rows", (a,), bw)


def take_row(a: Tensor, index: int) -> Tensor:
    """Row ``index`` of a matrix as a 1-D vector."""
    if a.data.ndim != 2:
        raise ShapeError(f"take_row expects a matrix, got shape {a.shape}")
    if not 0 <= index < a.shape[0]:
        raise IndexError(f"row {index} out of range for shape {a.shape}")

    def bw(g):
        out = np.zeros(a.shape)
        out[index] = g
        return (out,)

    return _result(a.data[index].copy(), "take_row", (a,), bw)


def as_row(a: Tensor) -> Tensor:
    """View a 1-D vector as a (1, n) matrix."""
    return reshape(a, (1, a.size))


def gather_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Rows of an embedding table; gradients scatter-add back."""
    idx = np.asarray(ids, dtype=np.intp)
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows expects a matrix table, got {table.shape}")

    def bw(g):
        out = np.zeros(table.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _result(table.data[idx], "gather_rows", (table,), bw)


# ---------------------------------------------------------------------------
# softmax-family ops


def row_softmax(a: Tensor) -> Tensor:
    """Softmax along each row, computed with max-subtraction."""
    if a.data.ndim != 2:
        raise ShapeError(f"row_softmax expects a matrix, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _result(y, "row_softmax", (a,), bw)


def cross_entropy_logits(logits: Tensor, target_index: int) -> Tensor:
    """Negative log softmax probability of ``target_index``. 1-D logits."""
    if logits.data.ndim != 1:
        raise ShapeError(f"cross_entropy_logits expects a vector, got {logits.shape}")
    n = logits.size
    if not 0 <= target_index < n:
        raise IndexError(f"target index {target_index} out of range for {n} logits")
    z = logits.data
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())

    def bw(g):
        p = np.exp(z - lse)
        p[target_index] -= 1.0
        return (g * p,)

    return _result(lse - z[target_index], "cross_entropy_logits", (logits,), bw)


def binary_cross_entropy_logit(logit: Tensor, label: float) -> Tensor:
    """Stable BCE of sigmoid(logit) against a 0/1 label. Scalar logit."""
    if logit.size != 1:
        raise ShapeError(f"binary_cross_entropy_logit expects a scalar, got {logit.shape}")
    z = float(logit.data)
    value = max(z, 0.0) - z * label + np.log1p(np.exp(-abs(z)))
    sig = 1.0 / (1.0 + np.exp(-z)) if z >= 0 else np.exp(z) / (1.0 + np.exp(z))

    def bw(g):
        return (np.full(logit.shape, float(g) * (sig - label)),)

    return _result(np.asarray(value), "bce_logit", (logit,), bw)


def layer_norm_rows(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row layer normalization with learned gain and bias (1-D, width n)."""
    if a.data.ndim != 2:
        raise ShapeError(f"layer_norm_rows expects a matrix, got shape {a.shape}")
    mu = a.data.mean(axis=1, keepdims=True)
    var = a.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    y = xhat * gain.data + bias.data

    def bw(g):
        gh = g * gain.data
        m1 = gh.mean(axis=1, keepdims=True)
        m2 = (gh * xhat).mean(axis=1, keepdims=True)
        ga = (gh - m1 - xhat * m2) * inv
        return (ga, (g * xhat).sum(axis=0), g.sum(axis=0))

    return _result(y, "layer_norm_rows", (a, gain, bias), bw)


# ---------------------------------------------------------------------------
# small composites


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two 1-D vectors."""
    return sum_all(mul(a, b))


def l2_norm(a: Tensor) -> Tensor:
    return sqrt(sum_all(mul(a, a)))


def l2_normalize_rows(a: Tensor) -> Tensor:
    return div(a, sqrt(row_sums(mul(a, a))))


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of two 1-D vectors; caller guards zero vectors."""
    return div(dot(a, b), mul(l2_norm(a), l2_norm(b)))


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Tensor) -> list:
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # inputs before consumers


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(node) into every reachable grad slot.

    ``root`` must be scalar. Grad slots touched by a previous backward must
    be reset (``zero_grads``) first; silent accumulation across passes is an
    error by design.
    """
    if root.size != 1:
        raise ShapeError(f"backward requires a scalar root, got shape {root.shape}")
    if root._grad_dirty:
        raise GradientStateError(
            "backward already ran through this root; reset gradients first")
    if not root.requires_grad:
        return
    order = _toposort(root)
    touched = {id(root)}
    if root.grad is not None and root.grad.any():
        raise GradientStateError("root gradient is stale; call zero_grads first")
    root.grad = np.ones_like(root.data)
    root._grad_dirty = True
    for node in reversed(order):
        if node._backward_fn is None or node.grad is None:
            continue
        grads = node._backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if id(parent) not in touched:
                if parent._grad_dirty:
                    raise GradientStateError(
                        f"stale gradient on tensor from op '{parent.op}'; "
                        "call zero_grads before backward")
                touched.add(id(parent))
                parent._grad_dirty = True
            parent.grad += g


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      eps: float = 1e-5) -> float:
    """Max relative error between f's autodiff gradient and central differences.

    ``f`` must be a deterministic scalar-valued function. Relative error uses
    the denominator max(|analytic|, |numeric|, 1e-8) per element.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    backward(out)
    analytic = leaf.grad.copy()

    flat = x.data.reshape(-1).copy()
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(Tensor(flat.reshape(x.shape))).data)
            flat[i] = orig - eps
            lo = float(f(Tensor(flat.reshape(x.shape))).data)
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * eps)
    numeric = numeric.reshape(x.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())


# ---------------------------------------------------------------------------
# seeded randomness


class Rng:
    """Deterministic PCG64 stream; one seed fixes every draw bit-for-bit."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._g = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._g.standard_normal(shape) * scale

    def truncated_normal(self, shape, scale: float = 1.0) -> np.ndarray:
        """Normal draws redrawn beyond two standard units, then scaled."""
        x = self._g.standard_normal(shape)
        bad = np.abs(x) > 2.0
        while bad.any():
            x[bad] = self._g.standard_normal(int(bad.sum()))
            bad = np.abs(x) > 2.0
        return x * scale

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._g.uniform(low, high, shape)

    def integer(self, n: int) -> int:
        """Uniform draw from 0..n-1."""
        return int(self._g.integers(0, n))

    def choice(self, n: int, p=None) -> int:
        return int(self._g.choice(n, p=p))

    def permutation(self, n: int) -> np.ndarray:
        return self._g.permutation(n)

    def shuffled(self, items: Sequence) -> list:
        idx = self._g.permutation(len(items))
        return [items[i] for i in idx]

    def child(self) -> "Rng":
        """An independent stream derived deterministically from this one."""
        return Rng(int(self._g.integers(0, 2**63 - 1)))
