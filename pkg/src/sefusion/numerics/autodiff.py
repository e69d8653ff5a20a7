"""Tape-based reverse-mode differentiation over dense 2-D matrices.

Every value is a 2-D numpy array (rows are samples, row-major semantics).
Operations build a graph of :class:`Tensor` nodes; :func:`backward` walks it
in reverse topological order and writes ``d loss / d param`` into each
reachable :class:`Parameter`.

Only the handful of operations the fusion model needs are provided.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ShapeError, UsageError

DTYPES = {"float32": np.float32, "float64": np.float64}


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise UsageError(f"unknown precision {precision!r}; expected one of {sorted(DTYPES)}") from None
    return np.dtype(precision)


def as_matrix(x, dtype=None) -> np.ndarray:
    """Coerce ``x`` to a 2-D float array, promoting 1-D input to a single row."""
    arr = np.asarray(x, dtype=dtype if dtype is not None else None)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got array of shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


def _shape(x) -> str:
    r, c = x.shape
    return f"({r}x{c})"


class Tensor:
    """A node in the computation trace."""

    __slots__ = ("value", "grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, value, parents: Sequence["Tensor"] = (), backward: Callable | None = None, name: str | None = None):
        self.value = as_matrix(value)
        self.grad = None
        self.name = name
        self._parents = tuple(parents)
        self._backward = backward
        self._consumed = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    @property
    def dtype(self):
        return self.value.dtype

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        if self.value.size != 1:
            raise UsageError(f"item() needs a 1x1 tensor, got {_shape(self.value)}")
        return float(self.value[0, 0])

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"{type(self).__name__}{label}{_shape(self.value)}"


class Parameter(Tensor):
    """A trainable leaf; ``grad`` always has the shape of ``value``."""

    __slots__ = ()

    def __init__(self, value, name: str):
        super().__init__(np.ascontiguousarray(as_matrix(value)), name=name)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def copy(self) -> "Parameter":
        return Parameter(self.value.copy(), self.name)


def constant(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(as_matrix(x, dtype))


def _lift(*xs) -> list[Tensor]:
    """Wrap raw arrays as constants in the dtype of the first real Tensor operand."""
    dtype = next((x.dtype for x in xs if isinstance(x, Tensor)), None)
    return [x if isinstance(x, Tensor) else Tensor(as_matrix(x, dtype)) for x in xs]


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _lift(a, b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul: cannot multiply {_shape(a.value)} by {_shape(b.value)}")
    av, bv = a.value, b.value

    def back(g):
        return g @ bv.T, av.T @ g

    return Tensor(av @ bv, (a, b), back)


def add(a, b) -> Tensor:
    """Elementwise sum; a (1 x k) operand broadcasts over the rows of the other."""
    a, b = _lift(a, b)
    if a.shape != b.shape and not (a.cols == b.cols and 1 in (a.rows, b.rows)):
        raise ShapeError(f"add: shapes {_shape(a.value)} and {_shape(b.value)} do not broadcast")
    ar, br = a.rows, b.rows

    def back(g):
        ga = g if g.shape[0] == ar else g.sum(axis=0, keepdims=True)
        gb = g if g.shape[0] == br else g.sum(axis=0, keepdims=True)
        return ga, gb

    return Tensor(a.value + b.value, (a, b), back)


def scale(x, c: float) -> Tensor:
    (x,) = _lift(x)
    c = x.dtype.type(c)
    return Tensor(x.value * c, (x,), lambda g: (g * c,))


def concat_cols(*xs) -> Tensor:
    """Horizontal concatenation; columns keep argument order."""
    xs = _lift(*xs)
    rows = {x.rows for x in xs}
    if len(rows) != 1:
        raise ShapeError("concat_cols: row mismatch " + " vs ".join(_shape(x.value) for x in xs))
    edges = np.cumsum([0] + [x.cols for x in xs])

    def back(g):
        return tuple(g[:, lo:hi] for lo, hi in zip(edges[:-1], edges[1:]))

    return Tensor(np.concatenate([x.value for x in xs], axis=1), xs, back)


def reshape(x, rows: int, cols: int) -> Tensor:
    """Row-major reinterpretation: flat element k lands at (k // cols, k % cols)."""
    (x,) = _lift(x)
    if x.rows * x.cols != rows * cols:
        raise ShapeError(f"reshape: cannot view {_shape(x.value)} as ({rows}x{cols})")
    r0, c0 = x.shape
    return Tensor(x.value.reshape(rows, cols), (x,), lambda g: (g.reshape(r0, c0),))


def relu(x) -> Tensor:
    (x,) = _lift(x)
    mask = x.value > 0
    return Tensor(np.where(mask, x.value, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1 / (1 + e), e / (1 + e)).astype(v.dtype)
    # keep saturated outputs strictly inside (0, 1)
    info = np.finfo(v.dtype)
    return np.clip(out, info.tiny, 1 - info.epsneg)


def sigmoid(x) -> Tensor:
    (x,) = _lift(x)
    s = _sigmoid(x.value)
    return Tensor(s, (x,), lambda g: (g * s * (1 - s),))


def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(v: np.ndarray) -> np.ndarray:
    shifted = v - v.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(x) -> Tensor:
    """Row-wise softmax with max subtraction."""
    (x,) = _lift(x)
    p = _softmax(x.value)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return Tensor(p, (x,), back)


def affine(x, w, b=None) -> Tensor:
    """``x @ W`` plus an optional (1 x out) bias broadcast over rows."""
    x, w = _lift(x, w)
    if x.cols != w.rows:
        raise ShapeError(f"affine: input {_shape(x.value)} does not match weight {_shape(w.value)}")
    out = matmul(x, w)
    if b is None:
        return out
    (b,) = _lift(b)
    if b.shape != (1, w.cols):
        raise ShapeError(f"affine: bias {_shape(b.value)} must be (1x{w.cols})")
    return add(out, b)


def total(x) -> Tensor:
    """Sum of all elements as a 1x1 tensor."""
    (x,) = _lift(x)
    shape = x.shape
    return Tensor(np.array([[x.value.sum()]], dtype=x.dtype), (x,), lambda g: (np.full(shape, g[0, 0], dtype=g.dtype),))


def mix_rows(s, x) -> Tensor:
    """Per-sample weighted sum of row blocks.

    For each sample n, row ``x[n]`` is viewed row-major as an
    (m x D/m) matrix and multiplied on the left by ``s[n]`` (1 x m).
    A single-sample call equals ``matmul(s, reshape(x, m, D/m))``.
    """
    s, x = _lift(s, x)
    n, m = s.shape
    if x.rows != n:
        raise ShapeError(f"mix_rows: weights {_shape(s.value)} and features {_shape(x.value)} differ in rows")
    if x.cols % m:
        raise ShapeError(f"mix_rows: width {x.cols} is not divisible by {m} modalities")
    blocks = x.value.reshape(n, m, x.cols // m)
    sv = s.value

    def back(g):
        gs = np.einsum("nj,nkj->nk", g, blocks)
        gx = (sv[:, :, None] * g[:, None, :]).reshape(n, -1)
        return gs, gx

    return Tensor(np.einsum("nk,nkj->nj", sv, blocks), (s, x), back)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    (logits,) = _lift(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"cross entropy: {labels.shape[0]} labels for {n} rows of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise UsageError(f"cross entropy: label out of range [0, {c})")
    logp = _log_softmax(logits.value)
    loss = -logp[np.arange(n), labels].mean()

    def back(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1
        return (grad * (g[0, 0] / n),)

    return Tensor(np.array([[loss]], dtype=logits.dtype), (logits,), back)


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
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
        stack.extend((p, False) for p in node._parents if id(p) not in seen)
    return order


def backward(loss: Tensor, params: Iterable[Parameter] | None = None) -> dict[str, np.ndarray]:
    """Populate ``grad`` on every Parameter reachable from the scalar ``loss``.

    Gradients of reachable parameters (and of any extra ``params`` passed in)
    are zeroed first, so the result is exactly ``d loss / d param``. The trace
    is consumed: intermediate nodes drop their links and ``loss`` cannot be
    differentiated twice.
    """
    if not isinstance(loss, Tensor):
        raise UsageError("backward needs a Tensor produced by a forward pass")
    if loss.shape != (1, 1):
        raise UsageError(f"backward needs a scalar (1x1) terminal, got {_shape(loss.value)}")
    if loss._consumed:
        raise UsageError("this trace was already consumed by an earlier backward call")

    order = _topological(loss)
    reached = [n for n in order if isinstance(n, Parameter)]
    requested = list(params) if params is not None else []
    for p in reached + requested:
        p.zero_grad()

    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
            continue
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg

    for node in order:
        if not isinstance(node, Parameter):
            node._parents = ()
            node._backward = None
    loss._consumed = True

    out = {p.name: p.grad for p in reached}
    out.update((p.name, p.grad) for p in requested)
    return out
