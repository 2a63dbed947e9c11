"""Small dense-tensor engine with reverse-mode differentiation.

Tensors wrap float64 numpy arrays.  Every op records its parents and a
closure mapping the output gradient to one gradient per parent; `backward`
walks the resulting DAG once in reverse topological order.  Gradients are
returned in a dict keyed by tensor identity, so tensors themselves stay
immutable and can be shared across independent tapes.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "tensor",
    "constant",
    "matmul",
    "add",
    "sub",
    "hadamard",
    "scale",
    "relu",
    "elu",
    "tanh",
    "elementwise",
    "row_softmax",
    "sum_all",
    "mean_rows",
    "inner",
    "reshape",
    "transpose",
    "gather_rows",
    "concat_cols",
    "dropout",
    "cross_entropy",
    "backward",
    "grad",
    "SGD",
    "Adam",
]


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or Inf."""


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {where}")


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, _op="leaf"):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, _op)
        self.data = arr
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self._op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return hadamard(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = True) -> Tensor:
    """Trainable leaf."""
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, _op=op)
    return Tensor(data, requires_grad=False, _op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- linear ops


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.data, b.data

    def bw(g):
        return g @ bv.T, av.T @ g

    return _make(av @ bv, (a, b), bw, "matmul")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}") from exc
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ValueError(f"sub shape mismatch: {a.shape} - {b.shape}") from exc
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _make(out, (a, b), bw, "sub")


def hadamard(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ValueError(f"hadamard shape mismatch: {a.shape} * {b.shape}") from exc
    av, bv = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _make(out, (a, b), bw, "hadamard")


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def bw(g):
        return (g * c,)

    return _make(a.data * c, (a,), bw, "scale")


# ------------------------------------------------------------- pointwise ops


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0.0), (a,), bw, "relu")


def elu(a, alpha: float = 1.0) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    neg = alpha * np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg)
    deriv = np.where(x > 0, 1.0, neg + alpha)

    def bw(g):
        return (g * deriv,)

    return _make(out, (a,), bw, "elu")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), bw, "tanh")


_UNARY = {"elu": elu, "relu": relu, "tanh": tanh}
_BINARY = {"add": add, "sub": sub, "hadamard": hadamard}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name: unary elu/relu/tanh, binary add/sub/hadamard, or
    scale (b is the python scalar)."""
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind in _BINARY:
        return _BINARY[kind](a, b)
    if kind == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ----------------------------------------------------------------- reductions


def row_softmax(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("row_softmax expects a matrix")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (a,), bw, "row_softmax")


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.array(a.data.sum()), (a,), bw, "sum")


def mean_rows(a) -> Tensor:
    """Column-wise mean over the rows of a matrix, giving a vector."""
    a = _as_tensor(a)
    n = a.shape[0]
    if n == 0:
        raise ValueError("mean over zero rows")
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make(a.data.mean(axis=0), (a,), bw, "mean_rows")


def inner(a, c) -> Tensor:
    """Frobenius inner product <a, c>; c may be a constant array."""
    a, c = _as_tensor(a), _as_tensor(c)
    if a.shape != c.shape:
        raise ValueError(f"inner shape mismatch: {a.shape} vs {c.shape}")
    av, cv = a.data, c.data

    def bw(g):
        return g * cv, g * av

    return _make(np.array(np.sum(av * cv)), (a, c), bw, "inner")


# ------------------------------------------------------------ shape handling


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape

    def bw(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _make(a.data.transpose(axes), (a,), bw, "transpose")


def gather_rows(a, idx) -> Tensor:
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw, "gather_rows")


def concat_cols(*parts) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    widths = np.cumsum([p.shape[1] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, widths, axis=1))

    return _make(np.concatenate([p.data for p in parts], axis=1), parts, bw, "concat_cols")


def dropout(a, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rate is 0 or rng is None (eval)."""
    a = _as_tensor(a)
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)

    def bw(g):
        return (g * keep,)

    return _make(a.data * keep, (a,), bw, "dropout")


def cross_entropy(logits, labels, mask=None) -> Tensor:
    """Mean softmax cross-entropy over the rows selected by `mask`."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(logits.shape[0]) if mask is None else np.flatnonzero(mask)
    if rows.size == 0:
        raise ValueError("cross_entropy over an empty mask")
    z = logits.data[rows]
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    y = labels[rows]
    loss = float(np.mean(logsum - z[np.arange(rows.size), y]))
    probs = np.exp(z - logsum[:, None])
    probs[np.arange(rows.size), y] -= 1.0
    probs /= rows.size
    shape = logits.shape

    def bw(g):
        out = np.zeros(shape)
        out[rows] = g * probs
        return (out,)

    return _make(np.array(loss), (logits,), bw, "cross_entropy")


# ------------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar `loss` for every tensor on the tape that
    requires grad, keyed by tensor."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    nodes: dict[int, Tensor] = {}
    if not loss.requires_grad:
        return {}
    for node in reversed(_topo_order(loss)):
        nodes[id(node)] = node
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            _check_finite(pg, f"backward of {node._op}")
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = np.asarray(pg, dtype=np.float64)
    return {nodes[k]: v for k, v in grads.items() if k in nodes}


def grad(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of `loss` w.r.t. `wrt`; zeros for tensors not on the tape."""
    table = backward(loss)
    return [table.get(t, np.zeros_like(t.data)) for t in wrt]


# ----------------------------------------------------------------- optimizers


class SGD:
    """Plain steps p := p - lr * (g + wd * p)."""

    def __init__(self, lr: float, weight_decay: float = 0.0):
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        out = []
        for p, g in zip(params, grads):
            if self.weight_decay:
                g = g + self.weight_decay * p
            out.append(p - self.lr * g)
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        pass


class Adam:
    """Adam with L2-style weight decay folded into the gradient."""

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            if self.weight_decay:
                g = g + self.weight_decay * p
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            out.append(p - self.lr * mhat / (np.sqrt(vhat) + self.eps))
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        if self.m is None:
            return {"t": np.array([0.0])}
        arrays = {"t": np.array([float(self.t)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            arrays[f"m{i}"] = m
            arrays[f"v{i}"] = v
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["t"][0])
        n = sum(1 for k in arrays if k.startswith("m"))
        if n == 0:
            self.m = self.v = None
            return
        self.m = [np.array(arrays[f"m{i}"]) for i in range(n)]
        self.v = [np.array(arrays[f"v{i}"]) for i in range(n)]


def make_optimizer(kind: str, lr: float, weight_decay: float = 0.0):
    if kind == "adam":
        return Adam(lr, weight_decay=weight_decay)
    if kind == "sgd":
        return SGD(lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")
