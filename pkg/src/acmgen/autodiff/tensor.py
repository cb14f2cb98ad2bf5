"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every primitive returns a new :class:`Tensor`. When grad mode is on and any
input requires a gradient, the output keeps references to its inputs and a
closure mapping the output gradient to input gradients. :func:`backward`
orders the reachable graph into a :class:`Tape` and replays it in reverse.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels as K

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible operand shapes."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
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
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return tsum(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.id = next(_ids)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Tape and backward
# ---------------------------------------------------------------------------


class Tape:
    """Topologically ordered record of the graph feeding one output.

    ``nodes[i]`` never depends on ``nodes[j]`` for ``j > i``. Each entry is a
    ``(node_id, op, input_ids)`` view in :attr:`records`.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and p.id not in seen:
                    stack.append((p, False))
        return cls(order)

    @property
    def records(self) -> list[tuple[int, str, tuple[int, ...]]]:
        return [(n.id, n.op, tuple(p.id for p in n._parents)) for n in self.nodes]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every reachable leaf that requires a gradient.

    Gradients accumulate into existing ``.grad`` buffers. Returns the tape
    that was replayed.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_output(loss)
    if not loss.requires_grad:
        return tape
    grads: dict[int, np.ndarray] = {loss.id: np.ones(())}
    for node in reversed(tape.nodes):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(p.id)
            grads[p.id] = pg if prev is None else prev + pg
    return tape


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(g, sb) if b.requires_grad else None)

    return _node(a.data + b.data, (a, b), bw, "add")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    _broadcast_shape("mul", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(g * b.data, sa) if a.requires_grad else None,
                _unbroadcast(g * a.data, sb) if b.requires_grad else None)

    return _node(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    return _node(a.data * s, (a,), lambda g: (g * s,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    ``b`` may be 2D and is then shared across all leading axes of ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch shapes differ {a.shape} and {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` as a single node; ``w`` is ``[d_in, d_out]``."""
    if x.shape[-1] != w.shape[0] or w.ndim != 2:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match {w.shape}")
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out += b.data
    out_shape = x.shape[:-1] + (w.shape[1],)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out.reshape(out_shape), parents, bw, "linear")


def softmax(a: Tensor, causal: bool = False) -> Tensor:
    """Softmax over the last axis.

    ``causal=True`` requires square trailing axes and masks keys after the
    query position (their probability is exactly 0).
    """
    if a.ndim < 1:
        raise ShapeError("softmax needs at least one axis")
    shape = a.shape
    v = shape[-1]
    if causal and (a.ndim < 2 or shape[-2] != v):
        raise ShapeError(f"causal softmax needs square trailing axes, got {shape}")
    y = K.softmax_fwd(np.ascontiguousarray(a.data.reshape(-1, v)), v if causal else 0)

    def bw(g):
        return (K.softmax_bwd(y, np.ascontiguousarray(g.reshape(-1, v))).reshape(shape),)

    return _node(y.reshape(shape), (a,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis then apply ``gamma * xhat + beta``.

    A zero-variance row normalises to zeros.
    """
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs input {x.shape}")
    shape = x.shape
    y, xhat, rstd = K.layernorm_fwd(np.ascontiguousarray(x.data.reshape(-1, d)),
                                    gamma.data, beta.data, eps)

    def bw(g):
        gx, gg, gb = K.layernorm_bwd(np.ascontiguousarray(g.reshape(-1, d)), xhat, rstd, gamma.data)
        return gx.reshape(shape), gg, gb

    return _node(y.reshape(shape), (x, gamma, beta), bw, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data

    def bw(g):
        return (K.gelu_bwd(xd, g),)

    return _node(K.gelu_fwd(xd), (x,), bw, "gelu")


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]``; ``ids`` is an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    n = weight.shape[0]
    if weight.ndim != 2:
        raise ShapeError(f"embedding weight must be 2D, got {weight.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding ids out of range [0, {n})")
    flat = np.ascontiguousarray(ids.reshape(-1))

    def bw(g):
        return (K.embedding_bwd(flat, np.ascontiguousarray(g.reshape(-1, weight.shape[1])), n),)

    return _node(weight.data[ids], (weight,), bw, "embedding")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from None
    return _node(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Iterable[int] | None = None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    src = a.shape

    def bw(g):
        out = np.zeros(src)
        np.add.at(out, idx, g)
        return (out,)

    return _node(np.array(a.data[idx]), (a,), bw, "getitem")


def tsum(a: Tensor) -> Tensor:
    src = a.shape
    return _node(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, src).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    return scale(tsum(a), 1.0 / a.size)


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def cross_entropy_masked(logits: Tensor, targets, mask, normalizer: float | None = None) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over positions with ``mask=1``.

    ``logits`` is ``[..., V]``; ``targets`` and ``mask`` match its leading
    shape. Non-binary masks act as per-position weights. ``normalizer``
    replaces the default divisor ``mask.sum()``. Raises
    ``ValueError("empty supervision window")`` when the mask is all zero.
    """
    v = logits.shape[-1]
    lead = logits.shape[:-1]
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.float64)
    if targets.shape != lead or mask.shape != lead:
        raise ShapeError(
            f"cross_entropy_masked: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}")
    count = float(mask.sum())
    if count == 0.0:
        raise ValueError("empty supervision window")
    if normalizer is not None:
        count = float(normalizer)
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"targets out of range [0, {v})")
    t = np.ascontiguousarray(targets.reshape(-1))
    m = np.ascontiguousarray(mask.reshape(-1))
    total, probs = K.xent_fwd(np.ascontiguousarray(logits.data.reshape(-1, v)), t, m)

    def bw(g):
        return (K.xent_bwd(probs, t, m, float(g) / count).reshape(logits.shape),)

    return _node(np.array(total / count), (logits,), bw, "cross_entropy")
