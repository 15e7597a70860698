"""Minimal dense tensors with reverse-mode differentiation on top of numpy.

Each op returns a new Tensor remembering its parents and a closure that
maps the output gradient to parent gradients. ``backward`` walks the
trace in reverse topological order and accumulates into leaf ``.grad``.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

from .errors import IndexOutOfRange, NonScalarLoss, ShapeMismatch

LN_EPS = 1e-12
DTYPES = {32: np.float32, 64: np.float64}


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None, _parents=(), _backward=None, op=""):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return mul(self, 1.0 / scalar)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (),
                  _backward=backward if needs else None, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op, *shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast shapes {shapes}") from None


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    _check_broadcast("add", a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    _check_broadcast("mul", a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,), "relu")


_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)

    def backward(g):
        return (g * (cdf + x * pdf)).astype(a.dtype, copy=False),

    return _make((x * cdf).astype(a.dtype, copy=False), (a,), backward, "gelu")


def masked_fill(a: Tensor, where: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``where`` is true by a constant (no gradient there)."""
    where = np.asarray(where, dtype=bool)
    _check_broadcast("masked_fill", a.shape, where.shape)
    keep = ~where

    def backward(g):
        return _unbroadcast(g * keep, a.shape),

    return _make(np.where(where, np.asarray(value, dtype=a.dtype), a.data), (a,), backward, "masked_fill")


# ---------------------------------------------------------------------------
# shape ops and reductions

def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def backward(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy(),
        return np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),

    return _make(a.data.sum(axis=axis), (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def take(a: Tensor, index: int, axis: int = -1) -> Tensor:
    """Select one slice along ``axis`` (the axis is dropped)."""
    ax = axis % a.data.ndim

    def backward(g):
        out = np.zeros_like(a.data)
        idx = [slice(None)] * a.data.ndim
        idx[ax] = index
        out[tuple(idx)] = g
        return out,

    return _make(np.take(a.data, index, axis=ax), (a,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    ax = axis % tensors[0].data.ndim
    for t in tensors[1:]:
        if t.data.ndim != tensors[0].data.ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.data.ndim) if i != ax
        ):
            raise ShapeMismatch(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


# ---------------------------------------------------------------------------
# linear algebra and NN ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    _check_broadcast("matmul", a.shape[:-2], b.shape[:-2])

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.data.ndim == 2:
            # fold leading dims so the weight gradient is one GEMM
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return y * (g - (g * y).sum(axis=axis, keepdims=True)),

    return _make(y, (a,), backward, "softmax")


def layer_norm(a: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply the optional affine."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = x.shape[-1]
    out = xhat
    parents = [a]
    if weight is not None:
        if weight.shape != (d,) or (bias is not None and bias.shape != (d,)):
            raise ShapeMismatch(f"layer_norm: affine shapes must be ({d},)")
        out = xhat * weight.data
        parents.append(weight)
    if bias is not None:
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        gx = g * weight.data if weight is not None else g
        ga = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [ga]
        lead = tuple(range(g.ndim - 1))
        if weight is not None:
            grads.append((g * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return _make(out, parents, backward, "layer_norm")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexOutOfRange(
            f"embedding: ids must lie in [0, {table.shape[0]}), got range [{ids.min()}, {ids.max()}]"
        )

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return gt,

    return _make(table.data[ids], (table,), backward, "embedding")


def dropout(a: Tensor, rate: float, train: bool, rng: "DropoutRNG | None" = None) -> Tensor:
    if not train or rate <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs a DropoutRNG")
    keep = (rng.uniform(a.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(a.dtype)
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row negative log-likelihood of ``targets`` under softmax(logits)."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeMismatch(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    n, c = logits.shape
    if n and (targets.min() < 0 or targets.max() >= c):
        raise IndexOutOfRange(f"cross_entropy: targets must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = lse - z[rows, targets]

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return p * g[:, None],

    return _make(loss, (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# randomness

class DropoutRNG:
    """Counter-based uniform stream: call ``k`` draws from Philox key (seed, k)."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed)
        self.counter = int(counter)

    def uniform(self, shape) -> np.ndarray:
        key = np.array([self.seed, self.counter], dtype=np.uint64)
        self.counter += 1
        return np.random.Generator(np.random.Philox(key=key)).random(shape)


# ---------------------------------------------------------------------------
# differentiation

def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every grad-requiring leaf."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise NonScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# finite-difference oracle

def _as_named(params) -> dict[str, Tensor]:
    if isinstance(params, Mapping):
        return dict(params)
    return {str(i): p for i, p in enumerate(params)}


def gradient_errors(f: Callable[[], Tensor], params, step: float = 1e-5) -> dict[str, float]:
    """Max relative error per parameter between analytic and central-difference gradients.

    ``f`` recomputes the scalar from the current parameter values; parameters
    are perturbed in place and restored.
    """
    named = _as_named(params)
    for p in named.values():
        p.grad = None
    backward(f())
    errors = {}
    for name, p in named.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(f().data)
            flat[i] = orig - step
            down = float(f().data)
            flat[i] = orig
            num = (up - down) / (2.0 * step)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
        errors[name] = worst
    return errors


def gradient_check(f: Callable[[], Tensor], params, step: float = 1e-5) -> float:
    errs = gradient_errors(f, params, step)
    return max(errs.values(), default=0.0)


def parameters_like(shapes: Iterable[tuple[int, ...]], rng: np.random.Generator, dtype=np.float64):
    return [Tensor(rng.standard_normal(s).astype(dtype), requires_grad=True) for s in shapes]
