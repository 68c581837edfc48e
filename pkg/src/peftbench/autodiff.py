"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every operation returns a new :class:`Tensor` holding a reference to its
inputs and a closure that pushes the output gradient back into them.
:meth:`Tensor.backward` linearises the graph into a tape (topological
order) and replays it in reverse, so each recorded operation runs its
gradient rule exactly once.

Broadcasting is deliberately narrow: besides equal shapes, the only implicit
form is a vector applied along the last axis (``scale_by_vector`` and
``add_vector``). Anything else has to go through :func:`expand`.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating point precision."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation and decoding)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- tape ----------------------------------------------------------
    def tape(self) -> list["Tensor"]:
        """Operations reachable from this tensor in topological order."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return order

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every reachable tensor that requires it."""
        if not self.requires_grad:
            return
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(self.tape()):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self):
        return tsum(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    need = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = need
    if need:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible")


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _result(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _result(a.data * b.data, (a, b), "mul", backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)

    def backward(g):
        x._accumulate(g * c)

    return _result(x.data * c, (x,), "scale", backward)


def _check_vector(x: Tensor, v: Tensor, op: str) -> None:
    if v.data.ndim != 1 or x.data.ndim < 1 or v.shape[0] != x.shape[-1]:
        raise ShapeError(f"{op}: vector of shape {v.shape} cannot broadcast over last axis of {x.shape}")


def scale_by_vector(x: Tensor, v: Tensor) -> Tensor:
    """``x * v`` with ``v`` broadcast along the last axis of ``x``."""
    x, v = _wrap(x), _wrap(v)
    _check_vector(x, v, "scale_by_vector")

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * v.data)
        if v.requires_grad:
            v._accumulate((g * x.data).reshape(-1, v.shape[0]).sum(axis=0))

    return _result(x.data * v.data, (x, v), "scale_by_vector", backward)


def add_vector(x: Tensor, v: Tensor) -> Tensor:
    """``x + v`` with ``v`` broadcast along the last axis of ``x``."""
    x, v = _wrap(x), _wrap(v)
    _check_vector(x, v, "add_vector")

    def backward(g):
        if x.requires_grad:
            x._accumulate(g)
        if v.requires_grad:
            v._accumulate(g.reshape(-1, v.shape[0]).sum(axis=0))

    return _result(x.data + v.data, (x, v), "add_vector", backward)


def add_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Add a non-differentiable array (e.g. an attention mask)."""
    res = x.data + c
    if res.shape != x.shape:
        raise ShapeError(f"add_const: constant of shape {np.shape(c)} would change shape {x.shape}")

    def backward(g):
        x._accumulate(g)

    return _result(res.astype(x.data.dtype, copy=False), (x,), "add_const", backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return _result(x.data * mask, (x,), "relu", backward)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""

    def backward(g):
        x._accumulate(_kernels.gelu_backward(x.data, g))

    return _result(_kernels.gelu_forward(x.data), (x,), "gelu", backward)


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch by name: add, mul, relu, gelu, scale-by-vector."""
    table = {
        "add": add,
        "mul": mul,
        "relu": relu,
        "gelu": gelu,
        "scale-by-vector": scale_by_vector,
    }
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


# --------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), "reshape", backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        x._accumulate(np.transpose(g, inverse))

    return _result(np.transpose(x.data, axes), (x,), "transpose", backward)


def expand(x: Tensor, leading: Sequence[int]) -> Tensor:
    """Broadcast ``x`` to ``(*leading, *x.shape)``; backward sums the new axes."""
    leading = tuple(int(s) for s in leading)
    n = len(leading)

    def backward(g):
        x._accumulate(g.sum(axis=tuple(range(n))) if n else g)

    data = np.broadcast_to(x.data, leading + x.shape)
    return _result(data, (x,), "expand", backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    nd = tensors[0].data.ndim
    axis = axis % nd
    for t in tensors[1:]:
        other = tuple(s for i, s in enumerate(t.shape) if i != axis)
        ref = tuple(s for i, s in enumerate(tensors[0].shape) if i != axis)
        if t.data.ndim != nd or other != ref:
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * nd
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table; output shape ``ids.shape + (d,)``."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    vocab, d = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range [0, {vocab})")

    def backward(g):
        acc = np.zeros_like(table.data)
        _kernels.scatter_add_rows(acc, ids.reshape(-1), g.reshape(-1, d))
        table._accumulate(acc)

    return _result(table.data[ids], (table,), "embedding", backward)


def take_rows(x: Tensor, idx) -> Tensor:
    """Select rows of a 2-D tensor (e.g. non-padding positions)."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-D tensor, got {x.shape}")

    def backward(g):
        acc = np.zeros_like(x.data)
        _kernels.scatter_add_rows(acc, idx, g)
        x._accumulate(acc)

    return _result(x.data[idx], (x,), "take_rows", backward)


# --------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported forms: ``[m,k] @ [k,n]``, ``[...,m,k] @ [k,n]`` (shared right
    operand) and ``[...,m,k] @ [...,k,n]`` with identical leading axes.
    """
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    shared = b.data.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes of {a.shape} and {b.shape} differ")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if shared:
                k = a.shape[-1]
                b._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
            else:
                b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _result(a.data @ b.data, (a, b), "matmul", backward)


def tsum(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _result(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), "sum", backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        x._accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _result(p, (x,), "softmax", backward)


def rmsnorm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale by reciprocal root-mean-square of the last axis, times ``weight``."""
    x, weight = _wrap(x), _wrap(weight)
    _check_vector(x, weight, "rmsnorm")
    d = x.shape[-1]
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    out, inv = _kernels.rmsnorm_forward(x2, weight.data, eps)

    def backward(g):
        gx, gw = _kernels.rmsnorm_backward(x2, weight.data, inv, np.ascontiguousarray(g.reshape(-1, d)))
        if x.requires_grad:
            x._accumulate(gx.reshape(x.shape))
        if weight.requires_grad:
            weight._accumulate(gw)

    return _result(out.reshape(x.shape), (x, weight), "rmsnorm", backward)


def softmax_cross_entropy(logits: Tensor, targets, normalizer: float | None = None) -> Tensor:
    """Summed negative log-likelihood divided by ``normalizer`` (default: batch size).

    ``logits`` is ``[batch, vocab]``; the max-subtraction keeps the
    log-sum-exp finite for large logits.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [batch, vocab] logits, got {logits.shape}")
    n, vocab = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match batch {n}")
    if n and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target id out of range [0, {vocab})")
    norm = float(n if normalizer is None else normalizer)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    nll = lse - z[rows, targets]
    loss = np.asarray(nll.sum() / norm, dtype=logits.data.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        logits._accumulate(p * (g / norm))

    return _result(loss, (logits,), "softmax_cross_entropy", backward)


# --------------------------------------------------------------------------
# finite differences


def numerical_gradient(fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of the scalar ``fn()`` w.r.t. ``t.data``."""
    grad = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = float(fn().data.sum())
        flat[i] = old - eps
        down = float(fn().data.sum())
        flat[i] = old
        grad.reshape(-1)[i] = (up - down) / (2 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """``max |a - n| / max(|a|, |n|, floor)``.

    The floor stops entries whose true gradient is ~0 from dividing
    finite-difference noise by nothing.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    err = np.abs(analytic - numeric) / denom
    return float(err.max()) if err.size else 0.0


def gradcheck(fn: Callable[[], Tensor], inputs: Iterable[Tensor], eps: float = 1e-4) -> float:
    """Worst relative error between backward and finite differences over ``inputs``."""
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    out = fn()
    tsum(out).backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, max_relative_error(analytic, numerical_gradient(fn, t, eps)))
    return worst
