"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive takes :class:`Tensor` operands and returns a new
:class:`Tensor`. When a :class:`Tape` is active (``with Tape() as tape:``)
and any operand requires gradients, the primitive records a node holding a
vector-Jacobian closure; ``tape.backward(loss)`` then walks the nodes in
reverse and accumulates ``.grad`` on the leaves.

Implicit broadcasting is deliberately narrow: operands of an elementwise op
must have equal shapes, or one of them must be a 0-d scalar, or one shape
must be a trailing suffix of the other (a row vector against a matrix, a
per-head matrix against a batch of matrices). Everything else raises
:class:`~linear_moe.errors.ShapeError`; use :func:`broadcast_to` or
:func:`scale_rows` to be explicit.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError, TapeError

DEFAULT_DTYPE = np.float64


class Tensor:
    """An immutable n-dimensional float array that may take part in a tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape_id", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.flags.writeable:
            arr = arr.copy()
            arr.flags.writeable = False
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape_id: int | None = None
        self.name = name

    # -- introspection -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def tolist(self):
        return self.data.tolist()

    @classmethod
    def _owned(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._tape_id = None
        t.name = None
        return t

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
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
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return swap_last(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


# ----------------------------------------------------------------------
# Tape
# ----------------------------------------------------------------------
@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()
_tape_counter = iter(range(1, 1 << 62))


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    A tape is single-threaded: it records ops issued on the thread that
    entered it and supports exactly one backward pass until :meth:`reset`.
    """

    nodes: list[Node] = field(default_factory=list)

    def __post_init__(self):
        self.id = next(_tape_counter)
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, vjp) -> None:
        if self._consumed:
            raise TapeError("cannot record on a tape after backward(); call reset()")
        output._tape_id = self.id
        self.nodes.append(Node(op, inputs, output, vjp))

    def reset(self) -> None:
        self.nodes = []
        self._consumed = False

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf.

        Returns a mapping from ``id(leaf)`` to the gradient produced by this
        pass (before accumulation into any pre-existing ``.grad``).
        """
        if self._consumed:
            raise TapeError("backward() already called on this tape; call reset() first")
        if loss.size != 1:
            raise TapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
        if not self.nodes:
            raise TapeError("backward: tape is empty")
        if loss._tape_id != self.id:
            raise TapeError("backward: loss was not produced on this tape (detached)")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._tape_id is not None and inp._tape_id != self.id:
                    raise TapeError(
                        f"backward: op '{node.op}' references a tensor recorded on another tape"
                    )
                if inp._tape_id is None:
                    leaves[id(inp)] = inp
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = np.asarray(ig, dtype=inp.dtype)
        produced: dict[int, np.ndarray] = {}
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = g.reshape(leaf.shape)
            produced[key] = g
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        return produced


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    return tape.backward(loss)


# ----------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------
def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def zeros(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype))


def _finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: produced non-finite values", op=op)


def _make(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    _finite(op, out)
    if out.dtype.kind != "f":
        out = out.astype(DEFAULT_DTYPE)
    result = Tensor._owned(out)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.record(op, inputs, result, vjp)
    return result


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.ndim == 0 or b.ndim == 0:
        return
    if b.ndim < a.ndim and sa[a.ndim - b.ndim:] == sb:
        return
    if a.ndim < b.ndim and sb[b.ndim - a.ndim:] == sa:
        return
    raise ShapeError(f"{op}: shapes {sa} and {sb} do not conform")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead > 0 else g


# ----------------------------------------------------------------------
# elementwise binary
# ----------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make("div", out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise ``a ** p`` for a constant real exponent."""
    p = float(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.power(a.data, p)
    return _make("power", out, (a,), lambda g: (g * p * np.power(a.data, p - 1.0),))


# ----------------------------------------------------------------------
# elementwise unary
# ----------------------------------------------------------------------
def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def logsigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _make("logsigmoid", out, (a,), lambda g: (g * _sigmoid(-x),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make("softplus", out, (a,), lambda g: (g * _sigmoid(x),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return _make("silu", x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


def elu(a: Tensor) -> Tensor:
    x = a.data
    neg_part = np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg_part)
    return _make("elu", out, (a,), lambda g: (g * np.where(x > 0, 1.0, neg_part + 1.0),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def square(a: Tensor) -> Tensor:
    return _make("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Leading (batch) axes must match exactly, except that a plain 2-D right
    operand is shared across all batch entries of the left operand.
    """
    a, b = _coerce_pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform (need >= 2-D)")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform (batch axes)")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2 and a.ndim > 2:
            gb = np.matmul(a.data.reshape(-1, a.shape[-1]).T, g.reshape(-1, g.shape[-1]))
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _make("matmul", out, (a, b), vjp)


def swap_last(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError(f"transpose: shape {a.shape} has fewer than 2 axes")
    return _make("transpose", np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _make("permute", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def outer(a: Tensor, b: Tensor) -> Tensor:
    """Batched outer product: ``(..., n), (..., m) -> (..., n, m)``."""
    a, b = _coerce_pair(a, b)
    if a.shape[:-1] != b.shape[:-1] or a.ndim < 1:
        raise ShapeError(f"outer: shapes {a.shape} and {b.shape} do not conform")
    out = a.data[..., :, None] * b.data[..., None, :]
    return _make("outer", out, (a, b),
                 lambda g: ((g * b.data[..., None, :]).sum(-1), (g * a.data[..., :, None]).sum(-2)))


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """``diag(s) @ x`` over the last two axes: ``(..., n, m) * (..., n)``."""
    x, s = _coerce_pair(x, s)
    if x.ndim < 2 or x.shape[:-1] != s.shape:
        raise ShapeError(f"scale_rows: shapes {x.shape} and {s.shape} do not conform")
    out = x.data * s.data[..., None]
    return _make("scale_rows", out, (x, s),
                 lambda g: (g * s.data[..., None], (g * x.data).sum(-1)))


def _parse_einsum(spec: str, n: int) -> tuple[list[str], str]:
    if "->" not in spec:
        raise ShapeError(f"einsum: '{spec}' must have an explicit output")
    lhs, rhs = spec.replace(" ", "").split("->")
    ins = lhs.split(",")
    if len(ins) != n:
        raise ShapeError(f"einsum: '{spec}' expects {len(ins)} operands, got {n}")
    for s in ins + [rhs]:
        if len(set(s)) != len(s) or not s.isalpha() and s:
            raise ShapeError(f"einsum: repeated or invalid subscripts in '{spec}'")
    return ins, rhs


def einsum(spec: str, *operands: Tensor) -> Tensor:
    """Tensor contraction with explicit output subscripts (no diagonals)."""
    ops = tuple(as_tensor(o) for o in operands)
    ins, rhs = _parse_einsum(spec, len(ops))
    dims: dict[str, int] = {}
    for subs, t in zip(ins, ops):
        if len(subs) != t.ndim:
            raise ShapeError(f"einsum: '{subs}' does not match shape {t.shape}")
        for c, n in zip(subs, t.shape):
            if dims.setdefault(c, n) != n:
                raise ShapeError(f"einsum: index '{c}' has sizes {dims[c]} and {n} in '{spec}'")
    out = np.einsum(spec, *(t.data for t in ops))

    def vjp(g):
        grads = []
        for i, subs in enumerate(ins):
            others = [ins[j] for j in range(len(ops)) if j != i]
            avail = set(rhs).union(*others) if others else set(rhs)
            kept = "".join(c for c in subs if c in avail)
            gi = np.einsum(",".join([rhs] + others) + "->" + kept,
                           g, *(ops[j].data for j in range(len(ops)) if j != i))
            if kept != subs:
                expand = tuple(k for k, c in enumerate(subs) if c not in avail)
                gi = np.broadcast_to(np.expand_dims(gi, expand), ops[i].shape)
            grads.append(gi)
        return grads

    return _make("einsum", out, ops, vjp)


# ----------------------------------------------------------------------
# shape manipulation
# ----------------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from exc
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; gradient sums over expanded axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from exc

    def vjp(g):
        lead = g.ndim - a.ndim
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(k for k, n in enumerate(a.shape) if n == 1 and g.shape[k] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _make("broadcast_to", np.array(out), (a,), vjp)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def vjp(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _make("getitem", np.array(out), (a,), vjp)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array (e.g. embeddings)."""
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise ShapeError(f"take: index out of range for axis {axis} of shape {a.shape}")
    out = np.take(a.data, idx, axis=axis)

    def vjp(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (full,)

    return _make("take", out, (a,), vjp)


def gather_last(a: Tensor, indices) -> Tensor:
    """``out[..., j] = a[..., indices[..., j]]`` along the last axis."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape[:-1] != a.shape[:-1]:
        raise ShapeError(f"gather_last: index shape {idx.shape} does not match {a.shape}")
    out = np.take_along_axis(a.data, idx, axis=-1)

    def vjp(g):
        full = np.zeros_like(a.data).reshape(-1, a.shape[-1])
        rows = np.repeat(np.arange(full.shape[0]), idx.shape[-1])
        np.add.at(full, (rows, idx.reshape(-1)), g.reshape(-1))
        return (full.reshape(a.shape),)

    return _make("gather_last", out, (a,), vjp)


def index_add(num_rows: int, indices, src: Tensor) -> Tensor:
    """Scatter-add rows of ``src`` into a zero ``(num_rows, ...)`` tensor."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.shape[0] != src.shape[0]:
        raise ShapeError(f"index_add: indices {idx.shape} do not match src {src.shape}")
    out = np.zeros((num_rows,) + src.shape[1:], dtype=src.dtype)
    np.add.at(out, idx, src.data)
    return _make("index_add", out, (src,), lambda g: (g[idx],))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat: no tensors given")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} do not conform") from exc
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make("concat", out, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("stack: no tensors given")
    if len({t.shape for t in tensors}) != 1:
        raise ShapeError(f"stack: shapes {[t.shape for t in tensors]} do not conform")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _make("stack", out, tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def masked_fill(a: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant (zero gradient there)."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)
    return _make("masked_fill", out, (a,), lambda g: (np.where(mask, 0.0, g),))


# ----------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------
def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[k] for k in np.atleast_1d(axis)]))
    return sum_(a, axis, keepdims) * (1.0 / n)


def cumsum(a: Tensor, axis: int = -1) -> Tensor:
    out = np.cumsum(a.data, axis=axis)
    return _make("cumsum", out, (a,),
                 lambda g: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis (max-subtracted)."""
    x = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=-1, keepdims=True)
    return _make("softmax", s, (a,),
                 lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def log_softmax(a: Tensor) -> Tensor:
    x = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=-1, keepdims=True))
    out = x - lse
    s = np.exp(out)
    return _make("log_softmax", out, (a,),
                 lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


# ----------------------------------------------------------------------
# composites
# ----------------------------------------------------------------------
def rms_norm(x: Tensor, weight: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    ms = mean(square(x), axis=-1)
    y = scale_rows(x, power(ms + eps, -0.5)) if x.ndim >= 2 else x * power(ms + eps, -0.5)
    return y * weight if weight is not None else y


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise L2 normalisation over the last axis."""
    inv = power(sum_(square(x), axis=-1) + eps, -0.5)
    return scale_rows(x, inv) if x.ndim >= 2 else x * inv


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y + bias if bias is not None else y


# ----------------------------------------------------------------------
# finite differences
# ----------------------------------------------------------------------
def _scalar_value(op: str, value) -> float:
    if isinstance(value, Tensor):
        value = value.data
    arr = np.asarray(value, dtype=np.float64)
    if arr.size != 1:
        raise ShapeError(f"{op}: function must return a scalar, got shape {arr.shape}")
    v = float(arr.reshape(()))
    if not np.isfinite(v):
        raise NonFiniteError(f"{op}: function returned a non-finite value", op=op)
    return v


def finite_diff_grad(f: Callable[[Tensor], object], x, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, one element at a time."""
    if eps <= 0:
        raise ValueError("finite_diff_grad: eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = _scalar_value("finite_diff_grad", f(Tensor(base.copy())))
        flat[i] = orig - eps
        fm = _scalar_value("finite_diff_grad", f(Tensor(base.copy())))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return Tensor(grad)


def grad_of(f: Callable[..., Tensor], *inputs: Tensor) -> list[np.ndarray]:
    """Run ``f`` on fresh grad-tracking copies of ``inputs`` and return their gradients."""
    leaves = [Tensor(t.data, requires_grad=True) for t in inputs]
    with Tape() as tape:
        out = f(*leaves)
    tape.backward(out)
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)`` in the 2-norm; 0 when both are zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b)) / scale


# ----------------------------------------------------------------------
# RNG
# ----------------------------------------------------------------------
class Rng:
    """Seeded PCG64 stream; equal seeds give bit-identical draws everywhere."""

    algorithm = "PCG64"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    def child(self, *key: int | str) -> "Rng":
        """Independent stream derived from this seed and a stable key."""
        words = [self.seed & 0xFFFFFFFF, self.seed >> 32]
        for k in key:
            if isinstance(k, str):
                words.extend(k.encode("utf-8"))
            else:
                words.append(int(k) & 0xFFFFFFFF)
        sub = Rng.__new__(Rng)
        sub.seed = self.seed
        sub._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))
        return sub

    def normal(self, shape, scale: float = 1.0, dtype=DEFAULT_DTYPE) -> np.ndarray:
        return (self._gen.standard_normal(shape) * scale).astype(dtype)

    def uniform(self, low: float, high: float, shape, dtype=DEFAULT_DTYPE) -> np.ndarray:
        return self._gen.uniform(low, high, shape).astype(dtype)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size, replace: bool = True) -> np.ndarray:
        return self._gen.choice(a, size=size, replace=replace)

    def tensor(self, shape, scale: float = 1.0, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
        return Tensor(self.normal(shape, scale, dtype), requires_grad=requires_grad)


def parameters_of(items: Iterable) -> list[Tensor]:
    return [t for t in items if isinstance(t, Tensor)]
