"""Dense float64 tensors recorded on an explicit define-by-run tape.

A forward pass runs inside ``with Tape() as tape:``; every op whose inputs
require gradients is appended to the tape, and ``tape.backward(loss)``
replays the records in exact reverse order.
"""

from __future__ import annotations

import os
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible with an op."""


class DomainError(ValueError):
    """Input lies outside the mathematical domain of an op."""


class ContractError(RuntimeError):
    """A call violated a documented precondition (e.g. non-scalar loss)."""


_DEBUG = os.environ.get("LTOM_DEBUG", "") not in ("", "0")


def set_debug(enabled: bool) -> None:
    """Toggle NaN/Inf validation of every op output."""
    global _DEBUG
    _DEBUG = bool(enabled)


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() on non-scalar tensor of shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


class Record:
    __slots__ = ("op", "inputs", "output", "ctx")

    def __init__(self, op: "Op", inputs: Sequence[Tensor], output: Tensor, ctx: dict):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.ctx = ctx


class Gradients:
    """Gradient lookup keyed by tensor identity."""

    def __init__(self):
        self._items: dict[int, tuple[Tensor, np.ndarray]] = {}

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._items

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return self._items[id(t)][1]

    def get(self, t: Tensor, default=None):
        item = self._items.get(id(t))
        return default if item is None else item[1]

    def _accumulate(self, t: Tensor, g: np.ndarray) -> None:
        prev = self._items.get(id(t))
        self._items[id(t)] = (t, g if prev is None else prev[1] + g)

    def _pop(self, t: Tensor):
        item = self._items.pop(id(t), None)
        return None if item is None else item[1]


_LOCAL = threading.local()


def _stack() -> list["Tape"]:
    st = getattr(_LOCAL, "stack", None)
    if st is None:
        st = _LOCAL.stack = []
    return st


class Tape:
    """Ordered list of recorded ops for one forward pass.

    The active-tape stack is thread-local; never share one tape between
    two concurrent forward passes.
    """

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: "Op", inputs: Sequence[Tensor], output: Tensor, ctx: dict) -> None:
        self.records.append(Record(op, inputs, output, ctx))

    def backward(self, loss: Tensor, store=None) -> Gradients:
        """Reverse-mode sweep from a scalar ``loss``.

        Leaf gradients are returned; if ``store`` (a ParamStore) is given,
        gradients of its parameters are also accumulated into it.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = Gradients()
        grads._accumulate(loss, np.ones_like(loss.data))
        for rec in reversed(self.records):
            g = grads._pop(rec.output)
            if g is None:
                continue
            in_grads = rec.op.backward(rec.ctx, g)
            for x, gx in zip(rec.inputs, in_grads):
                if gx is None or not x.requires_grad:
                    continue
                if gx.shape != x.shape:
                    raise DimensionError(
                        f"{rec.op.name} backward produced grad {gx.shape} for input {x.shape}"
                    )
                grads._accumulate(x, gx)
        if store is not None:
            store.accumulate(grads)
        return grads


def backward(tape: Tape, loss: Tensor, store=None) -> Gradients:
    return tape.backward(loss, store)


def active_tape() -> Tape | None:
    st = _stack()
    return st[-1] if st else None


class no_grad:
    """Suspend recording (inference)."""

    def __enter__(self):
        st = _stack()
        self._saved = list(st)
        st.clear()

    def __exit__(self, *exc):
        _stack().extend(self._saved)


# ---------------------------------------------------------------------------
# op registry


class Op:
    name = ""
    n_inputs = 1  # -1 for variadic

    def forward(self, ctx: dict, *xs: np.ndarray, **kw) -> np.ndarray:
        raise NotImplementedError

    def backward(self, ctx: dict, g: np.ndarray) -> tuple:
        raise NotImplementedError


OPS: dict[str, Op] = {}


def register(cls):
    OPS[cls.name] = cls()
    return cls


def apply(name: str, *inputs, **kw) -> Tensor:
    op = OPS[name]
    xs = [as_tensor(x) for x in inputs]
    ctx: dict = {}
    out = op.forward(ctx, *(x.data for x in xs), **kw)
    if _DEBUG and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite output from op '{name}'")
    t = Tensor(out)
    tape = active_tape()
    if tape is not None and any(x.requires_grad for x in xs):
        t.requires_grad = True
        tape.record(op, xs, t, ctx)
    return t


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(name: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}") from None


@register
class Add(Op):
    name = "add"
    n_inputs = 2

    def forward(self, ctx, a, b):
        _check_broadcast(self.name, a, b)
        ctx["shapes"] = (a.shape, b.shape)
        return a + b

    def backward(self, ctx, g):
        sa, sb = ctx["shapes"]
        return unbroadcast(g, sa), unbroadcast(g, sb)


@register
class Sub(Op):
    name = "sub"
    n_inputs = 2

    def forward(self, ctx, a, b):
        _check_broadcast(self.name, a, b)
        ctx["shapes"] = (a.shape, b.shape)
        return a - b

    def backward(self, ctx, g):
        sa, sb = ctx["shapes"]
        return unbroadcast(g, sa), unbroadcast(-g, sb)


@register
class Mul(Op):
    name = "mul"
    n_inputs = 2

    def forward(self, ctx, a, b):
        _check_broadcast(self.name, a, b)
        ctx["a"], ctx["b"] = a, b
        return a * b

    def backward(self, ctx, g):
        a, b = ctx["a"], ctx["b"]
        return unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)


@register
class MatMul(Op):
    name = "matmul"
    n_inputs = 2

    def forward(self, ctx, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
        ctx["a"], ctx["b"] = a, b
        return a @ b

    def backward(self, ctx, g):
        a, b = ctx["a"], ctx["b"]
        return g @ b.T, a.T @ g


@register
class Relu(Op):
    name = "relu"

    def forward(self, ctx, x):
        ctx["mask"] = x > 0
        return np.where(ctx["mask"], x, 0.0)

    def backward(self, ctx, g):
        return (g * ctx["mask"],)


_SIG_LO = np.finfo(np.float64).tiny
_SIG_HI = 1.0 - 2.0**-53


@register
class Sigmoid(Op):
    name = "sigmoid"

    def forward(self, ctx, x):
        # clipped so the output is strictly inside (0, 1) even in saturation
        y = np.clip(0.5 * (1.0 + np.tanh(0.5 * x)), _SIG_LO, _SIG_HI)
        ctx["y"] = y
        return y

    def backward(self, ctx, g):
        y = ctx["y"]
        return (g * y * (1.0 - y),)


@register
class Log(Op):
    name = "log"

    def forward(self, ctx, x):
        if np.any(x <= 0):
            raise DomainError(f"log of non-positive input (min {x.min()!r})")
        ctx["x"] = x
        return np.log(x)

    def backward(self, ctx, g):
        return (g / ctx["x"],)


@register
class Neg(Op):
    name = "neg"

    def forward(self, ctx, x):
        return -x

    def backward(self, ctx, g):
        return (-g,)


@register
class Exp(Op):
    name = "exp"

    def forward(self, ctx, x):
        y = np.exp(x)
        ctx["y"] = y
        return y

    def backward(self, ctx, g):
        return (g * ctx["y"],)


@register
class Abs(Op):
    name = "abs"

    def forward(self, ctx, x):
        ctx["sign"] = np.sign(x)
        return np.abs(x)

    def backward(self, ctx, g):
        return (g * ctx["sign"],)


@register
class LayerNorm(Op):
    name = "layernorm"

    def forward(self, ctx, x, eps=1e-5):
        if x.ndim != 2 or x.shape[1] < 2:
            raise DimensionError(f"layernorm needs a b×d input with d >= 2, got {x.shape}")
        mu = x.mean(axis=1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        ctx["xhat"], ctx["inv"] = xhat, inv
        return xhat

    def backward(self, ctx, g):
        xhat, inv = ctx["xhat"], ctx["inv"]
        gm = g.mean(axis=1, keepdims=True)
        gxm = (g * xhat).mean(axis=1, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)


@register
class SoftmaxRows(Op):
    name = "softmax_rows"

    def forward(self, ctx, x):
        if x.ndim != 2:
            raise DimensionError(f"softmax_rows needs a rank-2 input, got {x.shape}")
        z = np.exp(x - x.max(axis=1, keepdims=True))
        y = z / z.sum(axis=1, keepdims=True)
        ctx["y"] = y
        return y

    def backward(self, ctx, g):
        y = ctx["y"]
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)


_REDUCE_KINDS = ("sum", "mean", "sq_l2", "l2")


@register
class Reduce(Op):
    """sum / mean / squared-L2 / L2 over everything (axis=None) or per row (axis=1)."""

    name = "reduce"

    def forward(self, ctx, x, kind="sum", axis=None):
        if kind not in _REDUCE_KINDS:
            raise ValueError(f"unknown reduce kind {kind!r}")
        if axis not in (None, 1):
            raise DimensionError("reduce supports axis=None or axis=1 only")
        if axis == 1 and x.ndim != 2:
            raise DimensionError(f"row reduce needs a rank-2 input, got {x.shape}")
        keep = axis is not None
        ctx.update(kind=kind, x=x, axis=axis)
        if kind == "sum":
            return x.sum(axis=axis, keepdims=keep)
        if kind == "mean":
            return x.mean(axis=axis, keepdims=keep)
        sq = (x * x).sum(axis=axis, keepdims=keep)
        if kind == "sq_l2":
            return sq
        n = np.sqrt(sq)
        ctx["n"] = n
        return n

    def backward(self, ctx, g):
        kind, x, axis = ctx["kind"], ctx["x"], ctx["axis"]
        if kind == "sum":
            return (np.broadcast_to(g, x.shape).copy(),)
        if kind == "mean":
            count = x.size if axis is None else x.shape[1]
            return (np.broadcast_to(g / count, x.shape).copy(),)
        if kind == "sq_l2":
            return (2.0 * x * g,)
        n = ctx["n"]
        # zero subgradient at the zero vector
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, g / safe, 0.0) * x,)


@register
class Concat(Op):
    name = "concat"
    n_inputs = -1

    def forward(self, ctx, *xs, axis=1):
        try:
            out = np.concatenate(xs, axis=axis)
        except ValueError:
            raise DimensionError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
        ctx["splits"] = np.cumsum([x.shape[axis] for x in xs])[:-1]
        ctx["axis"] = axis
        return out

    def backward(self, ctx, g):
        return tuple(np.split(g, ctx["splits"], axis=ctx["axis"]))


@register
class SliceCols(Op):
    name = "slice_cols"

    def forward(self, ctx, x, start=0, stop=None):
        ctx.update(shape=x.shape, start=start, stop=stop)
        return x[:, start:stop].copy()

    def backward(self, ctx, g):
        out = np.zeros(ctx["shape"])
        out[:, ctx["start"] : ctx["stop"]] = g
        return (out,)


# ---------------------------------------------------------------------------
# functional surface


def add(a, b) -> Tensor:
    return apply("add", a, b)


def sub(a, b) -> Tensor:
    return apply("sub", a, b)


def mul(a, b) -> Tensor:
    return apply("mul", a, b)


def matmul(a, b) -> Tensor:
    return apply("matmul", a, b)


def relu(x) -> Tensor:
    return apply("relu", x)


def sigmoid(x) -> Tensor:
    return apply("sigmoid", x)


def log(x) -> Tensor:
    return apply("log", x)


def neg(x) -> Tensor:
    return apply("neg", x)


def exp(x) -> Tensor:
    return apply("exp", x)


def abs_(x) -> Tensor:
    return apply("abs", x)


_ELEMENTWISE = {"relu", "sigmoid", "log", "neg", "exp", "abs"}


def elementwise(kind: str, x) -> Tensor:
    if kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {kind!r}")
    return apply(kind, x)


def layernorm(x, eps: float = 1e-5) -> Tensor:
    return apply("layernorm", x, eps=eps)


def softmax_rows(x) -> Tensor:
    return apply("softmax_rows", x)


def reduce(kind: str, x, axis: int | None = None) -> Tensor:
    return apply("reduce", x, kind=kind, axis=axis)


def concat(xs: Iterable, axis: int = 1) -> Tensor:
    return apply("concat", *xs, axis=axis)


def slice_cols(x, start: int, stop: int | None = None) -> Tensor:
    return apply("slice_cols", x, start=start, stop=stop)


def detach(x) -> Tensor:
    """Stop-gradient: same values, cut from the tape."""
    return Tensor(as_tensor(x).data)


def gradient(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    """Tape gradient of scalar ``f`` at ``x``."""
    leaf = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
    grads = tape.backward(out)
    return grads.get(leaf, np.zeros_like(leaf.data))
