"""Central finite-difference gradient oracle."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor


def numerical_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Tensor(x)).item()
            flat[i] = orig - h
            fm = f(Tensor(x)).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)."""
    a, b = np.asarray(a), np.asarray(b)
    if a.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))


def finite_diff_check(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences."""
    analytic = T.gradient(f, x)
    numeric = numerical_gradient(f, x, h)
    return relative_error(analytic, numeric)


# ---------------------------------------------------------------------------
# one probe per registered op; each returns (scalar fn of a single flat leaf, point)


def _weights(rng, shape):
    return rng.standard_normal(shape)


def _probe_unary(kind, shape=(3, 4), positive=False, away_from_zero=False, **kw):
    def make(rng):
        w = _weights(rng, shape)
        x = rng.standard_normal(shape)
        if positive:
            x = np.abs(x) + 0.2
        if away_from_zero:
            x = np.sign(x) * (np.abs(x) + 0.1)
        return (lambda t: T.reduce("sum", T.apply(kind, t, **kw) * w)), x

    return make


def _probe_binary(kind, sa, sb, which):
    def make(rng):
        a0 = rng.standard_normal(sa)
        b0 = rng.standard_normal(sb)
        out_shape = (sa[0], sb[1]) if kind == "matmul" else np.broadcast_shapes(sa, sb)
        w = _weights(rng, out_shape)
        if which == 0:
            return (lambda t: T.reduce("sum", T.apply(kind, t, b0) * w)), a0
        return (lambda t: T.reduce("sum", T.apply(kind, a0, t) * w)), b0

    return make


def _probe_reduce(kind, axis):
    def make(rng):
        x = rng.standard_normal((4, 5))
        if axis is None:
            return (lambda t: T.reduce(kind, t) * 1.7), x
        w = _weights(rng, (4, 1))
        return (lambda t: T.reduce("sum", T.reduce(kind, t, axis=1) * w)), x

    return make


def _probe_concat(rng):
    other = rng.standard_normal((3, 2))
    w = _weights(rng, (3, 6))
    x = rng.standard_normal((3, 4))
    return (lambda t: T.reduce("sum", T.concat([t, other]) * w)), x


def _probe_slice(rng):
    w = _weights(rng, (3, 3))
    x = rng.standard_normal((3, 5))
    return (lambda t: T.reduce("sum", T.slice_cols(t, 1, 4) * w)), x


OP_PROBES: dict[str, list] = {
    "add": [_probe_binary("add", (3, 4), (1, 4), 0), _probe_binary("add", (3, 4), (1, 4), 1)],
    "sub": [_probe_binary("sub", (3, 4), (3, 1), 0), _probe_binary("sub", (3, 4), (3, 1), 1)],
    "mul": [_probe_binary("mul", (3, 4), (3, 4), 0), _probe_binary("mul", (3, 4), (1, 4), 1)],
    "matmul": [_probe_binary("matmul", (5, 7), (7, 3), 0), _probe_binary("matmul", (5, 7), (7, 3), 1)],
    "relu": [_probe_unary("relu", away_from_zero=True)],
    "sigmoid": [_probe_unary("sigmoid")],
    "log": [_probe_unary("log", positive=True)],
    "neg": [_probe_unary("neg")],
    "exp": [_probe_unary("exp")],
    "abs": [_probe_unary("abs", away_from_zero=True)],
    "layernorm": [_probe_unary("layernorm", shape=(3, 6))],
    "softmax_rows": [_probe_unary("softmax_rows", shape=(3, 5))],
    "reduce": [
        _probe_reduce(k, ax) for k in ("sum", "mean", "sq_l2", "l2") for ax in (None, 1)
    ],
    "concat": [_probe_concat],
    "slice_cols": [_probe_slice],
}


def check_op(name: str, n_points: int = 10, seed: int = 0, h: float = 1e-5) -> float:
    """Worst relative error of op ``name`` over ``n_points`` random points per probe."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for make in OP_PROBES[name]:
        for _ in range(n_points):
            f, x = make(rng)
            worst = max(worst, finite_diff_check(f, x, h))
    return worst
