"""Operation catalog.

Saved-activation table (what each op keeps for backward, and what the ledger
charges for it):

==================  ===============================  =========================
op                  saved                            charged scalars
==================  ===============================  =========================
matmul              both inputs                      m*k + k*n
add                 nothing                          0
scale               nothing                          0
mul                 both inputs                      2*m*n
softmax_rows        output                           m*n
layer_norm_rows     normalized input, 1/std, gamma   m*n + m (+ n)
gelu                input                            m*n
embedding           row ids                          c
concat_rows         nothing                          0
slice_rows          nothing                          0
transpose           nothing                          0
cross_entropy       probabilities, targets           M*V + M
==================  ===============================  =========================

Saved arrays that are parameters are references to storage that is resident
anyway, so they are never charged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .graph import BACKWARD_RULES, Node, Tensor, grad_enabled


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class OpDef:
    forward: Callable
    backward: Callable
    # for each saved slot, index of the input it aliases (None: fresh array)
    aliases: tuple


CATALOG: dict[str, OpDef] = {}


def _register(name: str, aliases: tuple = ()):
    def wrap(cls):
        CATALOG[name] = OpDef(cls.forward, cls.backward, aliases)
        BACKWARD_RULES[name] = cls.backward
        return cls
    return wrap


def _fail(op: str, msg: str):
    raise ShapeError(f"{op}: {msg}")


def _need_2d(op: str, *arrs: np.ndarray) -> None:
    for a in arrs:
        if a.ndim != 2:
            _fail(op, f"expected a 2-D operand, got shape {a.shape}")


@_register("matmul", aliases=(0, 1))
class _MatMul:
    @staticmethod
    def forward(a, b, **_):
        _need_2d("matmul", a, b)
        if a.shape[1] != b.shape[0]:
            _fail("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
        return a @ b, (a, b)

    @staticmethod
    def backward(g, saved, attrs):
        a, b = saved
        return g @ b.T, a.T @ g


@_register("add")
class _Add:
    @staticmethod
    def forward(a, b, **_):
        if a.shape == b.shape:
            bcast = False
        elif b.ndim == 1 and a.ndim == 2 and b.shape[0] == a.shape[1]:
            bcast = True
        else:
            _fail("add", f"cannot add shapes {a.shape} and {b.shape}")
        return a + b, (bcast,)

    @staticmethod
    def backward(g, saved, attrs):
        (bcast,) = saved
        return g, (g.sum(axis=0) if bcast else g)


@_register("scale")
class _Scale:
    @staticmethod
    def forward(a, *, factor, **_):
        return a * factor, ()

    @staticmethod
    def backward(g, saved, attrs):
        return (g * attrs["factor"],)


@_register("mul", aliases=(0, 1))
class _Mul:
    @staticmethod
    def forward(a, b, **_):
        if a.shape != b.shape:
            _fail("mul", f"shapes differ: {a.shape} vs {b.shape}")
        return a * b, (a, b)

    @staticmethod
    def backward(g, saved, attrs):
        a, b = saved
        return g * b, g * a


@_register("softmax_rows", aliases=(None,))
class _Softmax:
    @staticmethod
    def forward(a, **_):
        _need_2d("softmax_rows", a)
        shifted = a - a.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=1, keepdims=True)
        return y, (y,)

    @staticmethod
    def backward(g, saved, attrs):
        (y,) = saved
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)


@_register("layer_norm_rows", aliases=(None, None, 1))
class _LayerNorm:
    @staticmethod
    def forward(x, gamma, beta, *, eps=1e-5, **_):
        _need_2d("layer_norm_rows", x)
        n = x.shape[1]
        if gamma.shape != (n,) or beta.shape != (n,):
            _fail("layer_norm_rows", f"gamma/beta must have shape ({n},), got {gamma.shape} and {beta.shape}")
        mu = x.mean(axis=1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv
        return xhat * gamma + beta, (xhat, inv, gamma)

    @staticmethod
    def backward(g, saved, attrs):
        xhat, inv, gamma = saved
        n = xhat.shape[1]
        dxhat = g * gamma
        dx = (inv / n) * (n * dxhat - dxhat.sum(axis=1, keepdims=True)
                          - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


_GELU_C = math.sqrt(2.0 / math.pi)


@_register("gelu", aliases=(0,))
class _Gelu:
    # tanh approximation
    @staticmethod
    def forward(x, **_):
        inner = _GELU_C * (x + 0.044715 * x ** 3)
        return 0.5 * x * (1.0 + np.tanh(inner)), (x,)

    @staticmethod
    def backward(g, saved, attrs):
        (x,) = saved
        t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)


@_register("embedding", aliases=(None,))
class _Embedding:
    @staticmethod
    def forward(table, *, ids, **_):
        _need_2d("embedding", table)
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            _fail("embedding", f"ids must be a non-empty 1-D sequence, got shape {ids.shape}")
        if ids.min() < 0 or ids.max() >= table.shape[0]:
            _fail("embedding", f"id out of range [0, {table.shape[0]}): min {ids.min()}, max {ids.max()}")
        return table[ids], (ids,)

    @staticmethod
    def backward(g, saved, attrs):
        (ids,) = saved
        dt = np.zeros(attrs["table_shape"], dtype=g.dtype)
        np.add.at(dt, ids, g)
        return (dt,)


@_register("concat_rows")
class _Concat:
    @staticmethod
    def forward(*arrs, **_):
        _need_2d("concat_rows", *arrs)
        widths = {a.shape[1] for a in arrs}
        if len(widths) != 1:
            _fail("concat_rows", f"column counts differ: {[a.shape for a in arrs]}")
        return np.concatenate(arrs, axis=0), ()

    @staticmethod
    def backward(g, saved, attrs):
        bounds = np.cumsum([0, *attrs["rows"]])
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(attrs["rows"])))


@_register("slice_rows")
class _Slice:
    @staticmethod
    def forward(a, *, start, stop, **_):
        _need_2d("slice_rows", a)
        if not 0 <= start < stop <= a.shape[0]:
            _fail("slice_rows", f"bad row range [{start}, {stop}) for {a.shape[0]} rows")
        return a[start:stop], ()

    @staticmethod
    def backward(g, saved, attrs):
        out = np.zeros(attrs["in_shape"], dtype=g.dtype)
        out[attrs["start"]:attrs["stop"]] = g
        return (out,)


@_register("transpose")
class _Transpose:
    @staticmethod
    def forward(a, **_):
        _need_2d("transpose", a)
        return a.T, ()

    @staticmethod
    def backward(g, saved, attrs):
        return (g.T,)


@_register("cross_entropy", aliases=(None, None))
class _CrossEntropy:
    @staticmethod
    def forward(logits, *, targets, ignore_index=-100, **_):
        _need_2d("cross_entropy", logits)
        targets = np.asarray(targets, dtype=np.int64)
        m, v = logits.shape
        if targets.shape != (m,):
            _fail("cross_entropy", f"targets shape {targets.shape} does not match {m} logit rows")
        mask = targets != ignore_index
        count = int(mask.sum())
        if count == 0:
            _fail("cross_entropy", "every target position is ignored")
        live = targets[mask]
        if live.min() < 0 or live.max() >= v:
            _fail("cross_entropy", f"target id out of range [0, {v})")
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - logz
        rows = np.nonzero(mask)[0]
        loss = -logp[rows, live].sum() / count
        return np.asarray(loss, dtype=logits.dtype), (np.exp(logp), targets)

    @staticmethod
    def backward(g, saved, attrs):
        probs, targets = saved
        mask = targets != attrs.get("ignore_index", -100)
        count = int(mask.sum())
        d = probs.copy()
        rows = np.nonzero(mask)[0]
        d[rows, targets[rows]] -= 1.0
        d[~mask] = 0.0
        return (d * (g / count),)


def apply(op_kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Run one catalog op; records a node when any input is part of a graph."""
    try:
        op = CATALOG[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    values = [t.values for t in inputs]
    out, saved = op.forward(*values, **attrs)
    nodes = [t.node for t in inputs]
    if not grad_enabled() or all(n is None for n in nodes):
        return Tensor(out)
    charge = 0
    for i, arr in enumerate(saved):
        alias = op.aliases[i] if i < len(op.aliases) else -1
        if alias == -1:
            continue  # bookkeeping, not an activation
        if alias is not None and inputs[alias].is_param:
            continue
        charge += int(arr.size)
    rec = dict(attrs)
    if op_kind == "embedding":
        rec["table_shape"] = values[0].shape
    elif op_kind == "concat_rows":
        rec["rows"] = [v.shape[0] for v in values]
    elif op_kind == "slice_rows":
        rec["in_shape"] = values[0].shape
    node = Node(op_kind, nodes, saved, rec, charge=charge)
    return Tensor(out, node=node)


# thin wrappers used by the model code

def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply("matmul", [a, b])


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply("add", [a, b])


def scale(a: Tensor, factor: float) -> Tensor:
    return apply("scale", [a], factor=factor)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply("mul", [a, b])


def softmax_rows(a: Tensor) -> Tensor:
    return apply("softmax_rows", [a])


def layer_norm_rows(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return apply("layer_norm_rows", [x, gamma, beta], eps=eps)


def gelu(x: Tensor) -> Tensor:
    return apply("gelu", [x])


def embedding(table: Tensor, ids) -> Tensor:
    return apply("embedding", [table], ids=ids)


def concat_rows(ts: Sequence[Tensor]) -> Tensor:
    return apply("concat_rows", list(ts))


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    return apply("slice_rows", [a], start=start, stop=stop)


def transpose(a: Tensor) -> Tensor:
    return apply("transpose", [a])


def cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    return apply("cross_entropy", [logits], targets=targets, ignore_index=ignore_index)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    return transpose(slice_rows(transpose(a), start, stop))


def concat_cols(ts: Sequence[Tensor]) -> Tensor:
    return transpose(concat_rows([transpose(t) for t in ts]))
