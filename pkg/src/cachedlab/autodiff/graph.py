"""Tensors, graph nodes and the reverse-mode sweep."""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from .ledger import LEDGER, MemoryLedger


class GraphError(RuntimeError):
    pass


_node_counter = itertools.count()
_counter_lock = threading.Lock()
_state = threading.local()


def _next_index() -> int:
    with _counter_lock:
        return next(_node_counter)


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Forward-only region: ops record no nodes and charge nothing to the ledger."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    """One recorded operation.

    ``inputs`` holds the predecessor nodes (``None`` for inputs that carry no
    graph). ``saved`` is whatever the backward rule needs; its charged size is
    held on the ledger until the node is released or garbage collected.
    Leaf nodes have no backward rule and only a ``sink`` buffer.
    """

    __slots__ = ("op", "inputs", "saved", "attrs", "index", "retain", "sink",
                 "charge", "released", "ledger", "is_param", "ledger_tag", "__weakref__")

    def __init__(self, op: str, inputs: Sequence["Node | None"] = (), saved=None, attrs=None,
                 charge: int = 0, ledger: MemoryLedger | None = None, tag: str = ""):
        self.op = op
        self.inputs = tuple(inputs)
        self.saved = saved
        self.attrs = attrs or {}
        self.index = _next_index()
        self.retain = False
        self.sink: np.ndarray | None = None
        self.charge = charge
        self.released = False
        self.is_param = False
        self.ledger_tag = tag or op
        self.ledger = ledger if ledger is not None else LEDGER
        if charge:
            self.ledger.charge(self.ledger_tag, charge)

    @property
    def is_leaf(self) -> bool:
        return self.op == "leaf"

    def release(self) -> None:
        if self.released or self.is_leaf:
            return
        self.released = True
        self.saved = None
        if self.charge:
            self.ledger.release(self.ledger_tag, self.charge)

    def __del__(self):
        try:
            if not self.released and self.charge:
                self.released = True
                self.ledger.release(self.ledger_tag, self.charge)
        except Exception:  # interpreter shutdown
            pass


class Tensor:
    """Dense 2-D (or scalar/vector) floating value with optional graph linkage."""

    __slots__ = ("values", "node", "grad", "name", "__weakref__")

    def __init__(self, values, node: Node | None = None, dtype=None, name: str = ""):
        arr = np.asarray(values, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.values = arr
        self.node = node
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def is_param(self) -> bool:
        return self.node is not None and self.node.is_param

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, graph={'yes' if self.node else 'no'})"


def parameter(values, name: str = "", dtype=None) -> Tensor:
    """A trainable leaf. Its grad buffer is pre-zeroed and accumulated into in place."""
    t = Tensor(np.array(values, dtype=dtype), name=name)
    t.grad = np.zeros_like(t.values)
    node = Node("leaf", tag=name or "param")
    node.sink = t.grad
    node.is_param = True
    t.node = node
    return t


def track(t: Tensor, name: str = "") -> Tensor:
    """Start a fresh graph at ``t``'s values (a non-parameter leaf)."""
    return Tensor(t.values, node=Node("leaf", tag=name or "leaf"), name=name)


def sever(t: Tensor) -> Tensor:
    """Value-identical tensor with no graph; upstream nodes become collectable."""
    return Tensor(t.values, name=t.name)


def mark_retain(t: Tensor) -> None:
    if t.node is None:
        raise GraphError("mark_retain needs a tensor that is part of a graph")
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.node.retain = True
    t.node.sink = t.grad


def zero_grads(tensors) -> None:
    for t in tensors:
        if t.grad is not None:
            t.grad[...] = 0.0


BackwardFn = Callable[[np.ndarray, object, dict], Sequence["np.ndarray | None"]]
BACKWARD_RULES: dict[str, BackwardFn] = {}


def _collect(root: Node) -> list[Node]:
    seen: dict[int, Node] = {}
    stack = [root]
    while stack:
        n = stack.pop()
        if n.index in seen:
            continue
        if n.released:
            raise GraphError(
                f"graph was released after a previous backward (node {n.op}#{n.index}); "
                "recompute the forward pass first")
        seen[n.index] = n
        stack.extend(p for p in n.inputs if p is not None)
    return sorted(seen.values(), key=lambda n: n.index, reverse=True)


def _propagate(root: Node, seed: np.ndarray, release: bool = True) -> None:
    order = _collect(root)
    grads: dict[int, np.ndarray] = {root.index: seed}
    for node in order:
        g = grads.pop(node.index, None)
        if g is not None:
            if node.sink is not None:
                node.sink += g
            if not node.is_leaf:
                in_grads = BACKWARD_RULES[node.op](g, node.saved, node.attrs)
                for parent, pg in zip(node.inputs, in_grads):
                    if parent is None or pg is None:
                        continue
                    prev = grads.get(parent.index)
                    grads[parent.index] = pg if prev is None else prev + pg
        if release:
            node.release()


def backward(root: Tensor, release: bool = True) -> None:
    """Backpropagate from a scalar, accumulating into parameter and retained grads."""
    if root.node is None:
        raise GraphError("backward called on a tensor with no graph")
    if root.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    _propagate(root.node, np.ones_like(root.values), release)


def backward_from(t: Tensor, seed, release: bool = True) -> None:
    """Backpropagate from a non-scalar node with an externally supplied cotangent."""
    if t.node is None:
        raise GraphError("backward_from called on a tensor with no graph")
    seed = np.asarray(seed, dtype=t.dtype)
    if seed.shape != t.shape:
        raise GraphError(f"seed shape {seed.shape} does not match node shape {t.shape}")
    _propagate(t.node, seed, release)
