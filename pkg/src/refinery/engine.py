"""Dense tensors and reverse-mode differentiation over a dynamic tape.

Every primitive records one :class:`Node` when any operand requires a
gradient. Nodes carry a monotonically increasing sequence number, so the
set of nodes reachable from a loss, sorted by that number, is already a
topological order. :class:`Tape` is that ordered list; :func:`backward`
builds it and walks it in reverse.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

_state = threading.local()
_seq = itertools.count()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A numpy array with an optional gradient and a link to its producer.

    Feature maps are rank 4 ``(n, c, h, w)``; parameters may have any rank
    (a bias is ``(c,)``) and losses are rank 0.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data)
        if self.data.dtype.kind not in "fc":
            self.data = self.data.astype(np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad=None):
        backward(self, grad)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


class Node:
    """One recorded primitive application.

    ``backward_fn`` maps the output gradient to a tuple of operand gradients
    (``None`` for operands that need none). Saved forward values live in its
    closure.
    """

    __slots__ = ("seq", "op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: Sequence[Tensor], backward_fn: Callable):
        self.seq = next(_seq)
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``out_data`` and attach a node when any input needs a gradient."""
    out = Tensor(out_data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward_fn)
    return out


class Tape:
    """Nodes reachable from ``root`` in recording (topological) order."""

    def __init__(self, root: Tensor):
        seen = set()
        nodes = []
        stack = [root]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda n: n.seq)
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)

    def ops(self):
        return [n.op for n in self.nodes]


def backward(root: Tensor, grad=None):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Gradients add onto whatever is already stored, so two calls without
    zeroing double every leaf gradient.
    """
    if not root.requires_grad:
        raise RuntimeError("backward() on a tensor that does not require grad")
    if grad is None:
        if root.data.size != 1:
            raise RuntimeError("implicit gradient only defined for single-element tensors")
        grad = np.ones_like(root.data)
    tape = Tape(root)
    # intermediate gradients are keyed by the producing node
    grads = {id(root.node): np.asarray(grad, dtype=root.dtype)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node is None:
                if t.grad is None:
                    t.grad = np.array(gi, dtype=t.dtype, copy=True)
                else:
                    t.grad = t.grad + gi
            else:
                k = id(t.node)
                grads[k] = grads[k] + gi if k in grads else gi
