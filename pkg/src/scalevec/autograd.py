"""Tensors and a reverse-mode gradient tape.

A :class:`Tape` records one node per differentiable operation while it is
active. :meth:`Tape.backward` walks the nodes in reverse recording order,
so gradient accumulation order is fixed and runs are reproducible.

    >>> w = Tensor(np.ones(3), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = ops.sum(ops.mul(w, Tensor(np.arange(3.0))))
    >>> tape.backward(loss)[w]
    array([0., 1., 2.])
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from scalevec.errors import NumericError, UsageError


class Tensor:
    """Immutable float array plus a flag saying whether gradients are wanted.

    The wrapped array is marked read-only. Parameters are updated by
    rebinding ``data`` to a fresh array, never by writing into it.
    """

    __slots__ = ("_data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.data = arr

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, arr):
        arr = np.asarray(arr)
        if arr.flags.writeable:
            arr = arr.view()
            arr.flags.writeable = False
        self._data = arr

    @property
    def shape(self):
        return self._data.shape

    @property
    def ndim(self):
        return self._data.ndim

    @property
    def dtype(self):
        return self._data.dtype

    @property
    def size(self):
        return self._data.size

    def numpy(self):
        return self._data

    def item(self):
        return self._data.item()

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self._data)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence]


@dataclass
class Tape:
    """Records operations for one forward pass.

    ``decisions`` collects the discrete choices made during the pass
    (argmax maps, ReLU masks). Finite-difference checks compare them to
    detect coordinates where a perturbation changes a branch.
    """

    nodes: list = field(default_factory=list)
    decisions: list = field(default_factory=list)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def record(self, op, inputs, output, backward):
        self.nodes.append(Node(op, tuple(inputs), output, backward))

    def note(self, decision):
        self.decisions.append(decision)

    def backward(self, loss: Tensor, params=None):
        """Gradients of scalar ``loss`` for ``params`` (all tape leaves if None).

        Returns a dict mapping each tensor to its gradient array. Tensors not
        on any path from ``loss`` receive zeros.
        """
        if loss.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            if node.output is not loss:
                del grads[id(node.output)]
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        if params is None:
            params = _leaves(self.nodes)
        out = {}
        for p in params:
            g = grads.get(id(p))
            out[p] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype).reshape(p.shape)
        return out


def _leaves(nodes):
    produced = {id(n.output) for n in nodes}
    seen, leaves = set(), []
    for n in nodes:
        for t in n.inputs:
            if t.requires_grad and id(t) not in produced and id(t) not in seen:
                seen.add(id(t))
                leaves.append(t)
    return leaves


_local = threading.local()


def _stack():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def current_tape():
    s = _stack()
    return s[-1] if s else None


def backward(loss, params=None, tape=None):
    """Module-level convenience for ``tape.backward``; uses the innermost active tape."""
    tape = tape or current_tape()
    if tape is None:
        raise UsageError("backward called with no recording tape")
    return tape.backward(loss, params)


def make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn, check=True) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and record it on the active tape."""
    if check and not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    tape = current_tape()
    if requires and tape is not None:
        tape.record(op, inputs, out, backward_fn)
    return out


def note_decision(decision):
    tape = current_tape()
    if tape is not None:
        tape.note(decision)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else None))
