"""Dense tensors and the reverse-mode tape.

A :class:`Graph` is a dynamic tape: while it is the active graph, every op
whose inputs require gradients appends a node holding its inputs and a
backward closure. ``Graph.backward`` replays the nodes in reverse execution
order, once each. Outside an active graph nothing is recorded, which is how
inference and finite-difference probes run.

    with Graph() as tape:
        loss = f(params)
    tape.backward(loss)      # fills p.grad for every leaf used

The element type defaults to float64. ``DYNAMIXER_FLOAT=32`` at import time
(or :func:`set_default_dtype`) switches to float32.
"""
import os
import threading

import numpy as np

from dynamixer.errors import ContractError, DimensionError, NumericError

_FLOAT_ENV = {"32": np.float32, "64": np.float64, "float32": np.float32, "float64": np.float64}

_default_dtype = _FLOAT_ENV.get(os.environ.get("DYNAMIXER_FLOAT", "64").strip().lower(), None)
if _default_dtype is None:
    raise ImportError("DYNAMIXER_FLOAT must be 32 or 64")

# Finite-output check after every op; off by default since it costs a pass.
DEBUG = os.environ.get("DYNAMIXER_DEBUG", "") not in ("", "0")

_local = threading.local()


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype):
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported element type {dtype}")
    _default_dtype = dtype


def is_64bit():
    return _default_dtype is np.float64


class Tensor:
    """A float ndarray plus the bookkeeping the tape needs."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(_default_dtype)
        if any(extent < 1 for extent in arr.shape):
            raise DimensionError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # Arithmetic sugar; the implementations live in ops.
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a constant")
        return _ops().scale(self, 1.0 / other)

    def __neg__(self):
        return _ops().scale(self, -1.0)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops().permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis, keepdims)


def _ops():
    from dynamixer import ops

    return ops


class Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


def _graph_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_graph():
    stack = _graph_stack()
    return stack[-1] if stack else None


class Graph:
    """Append-only tape of executed ops, confined to the creating thread."""

    def __init__(self):
        self.nodes = []
        self._consumed = False

    def __enter__(self):
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc):
        _graph_stack().pop()

    def backward(self, loss, grad=None):
        """Propagate from ``loss`` and set ``.grad`` on every leaf input.

        Leaves that took part in the graph but received no gradient get
        zeros. Returns the list of leaves that were assigned.
        """
        if self._consumed:
            raise ContractError("graph already consumed by a previous backward()")
        if grad is None:
            if loss.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        self._consumed = True

        produced = {id(node.out) for node in self.nodes}
        grads = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        leaves = {}
        if loss.requires_grad and id(loss) not in produced:
            leaves[id(loss)] = loss

        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key not in produced:
                    leaves[key] = t
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi

        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves.setdefault(id(t), t)
        for key, t in leaves.items():
            g = grads.get(key)
            t.grad = np.zeros_like(t.data) if g is None else g
        self.nodes = []
        return list(leaves.values())


class no_grad:
    """Suspend recording inside an active graph."""

    def __enter__(self):
        _graph_stack().append(None)
        return self

    def __exit__(self, *exc):
        _graph_stack().pop()


def record(data, inputs, backward):
    """Wrap ``data`` as an op output and tape it when any input needs grad."""
    out = Tensor(data)
    graph = current_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.nodes.append(Node(out, inputs, backward))
    if DEBUG and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise NumericError("non-finite output from finite inputs")
    return out
