"""Dense 4-D tensors with a dynamically recorded reverse-mode autodiff graph.

Every differentiable operation (see :mod:`noise2norm.ops`) appends one node to
the thread's active :class:`Graph` when at least one input requires a
gradient. :func:`backward` walks that list once in reverse append order and
then clears it, so a graph lives exactly as long as one forward/backward pass.

Random numbers come from numpy's Philox4x32-10 counter-based bit generator;
Gaussian samples use numpy's ziggurat ``standard_normal``. Samples are always
drawn in float64 and then cast, so a seed yields the same values (up to the
final rounding) in both precisions.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import InvalidArgumentError, NonFiniteError, ShapeError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class Node:
    kind: str
    inputs: tuple
    output: "Tensor"
    backward: BackwardFn


@dataclass
class Graph:
    """Append-only operation list; inputs always precede the nodes using them."""

    nodes: list = field(default_factory=list)

    def record(self, kind: str, inputs: tuple, output: "Tensor", backward: BackwardFn) -> int:
        self.nodes.append(Node(kind, inputs, output, backward))
        return len(self.nodes) - 1

    def clear(self) -> None:
        for node in self.nodes:
            node.output.node_id = None
        self.nodes.clear()


class _State(threading.local):
    def __init__(self) -> None:
        self.graph = Graph()
        self.grad_enabled = True
        self.dtype = np.dtype(np.float32)


_state = _State()


def active_graph() -> Graph:
    return _state.graph


def clear_graph() -> None:
    _state.graph.clear()


def grad_enabled() -> bool:
    return _state.grad_enabled


def default_dtype() -> np.dtype:
    return _state.dtype


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Set the dtype used for newly created tensors (float32 or float64)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise InvalidArgumentError(f"unsupported precision {dtype}")
    prev = _state.dtype
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    """A 4-D (n, c, h, w) array that can take part in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_is_leaf")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(default_dtype() if dtype is None else dtype)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are 4-D (n, c, h, w); got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._is_leaf = True

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise InvalidArgumentError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; the functions live in ops to keep one implementation
    def __add__(self, other):
        from . import ops
        return ops.add(self, other) if isinstance(other, Tensor) else ops.shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other) if isinstance(other, Tensor) else ops.shift(self, -other)

    def __rsub__(self, other):
        from . import ops
        return ops.shift(ops.scale(self, -1.0), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other) if isinstance(other, Tensor) else ops.scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other) if isinstance(other, Tensor) else ops.scale(self, 1.0 / other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


def make_result(kind: str, data: np.ndarray, inputs: tuple, backward_fn: BackwardFn) -> Tensor:
    """Wrap an op's output and record it on the graph when needed."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{kind} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = None
    out._is_leaf = True
    out.requires_grad = False
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._is_leaf = False
        out.node_id = _state.graph.record(kind, inputs, out, backward_fn)
    return out


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every trainable leaf reachable from a scalar root.

    Gradients add into any existing ``grad`` buffer. The graph is cleared
    afterwards, also when the root does not require a gradient.
    """
    graph = _state.graph
    try:
        if root.shape != (1, 1, 1, 1):
            raise InvalidArgumentError(f"backward needs a (1, 1, 1, 1) root, got {root.shape}")
        if not root.requires_grad:
            return
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        leaves: dict[int, Tensor] = {id(root): root} if root._is_leaf else {}
        for node in reversed(graph.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            for t, g in zip(node.inputs, node.backward(g_out)):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                    if t._is_leaf:
                        leaves[key] = t
        for key, t in leaves.items():
            g = grads[key].astype(t.dtype, copy=False)
            t.grad = g if t.grad is None else t.grad + g
    finally:
        graph.clear()


def randn(shape, mean: float = 0.0, std: float = 1.0, seed: int = 0, dtype=None) -> Tensor:
    """Gaussian samples N(mean, std**2) from a Philox stream keyed by ``seed``."""
    if not std > 0:
        raise InvalidArgumentError(f"std must be > 0, got {std}")
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4 or min(shape) < 1:
        raise InvalidArgumentError(f"shape must be four positive counts, got {shape}")
    rng = np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))
    values = rng.standard_normal(shape) * std + mean
    return Tensor(values.astype(dtype if dtype is not None else default_dtype()))


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Build a tensor in the current default precision."""
    return Tensor(np.asarray(data, dtype=default_dtype()), requires_grad=requires_grad)
