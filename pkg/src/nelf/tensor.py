"""Dense rank-4 tensors with reverse-mode automatic differentiation.

The graph is built eagerly: every differentiable op returns a ``Tensor4``
holding its inputs and a backward closure.  Calling :func:`backward` on a
scalar-valued node walks the graph in reverse topological order and
accumulates gradients into every reachable :class:`Parameter` (and into
``requires_grad`` input tensors).

Activations are always rank-4 in (batch, channel, height, width) layout.
Weights and biases live in :class:`Parameter`, which may carry rank-1/2/4
arrays; parameters are graph leaves, so only activations appear in the
topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an op's contract."""


class GraphError(RuntimeError):
    """Raised when backward is called on a node with no attached graph."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return np.ascontiguousarray(arr)


class Tensor4:
    """A (B, C, H, W) array plus the autodiff bookkeeping to reach it.

    ``grad`` stays ``None`` until a backward pass deposits something, and is
    only retained on graph leaves; repeated backward calls accumulate (the
    training loop owns zeroing).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = _as_float_array(data, dtype)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor4 needs a rank-4 (B,C,H,W) array, got shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple["Tensor4", ...] = ()
        # maps upstream grad -> per-parent grads; also accumulates Parameter grads
        self._grad_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numel(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor4":
        return Tensor4(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor4(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Parameter:
    """A named trainable array with a same-shape gradient accumulator.

    The gradient buffer exists from construction and is zero until the first
    backward pass; ``zero_grad`` resets it between optimizer steps.
    """

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name: str, dtype=None):
        self.value = _as_float_array(value, dtype)
        self.grad = np.zeros_like(self.value)
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def numel(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def accumulate(self, delta: np.ndarray) -> None:
        self.grad += delta.astype(self.grad.dtype, copy=False)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape}, dtype={self.value.dtype})"


ArrayLike = Union[np.ndarray, Parameter]


def param_value(p: ArrayLike) -> np.ndarray:
    """Unwrap a Parameter (or pass an ndarray through) for forward math."""
    return p.value if isinstance(p, Parameter) else np.asarray(p)


def make_node(
    data: np.ndarray,
    parents: Tuple[Tensor4, ...],
    grad_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    needs_grad: bool,
) -> Tensor4:
    """Wrap an op result; attaches the graph only when grads are enabled."""
    out = Tensor4(data)
    if _GRAD_ENABLED and needs_grad:
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def backward(loss: Tensor4) -> None:
    """Populate gradients of everything reachable from a scalar loss node.

    Gradients accumulate across calls; a node produced outside any graph
    (no parents, no grad requirement) is rejected as detached.
    """
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._grad_fn is None and not loss._parents:
        raise GraphError("backward on a detached graph: the loss node records no operations")

    topo: list[Tensor4] = []
    visited: set[int] = set()
    stack: list[Tuple[Tensor4, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            # graph leaf: retain the gradient for inspection
            if node.requires_grad:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g
            continue
        parent_grads = node._grad_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            # closures may hand back aliased buffers (e.g. the upstream grad
            # itself for a skip connection), so join points allocate fresh
            grads[id(parent)] = pg if acc is None else acc + pg
