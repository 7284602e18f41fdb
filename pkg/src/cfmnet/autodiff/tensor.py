"""Dense tensors that record the operations producing them.

Every op output keeps a reference to its parents and a closure mapping the
upstream gradient to one gradient per parent.  ``Tensor.backward`` replays
those closures in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from ..errors import ContractError

_GRAD_ENABLED = True
_DEFAULT_DTYPE = np.float32

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def default_dtype() -> type:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def high_precision() -> Iterator[None]:
    """Create new tensors in float64 inside the block (used by gradient checks)."""
    global _DEFAULT_DTYPE
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.float64
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording; ops inside the block produce constant tensors."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An n-d array plus the bookkeeping needed for reverse-mode differentiation.

    Activations use the NCHW layout; parameters may have any rank.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else _DEFAULT_DTYPE
        self.data: np.ndarray = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- array protocol ----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    # -- arithmetic ----------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        from . import ops

        return ops.add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        from . import ops

        return ops.add(self, ops.neg(_wrap(other, self.dtype)))

    def __rsub__(self, other) -> "Tensor":
        from . import ops

        return ops.add(_wrap(other, self.dtype), ops.neg(self))

    def __neg__(self) -> "Tensor":
        from . import ops

        return ops.neg(self)

    def __mul__(self, other) -> "Tensor":
        from . import ops

        return ops.mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        from . import ops

        return ops.sum_all(self)

    # -- differentiation -----------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` of every leaf that requires it.

        Only scalar tensors can seed the pass.  Leaf gradients accumulate
        across calls; intermediate gradients are kept local to the call.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar tensor, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` through recorded ops, parents before children.

    This list is the computation record replayed by ``backward``; each node
    appears exactly once.  Iterative so deep networks do not hit the
    recursion limit.
    """
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))
    return order


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))
