"""Dense float tensors with a reverse-mode autodiff tape.

The payload is a numpy ndarray, row-major with the last axis fastest.
Activations use the (batch, channel, height, width) axis order throughout;
token tensors are (batch, tokens, dim). Training runs in float32, gradient
checking runs the same code paths in float64.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .errors import NumericError

_GRAD_ENABLED = True


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the context (inference, FD probes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class TapeNode:
    """One recorded op: parent references plus the vector-Jacobian callback.

    ``vjp(grad_out) -> tuple(grad_per_parent)`` where an entry may be None
    for parents that do not need a gradient.
    """

    __slots__ = ("op", "parents", "vjp", "consumed")

    def __init__(self, op: str, parents: Tuple["Tensor", ...],
                 vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.consumed = False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional[TapeNode] = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # -- autodiff ------------------------------------------------------
    def backward(self) -> None:
        """Accumulate dself/dleaf into ``.grad`` of every reachable leaf.

        ``self`` must be scalar. The tape below this root can be walked
        once; a second call on the same root raises.
        """
        if self.size != 1:
            raise NumericError(f"backward: loss must be scalar, got shape {self.shape}")
        root = self.node
        if root is None:
            if self.requires_grad:
                self.grad = np.ones_like(self.data)
                return
            raise NumericError("backward: tensor is not attached to the tape")
        if root.consumed:
            raise NumericError("backward: tape already consumed; rebuild the graph first")
        root.consumed = True

        # iterative post-order over tensors that carry tape nodes
        topo: list[Tensor] = []
        seen = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                topo.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t.node.parents:
                if p.node is not None and id(p) not in seen:
                    stack.append((p, False))

        flow = {id(self): np.ones_like(self.data)}
        for t in reversed(topo):
            g = flow.pop(id(t), None)
            if g is None:
                continue
            for p, pg in zip(t.node.parents, t.node.vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p.node is None:
                    p.grad = pg if p.grad is None else p.grad + pg
                else:
                    cur = flow.get(id(p))
                    flow[id(p)] = pg if cur is None else cur + pg

    # -- operator sugar (delegates to ops) ------------------------------
    def _ops(self):
        from . import ops
        return ops

    def __add__(self, other):
        return self._ops().add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return self._ops().mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return self._ops().sub(self, other)

    def __rsub__(self, other):
        return self._ops().sub(other, self)

    def __truediv__(self, other):
        return self._ops().div(self, other)

    def __neg__(self):
        return self._ops().neg(self)

    def __pow__(self, exponent):
        return self._ops().pow(self, exponent)

    def __getitem__(self, idx):
        return self._ops().getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self._ops().reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return self._ops().transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return self._ops().sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return self._ops().mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A trainable leaf tensor collected by ``Module.named_parameters``."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
