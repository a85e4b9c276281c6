"""Dense float tensors and the per-forward reverse-mode tape.

A ``Tensor`` wraps a numpy array (float64 by default, float32 as an opt-in
speed mode). Gradients are only recorded while a ``Tape`` is active on the
current thread; outside a tape every op is a plain numpy computation, which
is the fast path used for streaming inference.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class NumericError(ValueError):
    """A non-finite value appeared in an op result (debug mode only)."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class GraphError(RuntimeError):
    """The gradient graph is structurally broken (detached/foreign tensor)."""


_STATE = threading.local()

_DEBUG_NAN = False


def set_debug_nan(enabled: bool) -> None:
    """Toggle post-op finiteness checking (off by default for speed)."""
    global _DEBUG_NAN
    _DEBUG_NAN = bool(enabled)


def debug_nan_enabled() -> bool:
    return _DEBUG_NAN


def active_tape() -> "Tape | None":
    return getattr(_STATE, "tape", None)


class Tensor:
    """A dense row-major float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"


class Node:
    """One recorded op: parent tensors plus a vector-Jacobian product."""

    __slots__ = ("out", "parents", "vjp", "name")

    def __init__(self, out: Tensor, parents: Sequence[Tensor],
                 vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]],
                 name: str):
        self.out = out
        self.parents = tuple(parents)
        self.vjp = vjp
        self.name = name


class Tape:
    """Records ops for one forward pass; context-managed, one per thread.

    ``backward`` walks the node list in reverse append order, which is a
    reverse topological order by construction, so each node is visited
    exactly once. Gradients accumulate into ``.grad`` of leaf tensors that
    set ``requires_grad``.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._seen: set[int] = set()

    def __enter__(self) -> "Tape":
        if active_tape() is not None:
            raise GraphError("a tape is already active on this thread")
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.tape = None
        return False

    def record(self, out: Tensor, parents: Sequence[Tensor], vjp, name: str) -> None:
        for p in parents:
            if p.node is not None and id(p.node) not in self._seen:
                raise GraphError(
                    f"op '{name}' consumed a tensor recorded on a different tape")
        node = Node(out, parents, vjp, name)
        out.node = node
        self.nodes.append(node)
        self._seen.add(id(node))

    def backward(self, loss: Tensor) -> None:
        if loss.node is None:
            raise GraphError(
                "backward target is detached: no op produced it under this tape")
        if id(loss.node) not in self._seen:
            raise GraphError("backward target belongs to a different tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward target must be scalar, got shape {loss.shape}")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaf_grads: dict[int, np.ndarray] = {}
        leaves: dict[int, Tensor] = {}

        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.vjp(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                if parent.node is not None:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
                elif parent.requires_grad:
                    key = id(parent)
                    if key in leaf_grads:
                        leaf_grads[key] = leaf_grads[key] + pg
                    else:
                        leaf_grads[key] = pg
                        leaves[key] = parent

        for key, pg in leaf_grads.items():
            leaf = leaves[key]
            pg = pg.astype(leaf.data.dtype, copy=False)
            if leaf.grad is None:
                leaf.grad = pg.copy()
            else:
                leaf.grad = leaf.grad + pg

        self.release()

    def release(self) -> None:
        """Break Tensor<->Node cycles so per-step graphs free immediately.

        Called by ``backward``; a tape supports exactly one backward pass.
        """
        for node in self.nodes:
            node.out.node = None
            node.parents = ()
            node.vjp = None
        self.nodes.clear()
        self._seen.clear()


def check_finite(arr: np.ndarray, opname: str) -> None:
    if _DEBUG_NAN and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by op '{opname}'")
