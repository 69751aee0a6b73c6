"""Reverse-mode tape over numpy arrays.

A Tensor wraps one contiguous float buffer (float32 for training, float64 for
gradient checking) plus an optional gradient buffer of the same shape.  Ops in
:mod:`pointgrid.nncore.ops` build a DAG of Tensors; ``backward()`` walks it in
reverse topological order and accumulates into ``.grad``.

The op set is fixed and small on purpose: only what the height network needs.
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeMismatch(Exception):
    pass


class NonFiniteValues(Exception):
    """An op produced NaN/Inf while finite checks were enabled."""


_grad_enabled = True
_finite_checks = False


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_finite_checks(enabled: bool) -> None:
    """When enabled, every op output is checked for NaN/Inf (slow; for tests)."""
    global _finite_checks
    _finite_checks = enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @staticmethod
    def _result(data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        """Build an op output; records the edge only when a parent needs grad."""
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _finite_checks and not np.all(np.isfinite(data)):
            raise NonFiniteValues(f"op produced non-finite values (shape {data.shape})")
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self, grad=None, release: bool = True) -> None:
        """Backpropagate from this node; ``grad`` seeds the cotangent (defaults
        to ones for scalars).  With ``release``, graph edges and interior
        gradients are dropped afterwards so large buffers free immediately;
        leaf (parameter/input) gradients are kept.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeMismatch(f"seed gradient shape {grad.shape} != {self.data.shape}")

        # Collect the reachable graph and count consumer edges per node; a node's
        # backward may only run once every consumer has deposited its gradient
        # share (Kahn's algorithm on the reversed edges).  A naive DFS postorder
        # mis-orders diamonds with unequal branch lengths, e.g. skip connections.
        nodes: list[Tensor] = []
        consumers: dict[int, int] = {}
        seen: set[int] = {id(self)}
        stack: list[Tensor] = [self]
        while stack:
            node = stack.pop()
            nodes.append(node)
            for p in node._parents:
                consumers[id(p)] = consumers.get(id(p), 0) + 1
                if id(p) not in seen:
                    seen.add(id(p))
                    stack.append(p)

        self._accum(grad)
        ready: list[Tensor] = [self]
        while ready:
            node = ready.pop()
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            for p in node._parents:
                consumers[id(p)] -= 1
                if consumers[id(p)] == 0:
                    ready.append(p)
        if release:
            for node in nodes:
                if node._backward is not None:
                    node._backward = None
                    node._parents = ()
                    node.grad = None  # interior node: gradient no longer needed

    def __repr__(self) -> str:
        has_grad = "yes" if self.grad is not None else "no"
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={has_grad})"
