"""Tensor graph nodes, reverse-mode backward pass, and finite-difference
gradient checking."""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class NumericFaultError(Exception):
    """A kernel produced NaN or Inf."""


class GraphError(Exception):
    """Backward walked into an inconsistent graph."""


_GRAD_ENABLED = True


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextmanager
def no_grad():
    """Disable graph recording (inference/evaluation mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _all_finite(arr: np.ndarray) -> bool:
    # single-pass check: any NaN/Inf makes the sum non-finite (Inf-Inf -> NaN)
    return bool(np.isfinite(arr.sum()))


class Tensor:
    """Float64 array plus an optional record of the kernel that produced it.

    ``grad`` accumulates d(loss)/d(self) during :func:`backward`; it is
    allocated lazily and zeroed by ``zero_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if not _all_finite(arr):
            raise NumericFaultError(f"non-finite values entering tensor {name or ''}".strip())
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def accumulate_grad(self, g: np.ndarray):
        if g.shape != self.data.shape:
            raise GraphError(
                f"gradient shape {g.shape} does not match value shape {self.data.shape}"
            )
        if self.grad is None:
            # copy: backward closures may hand out views/aliased buffers
            self.grad = np.array(g)
        else:
            self.grad += g

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"


def make_node(out_data, parents, backward_fn, op_name) -> Tensor:
    """Wrap a kernel output; records the graph edge only when differentiation
    is enabled and some parent requires a gradient."""
    arr = np.asarray(out_data, dtype=np.float64)
    if not _all_finite(arr):
        raise NumericFaultError(f"kernel {op_name!r} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.grad = None
    out.name = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = tuple(parents) if needs else ()
    out._backward_fn = backward_fn if needs else None
    return out


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate ``grad`` on every tensor reachable from ``loss``.

    ``loss`` must be scalar (shape () or size 1).
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not require grad; nothing to differentiate")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward_fn is None:
            continue
        grads = node._backward_fn(node.grad)
        if len(grads) != len(node._parents):
            raise GraphError("backward function arity mismatch")
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            parent.accumulate_grad(np.asarray(g, dtype=np.float64))


def grad_check(f, x: Tensor, eps: float = 1e-5, max_coords: int | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic. When
    ``max_coords`` is given, a deterministic stride subsample of coordinates
    is checked (used for large parameter tensors).
    """
    x.grad = None
    x.requires_grad = True
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    n = flat.size
    if max_coords is not None and n > max_coords:
        idxs = np.linspace(0, n - 1, max_coords).astype(np.int64)
        idxs = np.unique(idxs)
    else:
        idxs = np.arange(n)

    worst = 0.0
    ana_flat = analytic.reshape(-1)
    with no_grad():
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(x).data)
            flat[i] = orig - eps
            lo = float(f(x).data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            denom = max(1e-8, abs(ana_flat[i]) + abs(numeric))
            worst = max(worst, abs(ana_flat[i] - numeric) / denom)
    return worst
