"""Dense float64 tensors that record how they were computed.

Every op builds a node holding its parents and a closure mapping the output
gradient to one gradient per parent.  :func:`backward` walks the graph in
reverse topological order, so each node is visited exactly once.
"""

from __future__ import annotations

import numpy as np

from ..errors import NonFiniteError, ShapeError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")
    # make ``ndarray * Tensor`` defer to Tensor.__rmul__
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, parents=(), backward_fn=None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op!r})"

    def backward(self):
        return backward(self)

    # arithmetic is defined in ops; bound below to avoid a circular import
    def __add__(self, other):
        return _ops.add(self, other)

    def __radd__(self, other):
        return _ops.add(other, self)

    def __sub__(self, other):
        return _ops.sub(self, other)

    def __rsub__(self, other):
        return _ops.sub(other, self)

    def __mul__(self, other):
        return _ops.mul(self, other)

    def __rmul__(self, other):
        return _ops.mul(other, self)

    def __truediv__(self, other):
        return _ops.div(self, other)

    def __rtruediv__(self, other):
        return _ops.div(other, self)

    def __neg__(self):
        return _ops.mul(self, -1.0)

    def __pow__(self, exponent):
        return _ops.power(self, exponent)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def make_node(data, parents, backward_fn, op: str) -> Tensor:
    """Wrap an op result, refusing NaN/Inf."""
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=tuple(parents), backward_fn=backward_fn, op=op)


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor) -> dict:
    """Reverse-mode sweep from a scalar ``output``.

    Leaf tensors with ``requires_grad`` get their ``.grad`` accumulated (so
    repeated calls add up, as with most frameworks).  Returns a mapping from
    ``id(leaf)`` to the gradient produced by this call.
    """
    if output.data.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return {}
    grads = {id(output): np.ones_like(output.data)}
    leaves = {}
    for node in reversed(_topo_order(output)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            leaves[id(node)] = g
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return leaves


def grad(output: Tensor, inputs) -> list:
    """Gradients of ``output`` with respect to ``inputs`` (zeros if disconnected).

    Does not touch ``.grad`` of the inputs.
    """
    saved = [t.grad for t in inputs]
    for t in inputs:
        t.grad = None
    try:
        backward(output)
        return [np.zeros_like(t.data) if t.grad is None else t.grad for t in inputs]
    finally:
        for t, s in zip(inputs, saved):
            t.grad = s


from . import ops as _ops  # noqa: E402
