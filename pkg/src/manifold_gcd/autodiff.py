"""A small reverse-mode autodiff engine over 2-D float64 arrays.

Every value is a matrix; scalars are ``1 x 1``.  Operations are recorded
on a :class:`Tape` in creation order, which is already a topological
order, so the backward pass is a single reverse sweep.

Typical use::

    tape = Tape()
    w = tape.variable(w0)
    loss = ad.mean(ad.relu(ad.matmul(x, w)))
    tape.backward(loss)
    w.grad
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from . import linalg

_ids = itertools.count()


class AutodiffError(ValueError):
    pass


class Node:
    __slots__ = ("tape", "value", "parents", "backward_fn", "requires_grad", "id", "name", "_grad")

    def __init__(self, tape, value, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.tape = tape
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.name = name
        self._grad = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Node{label}(shape={self.shape}, id={self.id})"

    # operator sugar for readability inside loss code
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of operations for one forward/backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._backward_done = False

    def variable(self, value, name: str | None = None) -> Node:
        """A leaf that receives a gradient."""
        return self._leaf(value, True, name)

    def constant(self, value, name: str | None = None) -> Node:
        return self._leaf(value, False, name)

    def _leaf(self, value, requires_grad, name):
        arr = np.array(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        arr = linalg.as_matrix(arr, name or "leaf")
        node = Node(self, arr, requires_grad=requires_grad, name=name)
        self.nodes.append(node)
        return node

    def record(self, value, parents, backward_fn) -> Node:
        requires = any(p.requires_grad for p in parents)
        node = Node(self, value, parents, backward_fn if requires else None, requires)
        self.nodes.append(node)
        return node

    def backward(self, loss: Node) -> None:
        if loss.tape is not self:
            raise AutodiffError("loss was not recorded on this tape")
        if loss.shape != (1, 1):
            raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._backward_done:
            raise AutodiffError("backward already ran on this tape; call zero_grad() first")
        self._backward_done = True
        loss._grad = np.ones((1, 1))
        for node in reversed(self.nodes):
            if node.backward_fn is None or node._grad is None:
                continue
            grads = node.backward_fn(node._grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent._grad is None:
                    parent._grad = np.array(g, dtype=np.float64)
                else:
                    parent._grad = parent._grad + g

    def zero_grad(self) -> None:
        for node in self.nodes:
            node._grad = None
        self._backward_done = False


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise AutodiffError("at least one operand must be a Node")


def _lift(x, tape: Tape) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise AutodiffError("operands belong to different tapes")
        return x
    return tape.constant(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape)


def _check_broadcast(a: Node, b: Node, op: str):
    for sa, sb in zip(a.shape, b.shape):
        if sa != sb and sa != 1 and sb != 1:
            raise AutodiffError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# elementwise and linear ops

def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_broadcast(a, b, "add")
    return tape.record(a.value + b.value, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_broadcast(a, b, "sub")
    return tape.record(a.value - b.value, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Node:
    """Elementwise product; a ``m x 1`` or ``1 x n`` operand broadcasts."""
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_broadcast(a, b, "mul")
    return tape.record(a.value * b.value, (a, b),
                       lambda g: (_unbroadcast(g * b.value, a.shape),
                                  _unbroadcast(g * a.value, b.shape)))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return a.tape.record(a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.shape[1] != b.shape[0]:
        raise AutodiffError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    return tape.record(a.value @ b.value, (a, b),
                       lambda g: (g @ b.value.T, a.value.T @ g))


def transpose(a: Node) -> Node:
    return a.tape.record(a.value.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Node, shape: tuple[int, int]) -> Node:
    if len(shape) != 2:
        raise AutodiffError("reshape target must be 2-D")
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise AutodiffError(f"reshape {a.shape} -> {shape}: {exc}") from exc
    return a.tape.record(out.copy(), (a,), lambda g: (g.reshape(a.shape),))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return a.tape.record(out, (a,), lambda g: (g * out,))


def log(a: Node) -> Node:
    if np.any(a.value <= 0):
        raise AutodiffError("log of a non-positive value")
    return a.tape.record(np.log(a.value), (a,), lambda g: (g / a.value,))


def relu(a: Node) -> Node:
    mask = a.value > 0
    return a.tape.record(a.value * mask, (a,), lambda g: (g * mask,))


def stop_gradient(a: Node) -> Node:
    return a.tape.constant(a.value.copy())


# reductions and row ops

def sum(a: Node) -> Node:  # noqa: A001 - mirrors numpy naming
    return a.tape.record(np.array([[a.value.sum()]]), (a,),
                         lambda g: (np.full(a.shape, g[0, 0]),))


def mean(a: Node) -> Node:
    n = a.value.size
    return a.tape.record(np.array([[a.value.mean()]]), (a,),
                         lambda g: (np.full(a.shape, g[0, 0] / n),))


def row_sum(a: Node) -> Node:
    return a.tape.record(a.value.sum(axis=1, keepdims=True), (a,),
                         lambda g: (np.broadcast_to(g, a.shape).copy(),))


def col_mean(a: Node) -> Node:
    m = a.shape[0]
    return a.tape.record(a.value.mean(axis=0, keepdims=True), (a,),
                         lambda g: (np.broadcast_to(g / m, a.shape).copy(),))


def row_select(a: Node, idx) -> Node:
    idx = np.asarray(idx, dtype=np.intp).reshape(-1)
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise AutodiffError("row_select index out of range")

    def back(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return a.tape.record(a.value[idx].copy(), (a,), back)


def dot_rows(a, b) -> Node:
    """Row-wise inner products, returned as an ``m x 1`` column."""
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.shape != b.shape:
        raise AutodiffError(f"dot_rows: shape mismatch {a.shape} vs {b.shape}")
    return tape.record(np.sum(a.value * b.value, axis=1, keepdims=True), (a, b),
                       lambda g: (g * b.value, g * a.value))


def concat_rows(nodes: Sequence[Node]) -> Node:
    if not nodes:
        raise AutodiffError("concat_rows of nothing")
    tape = _tape_of(*nodes)
    nodes = [_lift(n, tape) for n in nodes]
    cols = {n.shape[1] for n in nodes}
    if len(cols) != 1:
        raise AutodiffError(f"concat_rows: column counts differ {sorted(cols)}")
    bounds = np.cumsum([0] + [n.shape[0] for n in nodes])
    return tape.record(np.vstack([n.value for n in nodes]), tuple(nodes),
                       lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(nodes))))


def _masked(x: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return x
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise AutodiffError(f"mask shape {mask.shape} does not match {x.shape}")
    if not np.all(mask.any(axis=1)):
        raise AutodiffError("mask leaves a row with no entries")
    return np.where(mask, x, -np.inf)


def row_softmax(a: Node, mask=None) -> Node:
    """Max-subtracted softmax of each row; masked-out entries get weight 0."""
    x = _masked(a.value, mask)
    e = np.exp(x - x.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (p * (g - np.sum(g * p, axis=1, keepdims=True)),)

    return a.tape.record(p, (a,), back)


def log_softmax_rows(a: Node, mask=None) -> Node:
    """Row-wise log-softmax.  Masked entries are excluded from the
    normaliser and come out as 0 with no gradient."""
    x = _masked(a.value, mask)
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    keep = np.isfinite(out)
    out = np.where(keep, out, 0.0)

    def back(g):
        g = np.where(keep, g, 0.0)
        return (g - p * g.sum(axis=1, keepdims=True),)

    return a.tape.record(out, (a,), back)


def logsumexp_rows(a: Node, mask=None) -> Node:
    """``log sum exp`` of each row over the unmasked entries, as ``m x 1``."""
    x = _masked(a.value, mask)
    top = x.max(axis=1, keepdims=True)
    e = np.exp(x - top)
    total = e.sum(axis=1, keepdims=True)
    p = e / total
    return a.tape.record(top + np.log(total), (a,), lambda g: (g * p,))


def l2_normalize_rows(a: Node) -> Node:
    norms = np.linalg.norm(a.value, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise AutodiffError("l2_normalize_rows: zero row")
    y = a.value / norms

    def back(g):
        return ((g - y * np.sum(g * y, axis=1, keepdims=True)) / norms,)

    return a.tape.record(y, (a,), back)


def nuclear_norm(z: Node, rank: int | None = None) -> Node:
    """Sum of singular values (optionally only the ``rank`` largest).

    The backward rule uses the subgradient ``U V^T`` built from the thin
    SVD.  Where singular values repeat or vanish this is one valid
    subgradient, not the unique gradient.
    """
    u, s, vt = linalg.svd(z.value)
    k = len(s) if rank is None else max(0, min(int(rank), len(s)))
    value = np.array([[s[:k].sum()]])
    sub_grad = u[:, :k] @ vt[:k]
    return z.tape.record(value, (z,), lambda g: (g[0, 0] * sub_grad,))


# finite differences

def numeric_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a matrix."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        fp = fn(x)
        x[i] = orig - eps
        fm = fn(x)
        x[i] = orig
        grad[i] = (fp - fm) / (2 * eps)
    return grad


def grad_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest relative error over coordinates with analytic magnitude
    at least ``floor``.

    Masked coordinates still count if the finite difference there is
    clearly non-zero (above ``1e-6``), reported as an error of 1.
    """
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    big = np.abs(analytic) >= floor
    err = 0.0
    if big.any():
        a, n = analytic[big], numeric[big]
        err = float(np.max(np.abs(a - n) / np.maximum(np.abs(a), np.abs(n))))
    if (~big).any() and float(np.max(np.abs(numeric[~big]))) > 1e-6:
        err = max(err, 1.0)
    return err


def check_gradients(build: Callable[..., Node], inputs: Sequence[np.ndarray], eps: float = 1e-5) -> list[float]:
    """Compare reverse-mode gradients of ``build(*nodes)`` with central
    differences, returning one relative error per input."""

    def forward(values):
        tape = Tape()
        return build(*[tape.variable(v) for v in values]).item()

    tape = Tape()
    nodes = [tape.variable(v) for v in inputs]
    loss = build(*nodes)
    tape.backward(loss)
    errors = []
    for k, node in enumerate(nodes):
        def f(xk, k=k):
            vals = [np.array(v) for v in inputs]
            vals[k] = xk
            return forward(vals)
        num = numeric_grad(f, np.array(inputs[k], dtype=np.float64), eps)
        errors.append(grad_rel_error(node.grad, num))
    return errors
