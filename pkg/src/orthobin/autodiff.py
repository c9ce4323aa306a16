"""Reverse-mode automatic differentiation over dense float64 arrays.

A small define-by-run engine: every operation returns a new ``Tensor`` that
records its parents and the vector-Jacobian products needed to push
gradients back. Graphs are rebuilt every training step and discarded after
``backward``. Only the operations the binarization losses need are
provided; broadcasting is limited to scalar-with-tensor and equal shapes.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class DomainError(ValueError):
    """Operand values lie outside the mathematical domain of an operation."""


class Tensor:
    """Dense float64 value with an optional gradient of the same shape.

    Leaves are created directly (``Tensor(data, requires_grad=True)``);
    interior nodes are created by the module-level operations. ``grad`` is
    populated by :func:`backward` for every node that requires a gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple[Callable[[Array], Array], ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def is_finite(self) -> bool:
        """Validity check: True iff the data contains no NaN or Inf."""
        return bool(np.isfinite(self.data).all())

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Copy of the value with no graph history and no gradient."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; the functional forms below are the primary surface.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def constant(data) -> Tensor:
    """Leaf with no gradient; convenience for datasets and fixed matrices."""
    return _as_tensor(data)


def _node(data: Array, parents: Sequence[Tensor],
          vjps: Sequence[Callable[[Array], Array]]) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._vjps = tuple(vjps)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor the scalar ``loss`` depends on.

    Gradients of a leaf used along several paths accumulate additively.
    All reachable grads are reset at the start of the call, so each
    ``backward`` reports gradients of exactly one graph.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    for node in order:
        node.grad = np.zeros_like(node.data)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        g = node.grad
        for parent, vjp in zip(node._parents, node._vjps):
            if parent.requires_grad:
                parent.grad += vjp(g)


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    data = a.data @ b.data
    return _node(data, (a, b), (
        lambda g: g @ b.data.T,
        lambda g: a.data.T @ g,
    ))


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    data = np.transpose(a.data, axes).copy()
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return _node(data, (a,), (lambda g: np.transpose(g, inv).copy(),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != a.data.size and -1 not in shape:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    data = a.data.reshape(shape).copy()
    old = a.shape
    return _node(data, (a,), (lambda g: g.reshape(old),))


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"concat_rows needs matching columns: {a.shape}, {b.shape}")
    data = np.concatenate([a.data, b.data], axis=0)
    na = a.shape[0]
    return _node(data, (a, b), (
        lambda g: g[:na],
        lambda g: g[na:],
    ))


def pad2d(a: Tensor, rows: tuple[int, int] = (0, 0),
          cols: tuple[int, int] = (0, 0)) -> Tensor:
    """Zero padding of a 2-D tensor; gradient is the matching slice."""
    if a.data.ndim != 2:
        raise ShapeError(f"pad2d expects a matrix, got {a.shape}")
    data = np.pad(a.data, (rows, cols))
    r0, c0 = rows[0], cols[0]
    nr, nc = a.shape
    return _node(data, (a,), (lambda g: g[r0:r0 + nr, c0:c0 + nc],))


def scale_rows(v: Tensor, m: Tensor) -> Tensor:
    """diag(v) @ m for a vector v; rows of m scaled by entries of v."""
    if v.data.ndim != 1 or m.data.ndim != 2 or v.shape[0] != m.shape[0]:
        raise ShapeError(f"scale_rows: {v.shape} vs {m.shape}")
    data = m.data * v.data[:, None]
    return _node(data, (v, m), (
        lambda g: (g * m.data).sum(axis=1),
        lambda g: g * v.data[:, None],
    ))


def scale_cols(m: Tensor, v: Tensor) -> Tensor:
    """m @ diag(v) for a vector v; columns of m scaled by entries of v."""
    if v.data.ndim != 1 or m.data.ndim != 2 or v.shape[0] != m.shape[1]:
        raise ShapeError(f"scale_cols: {m.shape} vs {v.shape}")
    data = m.data * v.data[None, :]
    return _node(data, (m, v), (
        lambda g: g * v.data[None, :],
        lambda g: (g * m.data).sum(axis=0),
    ))


# ---------------------------------------------------------------------------
# Elementwise operations (equal shapes or scalar-with-tensor only)


def _binary_shapes(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeError(f"incompatible elementwise shapes {a.shape} and {b.shape}")


def _reduce_to(g: Array, shape: tuple[int, ...]) -> Array:
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)  # scalar operand broadcast against array


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b)
    data = a.data + b.data
    return _node(data, (a, b), (
        lambda g: _reduce_to(g, a.shape),
        lambda g: _reduce_to(g, b.shape),
    ))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b)
    data = a.data - b.data
    return _node(data, (a, b), (
        lambda g: _reduce_to(g, a.shape),
        lambda g: _reduce_to(-g, b.shape),
    ))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b)
    data = a.data * b.data
    return _node(data, (a, b), (
        lambda g: _reduce_to(g * b.data, a.shape),
        lambda g: _reduce_to(g * a.data, b.shape),
    ))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), (lambda g: g * c,))


def abs_(a: Tensor) -> Tensor:
    data = np.abs(a.data)
    return _node(data, (a,), (lambda g: g * np.sign(a.data),))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value")
    return _node(np.log(a.data), (a,), (lambda g: g / a.data,))


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _node(data, (a,), (lambda g: g * data,))


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), (lambda g: g * 2.0 * a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _node(np.where(mask, a.data, 0.0), (a,), (lambda g: g * mask,))


def sign_ste(w: Tensor) -> Tensor:
    """Elementwise sign with sign(0) = +1 and a straight-through gradient.

    The forward output is strictly binary. The backward pass multiplies the
    incoming gradient by the clipped piecewise-linear surrogate
    ``2 + 2w`` on [-1, 0), ``2 - 2w`` on [0, 1) and 0 elsewhere.
    """
    data = np.where(w.data >= 0.0, 1.0, -1.0)
    wd = w.data

    def vjp(g: Array) -> Array:
        d = np.where((wd >= -1.0) & (wd < 0.0), 2.0 + 2.0 * wd,
                     np.where((wd >= 0.0) & (wd < 1.0), 2.0 - 2.0 * wd, 0.0))
        return g * d

    return _node(data, (w,), (vjp,))


def ste_surrogate(w: Array) -> Array:
    """The sign surrogate derivative as a plain array function (for tests)."""
    w = np.asarray(w, dtype=np.float64)
    return np.where((w >= -1.0) & (w < 0.0), 2.0 + 2.0 * w,
                    np.where((w >= 0.0) & (w < 1.0), 2.0 - 2.0 * w, 0.0))


# ---------------------------------------------------------------------------
# Reductions


def sum_all(a: Tensor) -> Tensor:
    return _node(np.asarray(a.data.sum()), (a,),
                 (lambda g: np.full_like(a.data, g.reshape(())),))


def frobenius_sq(a: Tensor) -> Tensor:
    """Sum of squared entries; gradient is 2a."""
    data = np.asarray(np.sum(a.data * a.data))
    return _node(data, (a,), (lambda g: g.reshape(()) * 2.0 * a.data,))


def l1_norm(a: Tensor) -> Tensor:
    """Sum of absolute entries; subgradient sign(a) with 0 at zeros."""
    data = np.asarray(np.sum(np.abs(a.data)))
    return _node(data, (a,), (lambda g: g.reshape(()) * np.sign(a.data),))


# ---------------------------------------------------------------------------
# Loss head


def softmax_cross_entropy(logits: Tensor, labels: Array) -> Tensor:
    """Mean softmax cross-entropy over a batch of logits (B x C)."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise DomainError("label outside [0, num_classes)")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1)) + zmax[:, 0]
    picked = z[np.arange(n), labels]
    data = np.asarray(np.mean(lse - picked))

    def vjp(g: Array) -> Array:
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        return g.reshape(()) * p / n

    return _node(data, (logits,), (vjp,))
