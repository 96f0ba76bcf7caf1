"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations build an implicit DAG of ``Tensor`` nodes; ``backward`` walks it
once in reverse topological order and accumulates gradients into every
leaf that requires them. The primitive set is deliberately small: exactly
the operations the contrastive loss stack and a small convolutional
encoder need.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ARCCOS_EPS = 1e-7


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


@dataclass
class Diagnostics:
    """Process-wide counters for numerical guard activations."""

    arccos_clamps: int = 0

    def reset(self) -> None:
        self.arccos_clamps = 0


DIAGNOSTICS = Diagnostics()


def _check_finite(arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite values rejected at graph boundary")


class Tensor:
    """Dense n-dimensional float64 value with an optional gradient buffer.

    Leaf tensors are created from data; op results carry a VJP closure and
    references to their parents. Values are immutable by convention once
    recorded in a graph; only the optimizer mutates ``data`` in place, and
    it does so on leaves between graph constructions.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _vjp=None):
        arr = np.asarray(data, dtype=np.float64)
        if _vjp is None:
            _check_finite(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = _parents
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> np.ndarray:
        """Copy of the value, outside the graph."""
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; all arithmetic routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _result(data, parents: tuple[Tensor, ...], vjp) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, _parents=parents if requires else (),
                 _vjp=vjp if requires else _NO_VJP)
    return out


def _NO_VJP(g):  # sentinel for constant results of op application
    return ()


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _result(data, (a, b), vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (-g,)

    return _result(-a.data, (a,), vjp)


# ---------------------------------------------------------------------------
# nonlinearities and scalar functions


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0

    def vjp(g):
        return (g * mask,)

    return _result(np.where(mask, a.data, 0.0), (a,), vjp)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def vjp(g):
        return (g * data,)

    return _result(data, (a,), vjp)


def log(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), vjp)


def cos(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (-g * np.sin(a.data),)

    return _result(np.cos(a.data), (a,), vjp)


def arccos(a) -> Tensor:
    """arccos with the argument clamped to [-1+eps, 1-eps], eps=1e-7.

    Inputs outside the clamp range are counted in ``DIAGNOSTICS`` and
    treated as constants there (zero gradient), which matches the
    flat-after-clamp function actually evaluated.
    """
    a = _as_tensor(a)
    lo, hi = -1.0 + ARCCOS_EPS, 1.0 - ARCCOS_EPS
    outside = (a.data < lo) | (a.data > hi)
    n_out = int(outside.sum())
    if n_out:
        DIAGNOSTICS.arccos_clamps += n_out
    clamped = np.clip(a.data, lo, hi)

    def vjp(g):
        d = -1.0 / np.sqrt(1.0 - clamped * clamped)
        return (np.where(outside, 0.0, g * d),)

    return _result(np.arccos(clamped), (a,), vjp)


def clamp(a, lo: float, hi: float) -> Tensor:
    """Interval clamp; gradient is zero outside the open interval."""
    a = _as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)

    def vjp(g):
        return (g * inside,)

    return _result(np.clip(a.data, lo, hi), (a,), vjp)


def clamp_min(a, lo: float) -> Tensor:
    """Lower clamp (floor); gradient passes only above the floor."""
    a = _as_tensor(a)
    above = a.data > lo

    def vjp(g):
        return (g * above,)

    return _result(np.maximum(a.data, lo), (a,), vjp)


# ---------------------------------------------------------------------------
# reductions, shape ops, linear algebra


def _normalize_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axis = _normalize_axis(axis, a.ndim)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gx = g
        if not keepdims:
            gx = np.expand_dims(gx, axis)
        return (np.broadcast_to(gx, a.shape).copy(),)

    return _result(data, (a,), vjp)


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axis = _normalize_axis(axis, a.ndim)
    if axis is None:
        count = a.size
    else:
        count = int(np.prod([a.shape[ax] for ax in axis]))
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        gx = g
        if not keepdims:
            gx = np.expand_dims(gx, axis)
        return (np.broadcast_to(gx / count, a.shape).copy(),)

    return _result(data, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _result(a.data.reshape(shape), (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    if not parts:
        raise ValueError("concat of an empty sequence")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        grads = []
        for i in range(len(parts)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _result(data, tuple(parts), vjp)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _result(data, (a, b), vjp)


def dot(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeMismatchError(f"dot expects equal-length vectors, got {a.shape} and {b.shape}")
    data = np.dot(a.data, b.data)

    def vjp(g):
        return g * b.data, g * a.data

    return _result(data, (a, b), vjp)


def l2_normalize(a) -> Tensor:
    """Scale rows (last axis) to unit Euclidean norm.

    The VJP projects out the component along the normalized direction, so
    per row the incoming gradient is mapped to a vector orthogonal to the
    output row.
    """
    a = _as_tensor(a)
    norms = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    flat = norms.reshape(-1)
    bad = np.nonzero(flat < 1e-12)[0]
    if bad.size:
        raise ValueError(f"l2_normalize: zero row at index {int(bad[0])} (norm {flat[bad[0]]:.3e})")
    out = a.data / norms

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return ((g - inner * out) / norms,)

    return _result(out, (a,), vjp)


def conv2d(x, w, b, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d convolution, NHWC layout, weights (kh, kw, cin, cout)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatchError(f"conv2d expects NHWC input and khkwio weights, got {x.shape} and {w.shape}")
    n, h, width, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if cin != wcin:
        raise ShapeMismatchError(f"conv2d channel mismatch: input {x.shape} vs weights {w.shape}")
    if b.shape != (cout,):
        raise ShapeMismatchError(f"conv2d bias shape {b.shape} does not match {cout} output channels")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (width + 2 * pad - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]                        # (n, oh, ow, cin, kh, kw)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * cin)
    wflat = w.data.reshape(kh * kw * cin, cout)
    data = (cols @ wflat).reshape(n, oh, ow, cout) + b.data

    def vjp(g):
        gflat = g.reshape(n * oh * ow, cout)
        gw = (cols.T @ gflat).reshape(w.shape)
        gb = gflat.sum(axis=0)
        gcols = (gflat @ wflat.T).reshape(n, oh, ow, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, pad:pad + h, pad:pad + width, :] if pad else gxp
        return gx, gw, gb

    return _result(data, (x, w, b), vjp)


# ---------------------------------------------------------------------------
# backward pass


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into the grad of every requires_grad leaf.

    Repeated calls without zeroing accumulate. Each pass keeps its own
    adjoint buffers, so accumulation is exact across calls.
    """
    if root.data.size != 1:
        raise ValueError(f"backward requires a scalar root, got shape {root.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    adjoint: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            # leaf: fold this pass's adjoint into the persistent grad buffer
            if node.requires_grad:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad = node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adjoint:
                adjoint[key] = adjoint[key] + pg
            else:
                adjoint[key] = np.asarray(pg, dtype=np.float64)


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class FiniteDifferenceReport:
    """Outcome of comparing reverse-mode gradients to central differences."""

    max_rel_error: float
    per_input_max: list[float]
    failures: list[str] = field(default_factory=list)
    tolerance: float = 1e-5

    @property
    def passed(self) -> bool:
        return not self.failures and self.max_rel_error < self.tolerance


def _rel_error(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def finite_difference_check(program, point: Sequence[np.ndarray],
                            tolerance: float = 1e-5, step: float = 1e-5) -> FiniteDifferenceReport:
    """Compare the reverse-mode gradient of ``program`` to central differences.

    ``program`` maps a list of tensors to a scalar tensor. The relative
    error per coordinate is |a-b| / max(1, |a|, |b|); a non-finite value at
    a perturbed point is reported as a failure for that coordinate.
    """
    arrays = [np.asarray(p, dtype=np.float64) for p in point]
    leaves = [Tensor(arr.copy(), requires_grad=True) for arr in arrays]
    out = program(leaves)
    backward(out)
    ad_grads = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
                for leaf in leaves]

    failures: list[str] = []
    per_input_max: list[float] = []
    for idx, base in enumerate(arrays):
        worst = 0.0
        flat = base.reshape(-1)
        for coord in range(flat.size):
            orig = flat[coord]
            vals = []
            for delta in (step, -step):
                flat[coord] = orig + delta
                v = program([Tensor(arr.copy()) for arr in arrays]).item()
                vals.append(v)
            flat[coord] = orig
            if not all(np.isfinite(v) for v in vals):
                failures.append(f"input {idx} coord {coord}: non-finite value at perturbed point")
                continue
            fd = (vals[0] - vals[1]) / (2.0 * step)
            worst = max(worst, _rel_error(float(ad_grads[idx].reshape(-1)[coord]), fd))
        per_input_max.append(worst)
    return FiniteDifferenceReport(
        max_rel_error=max(per_input_max) if per_input_max else 0.0,
        per_input_max=per_input_max,
        failures=failures,
        tolerance=tolerance,
    )
