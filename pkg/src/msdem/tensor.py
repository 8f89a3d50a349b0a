"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ndarray plus the links needed to replay the
chain rule. Operations build a DAG; :func:`backward` walks it once in
reverse topological order and accumulates gradients into every node that
``requires_grad``. Frozen parameters opt out structurally: a result whose
inputs are all constant keeps no parent links, so no graph grows through
frozen subtrees and no gradient can ever reach them.

Arrays are float32 or float64; other input dtypes are promoted to float64.
Every operation checks its output for NaN/Inf and raises
:class:`~msdem.errors.NumericsError` instead of propagating silently.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import FrozenParameterError, NumericsError, ShapeError, ValidationError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _coerce(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values produced by {op!r}")


class Tensor:
    """Array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = _coerce(data)
        _check_finite(arr, "tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; the module-level functions do the work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _from_op(arr: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    """Wrap an op result. Constant inputs leave no graph links behind."""
    _check_finite(arr, op)
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b) -> Tensor:
    b = _lift(b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _from_op(a.data + b.data, (a, b), bwd, "add")


def sub(a: Tensor, b) -> Tensor:
    b = _lift(b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _from_op(a.data - b.data, (a, b), bwd, "sub")


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b)

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _from_op(a.data * b.data, (a, b), bwd, "mul")


def div(a: Tensor, b) -> Tensor:
    b = _lift(b)

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _from_op(a.data / b.data, (a, b), bwd, "div")


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        return (-g,)

    return _from_op(-a.data, (a,), bwd, "neg")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        return (g * out_data,)

    return _from_op(out_data, (a,), bwd, "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _from_op(out_data, (a,), bwd, "log")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """Elementwise max(a, lo). Gradient passes through only where a > lo."""
    mask = a.data > lo

    def bwd(g):
        return (g * mask,)

    return _from_op(np.maximum(a.data, lo), (a,), bwd, "clamp_min")


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, exact erf form: x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    return _from_op(x * cdf, (a,), bwd, "gelu")


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    orig = a.shape

    def bwd(g):
        return (g.reshape(orig),)

    try:
        out_data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {orig} to {shape}: {e}") from None
    return _from_op(out_data, (a,), bwd, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _from_op(np.transpose(a.data, axes), (a,), bwd, "transpose")


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _from_op(np.concatenate([p.data for p in parts], axis=axis), parts, bwd, "concat")


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("stack needs at least one tensor")
    base = parts[0].shape
    for p in parts[1:]:
        if p.shape != base:
            raise ShapeError(f"stack needs equal shapes, got {base} and {p.shape}")

    def bwd(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _from_op(np.stack([p.data for p in parts], axis=axis), parts, bwd, "stack")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start:stop) along one axis."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _from_op(a.data[idx].copy(), (a,), bwd, "slice_axis")


# ---------------------------------------------------------------------------
# reductions and matrix product


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, a.shape),)

    return _from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        count = a.shape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg / count, a.shape),)

    return _from_op(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd, "mean")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, batched over leading axes like np.matmul."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _from_op(np.matmul(a.data, b.data), (a, b), bwd, "matmul")


# ---------------------------------------------------------------------------
# nn primitives


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis`."""
    if a.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _from_op(y, (a,), bwd, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.shape[axis] == 0:
        raise ShapeError("log_softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def bwd(g):
        return (g - np.exp(out_data) * g.sum(axis=axis, keepdims=True),)

    return _from_op(out_data, (a,), bwd, "log_softmax")


def _check_one_hot(label: np.ndarray, k: int, op: str) -> None:
    if label.shape[-1] != k:
        raise ValidationError(f"{op}: label length {label.shape[-1]} != class count {k}")
    vals = np.unique(label)
    if not np.all(np.isin(vals, (0.0, 1.0))):
        raise ValidationError(f"{op}: label entries must be 0 or 1")
    if not np.all(label.sum(axis=-1) == 1.0):
        raise ValidationError(f"{op}: label rows must sum to exactly 1")


def cross_entropy(logits: Tensor, label) -> Tensor:
    """Negative log-likelihood of a one-hot label under softmax(logits).

    `logits` is a length-K vector, K >= 2. Returns a scalar tensor; the
    gradient w.r.t. logits is softmax(logits) - label.
    """
    label = np.asarray(label, dtype=logits.dtype)
    if logits.ndim != 1:
        raise ShapeError(f"cross_entropy expects a 1-D logit vector, got {logits.shape}")
    if logits.shape[0] < 2:
        raise ValidationError("cross_entropy needs at least 2 classes")
    _check_one_hot(label, logits.shape[0], "cross_entropy")
    return neg(tsum(mul(log_softmax(logits, axis=-1), Tensor(label))))


def cross_entropy_mean(logits: Tensor, onehot: np.ndarray) -> Tensor:
    """Mean cross-entropy over a batch: logits [B,K], onehot [B,K]."""
    onehot = np.asarray(onehot, dtype=logits.dtype)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_mean expects [batch, classes], got {logits.shape}")
    if logits.shape[1] < 2:
        raise ValidationError("cross_entropy_mean needs at least 2 classes")
    _check_one_hot(onehot, logits.shape[1], "cross_entropy_mean")
    per_row = neg(tsum(mul(log_softmax(logits, axis=-1), Tensor(onehot)), axis=-1))
    return tmean(per_row)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into .grad for every reachable node.

    `loss` must be scalar. Gradients add onto whatever is already in .grad,
    so callers clear parameter gradients between steps.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones((), dtype=loss.dtype)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=parent.dtype)
            else:
                parent.grad += g


# ---------------------------------------------------------------------------
# parameters


class Parameter:
    """Named trainable leaf. Freezing is permanent and excludes it from graphs."""

    def __init__(self, value, name: str, frozen: bool = False):
        tensor = value if isinstance(value, Tensor) else Tensor(value)
        tensor.requires_grad = not frozen
        self.value = tensor
        self.name = name
        self._frozen = frozen
        self._frozen_bytes: bytes | None = tensor.data.tobytes() if frozen else None

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.value.grad

    @property
    def frozen(self) -> bool:
        return self._frozen

    def clear_grad(self) -> None:
        self.value.grad = None

    def freeze(self) -> None:
        """Lock the parameter: no more gradients, no more updates."""
        self._frozen = True
        self.value.requires_grad = False
        self.value.grad = None
        self._frozen_bytes = self.value.data.tobytes()

    def check_unchanged(self) -> None:
        """Assert a frozen parameter still holds its freeze-time bytes."""
        if not self._frozen:
            return
        if self.value.data.tobytes() != self._frozen_bytes:
            raise FrozenParameterError(f"frozen parameter {self.name!r} was mutated")

    def load_bytes(self, raw: bytes) -> None:
        """Deserialization hook: replace the value with stored bytes.

        This is the one sanctioned way to change a frozen parameter; the
        freeze snapshot is refreshed so the no-mutation invariant holds
        from the restored state onward.
        """
        expected = self.value.data.nbytes
        if len(raw) != expected:
            raise ShapeError(
                f"parameter {self.name!r} expects {expected} bytes, got {len(raw)}"
            )
        restored = np.frombuffer(raw, dtype=self.value.data.dtype).reshape(self.value.data.shape)
        if not np.all(np.isfinite(restored)):
            raise NumericsError(f"stored bytes for {self.name!r} contain non-finite values")
        self.value.data[...] = restored
        if self._frozen:
            self._frozen_bytes = self.value.data.tobytes()

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape}, frozen={self._frozen})"


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(
    fn: Callable[[], Tensor],
    params: Iterable[Parameter],
    h: float = 1e-5,
) -> float:
    """Compare analytic gradients of fn() against central differences.

    `fn` rebuilds its graph on every call and must be deterministic; it is
    invoked twice up front and the two values must match exactly. Returns
    max over all parameter components of

        |analytic - central| / max(|analytic|, |central|, 1e-8)

    Parameters must be float64; float32 storage is too coarse for h ~ 1e-5.
    """
    params = list(params)
    for p in params:
        if p.frozen:
            raise FrozenParameterError(f"finite_diff_check got frozen parameter {p.name!r}")
        if p.data.dtype != np.float64:
            raise ValidationError(f"finite_diff_check requires float64 parameters, {p.name!r} is {p.data.dtype}")

    v1 = fn().item()
    v2 = fn().item()
    if v1 != v2:
        raise NumericsError(f"fn is not deterministic: {v1!r} != {v2!r}")

    for p in params:
        p.clear_grad()
    backward(fn())
    analytic = {p.name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for p in params}
    for p in params:
        p.clear_grad()

    worst = 0.0
    for p in params:
        flat = p.data.flat
        a_flat = analytic[p.name].reshape(-1)
        for i in range(p.data.size):
            orig = flat[i]
            hi, lo = orig + h, orig - h
            flat[i] = hi
            f_hi = fn().item()
            flat[i] = lo
            f_lo = fn().item()
            flat[i] = orig
            central = (f_hi - f_lo) / (hi - lo)
            err = abs(a_flat[i] - central) / max(abs(a_flat[i]), abs(central), 1e-8)
            worst = max(worst, err)
    return worst
