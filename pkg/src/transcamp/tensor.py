"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Operations are recorded on the innermost active :class:`Tape` whenever one of
their inputs requires a gradient. Outside a tape everything runs eagerly with
no bookkeeping, which is what the finite-difference checks rely on.

Elementwise binary ops broadcast with numpy rules; gradients are summed back
onto the original operand shapes.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "concat",
    "div",
    "huber",
    "huber_norm",
    "layer_norm",
    "matmul",
    "mean",
    "mul",
    "quat_angle",
    "relu",
    "reshape",
    "softmax",
    "sqrt",
    "sub",
    "sum",
    "transpose",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


_ACTIVE: list["Tape"] = []


class Tensor:
    """A float64 array that can participate in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; records are appended in execution order so the
    list is topologically sorted by construction.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].records.append(_Record(out, tuple(inputs), fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires a gradient.

    Leaves recorded on the tape but not reachable from ``loss`` get zeros.
    Gradients accumulate into existing ``.grad`` arrays.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(r.out) for r in tape.records}
    if id(loss) not in produced and not loss.requires_grad:
        raise ValueError("loss is not on the tape")
    for rec in tape.records:
        for t in rec.inputs:
            if t.requires_grad and id(t) not in produced and t.grad is None:
                t.grad = np.zeros_like(t.data)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if id(loss) not in produced:
        # loss is itself a leaf
        loss.grad = (loss.grad if loss.grad is not None else 0.0) + grads[id(loss)]
        return
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        parts = rec.backward(g)
        for t, gt in zip(rec.inputs, parts):
            if gt is None or not t.requires_grad:
                continue
            if id(t) in produced:
                prev = grads.get(id(t))
                grads[id(t)] = gt if prev is None else prev + gt
            else:
                t.grad = t.grad + gt


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "mul")
    out = Tensor(a.data * b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "div")
    out = Tensor(a.data / b.data)

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))
    return _record(out, (x,), lambda g: (g * mask,))


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise ValueError("sqrt of negative value")
    r = np.sqrt(x.data)
    out = Tensor(r)
    return _record(out, (x,), lambda g: (g * 0.5 / r,))


def huber(x: Tensor, delta: float) -> Tensor:
    """Elementwise Huber kernel: x^2/2 inside ``delta``, linear outside."""
    a = np.abs(x.data)
    inside = a <= delta
    out = Tensor(np.where(inside, 0.5 * x.data * x.data, delta * (a - 0.5 * delta)))
    return _record(out, (x,), lambda g: (g * np.where(inside, x.data, delta * np.sign(x.data)),))


def huber_norm(x: Tensor, delta: float, axis: int = -1) -> Tensor:
    """Huber kernel of the Euclidean norm along ``axis``.

    Fused so the gradient stays finite at a zero residual, where the norm
    alone is not differentiable.
    """
    r = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    inside = r <= delta
    val = np.where(inside, 0.5 * r * r, delta * (r - 0.5 * delta))
    out = Tensor(np.squeeze(val, axis=axis))

    def bw(g):
        g = np.expand_dims(g, axis)
        safe = np.where(inside, 1.0, r)
        scale = np.where(inside, 1.0, delta / safe)
        return (g * scale * x.data,)

    return _record(out, (x,), bw)


def quat_angle(r: Tensor) -> Tensor:
    """Rotation angle of (not necessarily unit) quaternions along the last axis.

    Computes ``2 * atan2(|v|, |w|)``, which equals ``2 * arccos(|w|)`` for unit
    quaternions but is well conditioned near zero. Sign of ``r`` is ignored.
    The subgradient at ``v == 0`` is taken as zero.
    """
    if r.shape[-1] != 4:
        raise DimensionError(f"quat_angle expects trailing dim 4, got {r.shape}")
    w = r.data[..., 0]
    v = r.data[..., 1:]
    s = np.sqrt(np.sum(v * v, axis=-1))
    aw = np.abs(w)
    out = Tensor(2.0 * np.arctan2(s, aw))

    def bw(g):
        den = s * s + aw * aw
        den = np.where(den > 0, den, 1.0)
        gw = g * (-2.0 * s / den) * np.sign(w)
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(s[..., None] > 0, v / np.where(s > 0, s, 1.0)[..., None], 0.0)
        gv = (g * 2.0 * aw / den)[..., None] * unit
        return (np.concatenate([gw[..., None], gv], axis=-1),)

    return _record(out, (r,), bw)


# linear algebra / shape -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        out = Tensor(np.matmul(a.data, b.data))
    except ValueError:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), bw)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = Tensor(x.data.reshape(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(x.data, axes))
    return _record(out, (x,), lambda g: (np.transpose(g, inv),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat: no parts")
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
            p.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise DimensionError(f"concat: incompatible shapes {ref} and {p.shape} on axis {axis}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=ax))
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record(out, tuple(parts), bw)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax; entries where ``mask`` is False get exactly 0."""
    if x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        if not np.all(mask.any(axis=axis)):
            raise ValueError("softmax: a slice has every entry masked out")
        z = np.where(mask, z, -np.inf)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(y)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _record(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(
            f"layer_norm: gain {gamma.shape}/offset {beta.shape} vs input {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)
    n = x.shape[-1]

    def bw(g):
        gxhat = g * gamma.data
        gx = inv / n * (n * gxhat - gxhat.sum(-1, keepdims=True) - xhat * (gxhat * xhat).sum(-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(out, (x, gamma, beta), bw)


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in tensors)
