"""Dense tensors with a small reverse-mode tape.

Only the operations the forecasting model needs are provided. Operations
record onto the innermost active :class:`GradTape`; with no tape active they
are plain numpy computations, which is how inference runs.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

_TAPES: list["GradTape"] = []

# additive mask entries at or below this are treated as "masked"
MASKED = -1e9


class DimensionError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class Tensor:
    """Immutable n-d array of float64 (training) or float32 (inference)."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype, order="C", copy=True)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # op outputs are fresh arrays; skip the defensive copy
        t = cls.__new__(cls)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class GradTape:
    """Records operations in execution (hence topological) order.

    Usage::

        with GradTape() as tape:
            loss = f(params)
        grads = tape.gradient(loss, params)
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        if target.data.size != 1:
            raise DimensionError(f"gradient target must be scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parts = node.backward(g)
            for inp, part in zip(node.inputs, parts):
                if part is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + part
                else:
                    grads[key] = part
        return [
            grads[id(s)] if id(s) in grads else np.zeros_like(s.data) for s in sources
        ]


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    needs = bool(_TAPES) and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(np.asarray(out_data), requires_grad=needs)
    if needs:
        _TAPES[-1].nodes.append(_Node(out, inputs, backward))
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _record(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU (GPT-2 form)."""
    xd = x.data
    x2 = xd * xd
    inner = _GELU_C * xd * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        return (g * d,)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# shape


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _record(out, (x,), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    flat = b.data.ndim == 2 and a.data.ndim > 2
    if flat:
        # one GEMM instead of a stack of small ones
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.data.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def softmax_rows(x: Tensor, mask: np.ndarray | Tensor | None = None) -> Tensor:
    """Softmax over the last axis with an optional additive mask.

    Mask entries are 0 (visible) or large negative / -inf (hidden). Masked
    positions come out as exact zeros.
    """
    xd = x.data
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        if m.shape != xd.shape[-m.ndim:]:
            raise DimensionError(f"mask shape {m.shape} does not match scores {xd.shape}")
        hidden = m <= MASKED
        if np.any(hidden.all(axis=-1)):
            raise NumericError("fully masked attention row")
        z = np.where(hidden, -np.inf, xd + np.where(hidden, 0.0, m))
    else:
        z = xd
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm expects gain/bias of shape ({d},), got {gain.shape}, {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = _unbroadcast(g * xhat, gain.shape)
        if bias.requires_grad:
            gb = _unbroadcast(g, bias.shape)
        if x.requires_grad:
            gh = g * gain.data
            gx = rstd * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return _record(out, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), backward)


def mean_squared_error(pred: Tensor, target) -> Tensor:
    target = as_tensor(target, like=pred)
    if pred.shape != target.shape:
        raise DimensionError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n)

    def backward(g):
        gp = g * 2.0 * diff / n
        return gp, -gp

    return _record(out, (pred, target), backward)


# ---------------------------------------------------------------------------
# finite-difference gradient check


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    samples: int = 100,
    seed: int = 0,
    floor: float = 1e-6,
) -> dict:
    """Compare tape gradients of scalar ``f()`` against central differences.

    ``params`` are Tensors that ``f`` closes over; their buffers are perturbed
    in place (and restored). Returns a report with the max relative error,
    where relative error is ``|a - b| / max(|a|, |b|, floor)``. The floor sits
    near the float64 resolution of a central difference at ``h`` (one ulp of an
    O(1) loss over ``2h`` is ~1e-11), so structurally zero gradients such as
    the key bias under softmax shift-invariance are compared absolutely.
    """
    params = list(params)
    with GradTape() as tape:
        base = f()
    if not np.all(np.isfinite(base.data)):
        raise NumericError("f(theta) is not finite")
    analytic = tape.gradient(base, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    per_param = {}
    checked = 0
    for i, (p, ga) in enumerate(zip(params, analytic)):
        buf = p.data
        buf.setflags(write=True)
        flat = buf.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= samples else rng.choice(n, size=samples, replace=False)
        local = 0.0
        try:
            for j in idx:
                orig = flat[j]
                flat[j] = orig + h
                fp = float(f().data)
                flat[j] = orig - h
                fm = float(f().data)
                flat[j] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NumericError(f"f is not finite near parameter {p.name or i}[{j}]")
                fd = (fp - fm) / (2 * h)
                a = float(ga.reshape(-1)[j])
                err = abs(a - fd) / max(abs(a), abs(fd), floor)
                local = max(local, err)
        finally:
            buf.setflags(write=False)
        checked += len(idx)
        per_param[p.name or str(i)] = local
        worst = max(worst, local)
    return {"max_rel_error": worst, "per_param": per_param, "checked": checked, "ok": worst < tol}
