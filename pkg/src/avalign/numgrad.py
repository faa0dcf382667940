"""Small reverse-mode autodiff over numpy arrays.

Every operation records its parents and a closure that pushes the output
adjoint back to them. ``Tensor.backward`` walks the record once in reverse
topological order. Only the handful of ops the model and the losses need are
provided; broadcasting follows numpy rules and is undone in the backward pass.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np


class ZeroNormError(ValueError):
    """A cosine similarity was requested for a zero vector."""


_dtype: contextvars.ContextVar[type] = contextvars.ContextVar("_dtype", default=np.float64)


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Evaluate new tensors in ``dtype`` (e.g. ``np.longdouble``) inside the block."""
    token = _dtype.set(dtype)
    try:
        yield
    finally:
        _dtype.reset(token)


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, _parents=(), _backward=None):
        self.value = np.asarray(value, dtype=_dtype.get())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents: tuple[Tensor, ...] = tuple(_parents) if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.value)

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, seed: np.ndarray | float | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.value) if seed is None else np.asarray(seed, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(x) -> Tensor:
    return Tensor(np.array(x, dtype=_dtype.get(), copy=True), requires_grad=True)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Tensor(a.value + b.value, _parents=(a, b), _backward=backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor(a.value - b.value, _parents=(a, b), _backward=backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.shape))

    return Tensor(a.value * b.value, _parents=(a, b), _backward=backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.value, b.shape))

    return Tensor(out, _parents=(a, b), _backward=backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g * exponent * a.value ** (exponent - 1))

    return Tensor(a.value**exponent, _parents=(a,), _backward=backward)


def matmul(a, b) -> Tensor:
    """Batched matrix product; ``b`` may be a plain (k, n) matrix shared over the batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape))

    return Tensor(a.value @ b.value, _parents=(a, b), _backward=backward)


def swapaxes(a, axis1: int = -1, axis2: int = -2) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(np.swapaxes(g, axis1, axis2))

    return Tensor(np.swapaxes(a.value, axis1, axis2), _parents=(a,), _backward=backward)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return Tensor(a.value.reshape(shape), _parents=(a,), _backward=backward)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        a._accumulate(full)

    return Tensor(a.value[index], _parents=(a,), _backward=backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    value = np.concatenate([t.value for t in tensors], axis=axis)
    return Tensor(value, _parents=tuple(tensors), _backward=backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return Tensor(a.value.sum(axis=axis, keepdims=keepdims), _parents=(a,), _backward=backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def amax(a, axis: int) -> Tensor:
    """Max along one axis; the adjoint goes to the first maximal entry."""
    a = as_tensor(a)
    idx = np.argmax(a.value, axis=axis)
    out = np.take_along_axis(a.value, np.expand_dims(idx, axis), axis=axis)

    def backward(g):
        full = np.zeros_like(a.value)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        a._accumulate(full)

    return Tensor(np.squeeze(out, axis=axis), _parents=(a,), _backward=backward)


def _unary(a, fn: Callable, dfn: Callable) -> Tensor:
    a = as_tensor(a)
    out = fn(a.value)

    def backward(g):
        a._accumulate(g * dfn(a.value, out))

    return Tensor(out, _parents=(a,), _backward=backward)


def exp(a) -> Tensor:
    return _unary(a, np.exp, lambda x, y: y)


def log(a) -> Tensor:
    return _unary(a, np.log, lambda x, y: 1.0 / x)


def sqrt(a) -> Tensor:
    return _unary(a, np.sqrt, lambda x, y: 0.5 / y)


def tanh(a) -> Tensor:
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y)


def sigmoid(a) -> Tensor:
    def fn(x):
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _unary(a, fn, lambda x, y: y * (1.0 - y))


def relu(a) -> Tensor:
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor(out, _parents=(a,), _backward=backward)


# --- detach -----------------------------------------------------------------

_replay: contextvars.ContextVar[list | None] = contextvars.ContextVar("_replay", default=None)


@dataclass
class _DetachTape:
    values: list[np.ndarray] = field(default_factory=list)
    recording: bool = True
    cursor: int = 0


@contextlib.contextmanager
def detach_tape(tape: _DetachTape) -> Iterator[_DetachTape]:
    """Record detached values on first use, then replay them in call order.

    Used by ``grad_check`` so the numeric derivative treats every detached
    subexpression as the constant it was at the base point.
    """
    token = _replay.set(tape)
    try:
        yield tape
    finally:
        _replay.reset(token)


def detach(x) -> Tensor:
    """Same value as ``x``, but nothing flows back through it."""
    value = np.array(as_tensor(x).value, copy=True)
    tape = _replay.get()
    if tape is not None:
        if tape.recording:
            tape.values.append(value)
        else:
            value = tape.values[tape.cursor]
            tape.cursor += 1
    return Tensor(value)


# --- similarities -----------------------------------------------------------

def _row_norms(a: Tensor) -> Tensor:
    norms = sqrt(tsum(a * a, axis=-1, keepdims=True))
    zero = np.argwhere(norms.value[..., 0] == 0.0)
    if len(zero):
        raise ZeroNormError(f"zero-norm row at index {tuple(int(i) for i in zero[0])}")
    return norms


def cosine_sim(u, v) -> Tensor:
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError(f"cosine_sim expects two vectors of equal length, got {u.shape} and {v.shape}")
    nu = sqrt(tsum(u * u))
    nv = sqrt(tsum(v * v))
    if nu.value == 0.0 or nv.value == 0.0:
        raise ZeroNormError("cosine similarity of a zero vector")
    return tsum(u * v) / (nu * nv)


def similarity_matrix(a, b) -> Tensor:
    """Pairwise cosine similarity of rows: (..., n, d) x (..., m, d) -> (..., n, m)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"row dimensions differ: {a.shape[-1]} vs {b.shape[-1]}")
    an = a / _row_norms(a)
    bn = b / _row_norms(b)
    return an @ swapaxes(bn)


# --- gradient checking ------------------------------------------------------

@dataclass
class GradReport:
    analytic: dict[str, np.ndarray]
    numeric: dict[str, np.ndarray]
    max_rel_error: float

    @property
    def worst(self) -> tuple[str, float]:
        errs = {k: float(relative_error(self.analytic[k], self.numeric[k]).max(initial=0.0)) for k in self.analytic}
        key = max(errs, key=errs.get)
        return key, errs[key]


def relative_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)


# (k, w): add w * (f(x + k*eps) - f(x - k*eps)); pairing makes unchanged values cancel exactly
_STENCILS = {
    2: ((1, 0.5),),
    4: ((1, 8 / 12), (2, -1 / 12)),
}


def grad_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray] | np.ndarray,
    eps: float = 1e-5,
    order: int = 2,
    numeric_dtype=np.float64,
) -> GradReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` receives a dict of leaf tensors and returns a scalar Tensor. A bare
    array is accepted and exposed to ``f`` under the key ``"x"``. ``order``
    picks the 3-point (2) or 5-point (4) central stencil. Passing
    ``numeric_dtype=np.longdouble`` runs the perturbed evaluations in extended
    precision, which resolves gradient components far below the loss scale.
    """
    if isinstance(params, np.ndarray):
        params = {"x": params}
    base = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    leaves = {k: parameter(v) for k, v in base.items()}
    tape = _DetachTape()
    with detach_tape(tape):
        out = f(leaves)
    if out.value.size != 1:
        raise ValueError("grad_check needs a scalar function")
    out.backward()
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in leaves.items()}

    tape.recording = False

    def evaluate(values: dict[str, np.ndarray]):
        tape.cursor = 0
        with detach_tape(tape), precision(numeric_dtype):
            y = f({k: Tensor(v) for k, v in values.items()}).value.reshape(())[()]
        if not np.isfinite(y):
            raise FloatingPointError("function is not finite near the check point")
        return y

    stencil = _STENCILS[order]
    wide = {k: v.astype(numeric_dtype) for k, v in base.items()}
    numeric = {}
    for name, value in wide.items():
        num = np.zeros(value.shape)
        for idx in np.ndindex(value.shape):
            acc = numeric_dtype(0)
            for step, weight in stencil:
                ys = []
                for sign in (1, -1):
                    pert = value.copy()
                    pert[idx] += numeric_dtype(sign * step) * numeric_dtype(eps)
                    ys.append(evaluate({**wide, name: pert}))
                acc += numeric_dtype(weight) * (ys[0] - ys[1])
            num[idx] = float(acc / numeric_dtype(eps))
        numeric[name] = num

    worst = max((float(relative_error(analytic[k], numeric[k]).max(initial=0.0)) for k in base), default=0.0)
    return GradReport(analytic, numeric, worst)
