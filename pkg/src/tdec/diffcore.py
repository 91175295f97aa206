"""Reverse-mode differentiation over dense float64 tensors, plus Adam.

A Tensor is a thin wrapper around a numpy array. While a Tape is active
(``with Tape() as tape:``), every operation records a node with a backward
closure; ``tape.gradients(loss, leaves)`` then walks the records in reverse.
Tensors created outside any tape are plain values.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

LAYER_NORM_EPS = 1e-5

_ids = itertools.count()
_tape_stack: list["Tape"] = []


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class DomainError(ValueError):
    """Raised when values fall outside an operation's domain (log/sqrt <= 0, ...)."""


class Tensor:
    """Dense float64 array participating (optionally) in the active tape."""

    __slots__ = ("values", "id")

    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float64)
        self.id = next(_ids)

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, id={self.id})"

    # Operator sugar; all semantics live in the module-level op functions.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes=axes)


class Tape:
    """Ordered record of primitive operations for one reverse sweep.

    Single-writer: one tape must not record from concurrent threads.
    Independent tapes are fine in parallel.
    """

    def __init__(self):
        self._nodes = []  # (out_id, parent_tensors, backward_fn)

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack.pop()
        assert popped is self
        return False

    def _record(self, out, parents, backward):
        self._nodes.append((out.id, parents, backward))

    def gradients(self, loss, leaves):
        """Backward sweep from a scalar loss.

        ``leaves`` may be a dict name -> Tensor (returns dict name -> ndarray)
        or an iterable of Tensors (returns a list in the same order).
        Leaves unreachable from the loss get zero gradients.
        """
        if loss.values.ndim != 0:
            raise ShapeError(
                f"backward needs a scalar loss, got shape {loss.shape}"
            )
        grads = {loss.id: np.ones((), dtype=np.float64)}
        for out_id, parents, backward in reversed(self._nodes):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            parent_grads = backward(g)
            for parent, pg in zip(parents, parent_grads):
                if pg is None:
                    continue
                acc = grads.get(parent.id)
                grads[parent.id] = pg if acc is None else acc + pg
        if isinstance(leaves, dict):
            return {
                name: self._leaf_grad(grads, t) for name, t in leaves.items()
            }
        return [self._leaf_grad(grads, t) for t in leaves]

    @staticmethod
    def _leaf_grad(grads, tensor):
        g = grads.get(tensor.id)
        if g is None:
            return np.zeros(tensor.shape, dtype=np.float64)
        return np.broadcast_to(g, tensor.shape).astype(np.float64, copy=True) \
            if g.shape != tensor.shape else g


def _active_tape():
    return _tape_stack[-1] if _tape_stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Tensor not intended to receive gradients (mask, frozen target, ...)."""
    return as_tensor(x)


def _unbroadcast(grad, shape):
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_check(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    out = Tensor(a.values + b.values)
    tape = _active_tape()
    if tape is not None:
        a_shape, b_shape = a.shape, b.shape
        tape._record(out, (a, b), lambda g: (
            _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)))
    return out


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("subtract", a, b)
    out = Tensor(a.values - b.values)
    tape = _active_tape()
    if tape is not None:
        a_shape, b_shape = a.shape, b.shape
        tape._record(out, (a, b), lambda g: (
            _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)))
    return out


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("multiply", a, b)
    out = Tensor(a.values * b.values)
    tape = _active_tape()
    if tape is not None:
        av, bv = a.values, b.values
        tape._record(out, (a, b), lambda g: (
            _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))
    return out


def divide(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("divide", a, b)
    if np.any(b.values == 0.0):
        raise DomainError("divide: zero divisor")
    out = Tensor(a.values / b.values)
    tape = _active_tape()
    if tape is not None:
        av, bv = a.values, b.values
        tape._record(out, (a, b), lambda g: (
            _unbroadcast(g / bv, av.shape),
            _unbroadcast(-g * av / (bv * bv), bv.shape)))
    return out


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    out = Tensor(a.values * factor)
    tape = _active_tape()
    if tape is not None:
        tape._record(out, (a,), lambda g: (g * factor,))
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        v = np.exp(a.values)
    if not np.all(np.isfinite(v)):
        raise DomainError("exp: overflow to non-finite values")
    out = Tensor(v)
    tape = _active_tape()
    if tape is not None:
        tape._record(out, (a,), lambda g: (g * v,))
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.values <= 0.0):
        raise DomainError("log: nonpositive input")
    out = Tensor(np.log(a.values))
    tape = _active_tape()
    if tape is not None:
        av = a.values
        tape._record(out, (a,), lambda g: (g / av,))
    return out


def square(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.values * a.values)
    tape = _active_tape()
    if tape is not None:
        av = a.values
        tape._record(out, (a,), lambda g: (g * (2.0 * av),))
    return out


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.values <= 0.0):
        raise DomainError("sqrt: nonpositive input")
    v = np.sqrt(a.values)
    out = Tensor(v)
    tape = _active_tape()
    if tape is not None:
        tape._record(out, (a,), lambda g: (g * (0.5 / v),))
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    v = np.tanh(a.values)
    out = Tensor(v)
    tape = _active_tape()
    if tape is not None:
        tape._record(out, (a,), lambda g: (g * (1.0 - v * v),))
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.values, 0.0))
    tape = _active_tape()
    if tape is not None:
        mask = a.values > 0.0
        tape._record(out, (a,), lambda g: (g * mask,))
    return out


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi)(x + 0.044715 x^3)))."""
    a = as_tensor(a)
    x = a.values
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))
    tape = _active_tape()
    if tape is not None:
        def backward(g):
            sech2 = 1.0 - t * t
            d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner),)
        tape._record(out, (a,), backward)
    return out


def clamp_min(a, floor: float) -> Tensor:
    """Elementwise max(a, floor); gradient is zero where the floor binds."""
    a = as_tensor(a)
    floor = float(floor)
    out = Tensor(np.maximum(a.values, floor))
    tape = _active_tape()
    if tape is not None:
        mask = a.values > floor
        tape._record(out, (a,), lambda g: (g * mask,))
    return out


def tensor_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sum(a.values, axis=axis, keepdims=keepdims))
    tape = _active_tape()
    if tape is not None:
        in_shape = a.shape

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, in_shape).copy(),)
            g_exp = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g_exp, in_shape).copy(),)
        tape._record(out, (a,), backward)
    return out


def tensor_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]
    return scale(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = Tensor(a.values.reshape(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    tape = _active_tape()
    if tape is not None:
        in_shape = a.shape
        tape._record(out, (a,), lambda g: (g.reshape(in_shape),))
    return out


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.transpose(a.values, axes))
    tape = _active_tape()
    if tape is not None:
        inv = None if axes is None else tuple(np.argsort(axes))
        tape._record(out, (a,), lambda g: (np.transpose(g, inv),))
    return out


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    a = as_tensor(a)
    if not (0 <= start and start + length <= a.shape[axis]):
        raise ShapeError(
            f"narrow: [{start}:{start + length}] out of range for axis {axis} "
            f"of shape {a.shape}")
    index = tuple(
        slice(start, start + length) if d == (axis % a.ndim) else slice(None)
        for d in range(a.ndim))
    out = Tensor(a.values[index])
    tape = _active_tape()
    if tape is not None:
        in_shape = a.shape

        def backward(g):
            full = np.zeros(in_shape, dtype=np.float64)
            full[index] = g
            return (full,)
        tape._record(out, (a,), backward)
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = Tensor(np.concatenate([t.values for t in tensors], axis=axis))
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[t.shape for t in tensors]}")
    tape = _active_tape()
    if tape is not None:
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        tape._record(out, tuple(tensors),
                     lambda g: tuple(np.split(g, splits, axis=axis)))
    return out


def take_rows(a, indices) -> Tensor:
    """Gather rows (axis 0) by an integer index array; scatter-adds backward."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(a.values[idx])
    tape = _active_tape()
    if tape is not None:
        in_shape = a.shape

        def backward(g):
            full = np.zeros(in_shape, dtype=np.float64)
            np.add.at(full, idx, g)
            return (full,)
        tape._record(out, (a,), backward)
    return out


def matmul(a, b) -> Tensor:
    """Matrix product: 2-D @ 2-D, batched 3-D @ 3-D, or 3-D @ 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    an, bn = a.ndim, b.ndim
    ok = (an == 2 and bn == 2) or (an == 3 and bn == 3) or (an == 3 and bn == 2)
    if not ok or a.shape[-1] != b.shape[-2] or (
            an == 3 and bn == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(np.matmul(a.values, b.values))
    tape = _active_tape()
    if tape is not None:
        av, bv = a.values, b.values

        def backward(g):
            bt = np.swapaxes(bv, -1, -2)
            at = np.swapaxes(av, -1, -2)
            ga = np.matmul(g, bt)
            gb = np.matmul(at, g)
            if bn == 2 and an == 3:
                gb = gb.sum(axis=0)
            return (ga, gb)
        tape._record(out, (a, b), backward)
    return out


def softmax(a) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    a = as_tensor(a)
    v = a.values
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)
    tape = _active_tape()
    if tape is not None:
        def backward(g):
            dot = np.sum(g * s, axis=-1, keepdims=True)
            return (s * (g - dot),)
        tape._record(out, (a,), backward)
    return out


def layer_norm(a, gain, shift) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gain, shift = as_tensor(a), as_tensor(gain), as_tensor(shift)
    m = a.shape[-1]
    if gain.shape != (m,) or shift.shape != (m,):
        raise ShapeError(
            f"layer_norm: scale/shift must have shape ({m},), got "
            f"{gain.shape} and {shift.shape}")
    x = a.values
    mu = x.mean(axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (x - mu) * inv
    out = Tensor(xhat * gain.values + shift.values)
    tape = _active_tape()
    if tape is not None:
        gv = gain.values

        def backward(g):
            gg = g * gv
            mean_gg = gg.mean(axis=-1, keepdims=True)
            mean_ggx = (gg * xhat).mean(axis=-1, keepdims=True)
            ga = inv * (gg - mean_gg - xhat * mean_ggx)
            axes = tuple(range(g.ndim - 1))
            return (ga, (g * xhat).sum(axis=axes), g.sum(axis=axes))
        tape._record(out, (a, gain, shift), backward)
    return out


@dataclass
class AdamState:
    """Per-parameter first/second moments and the shared step counter."""

    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)
    step_count: int = 0

    @classmethod
    def for_params(cls, params) -> "AdamState":
        zeros = {name: np.zeros(_value_of(p).shape) for name, p in params.items()}
        return cls(first_moment=zeros,
                   second_moment={k: v.copy() for k, v in zeros.items()},
                   step_count=0)


def _value_of(p):
    return p.values if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    if lr <= 0:
        raise ValueError(f"adam_step: lr must be positive, got {lr}")
    t = state.step_count + 1
    # fold the bias corrections into scalars to keep the array passes down
    m_corr = 1.0 / (1.0 - beta1 ** t)
    v_corr = 1.0 / math.sqrt(1.0 - beta2 ** t)
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        pv = _value_of(p)
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != pv.shape:
            raise ShapeError(
                f"adam_step: gradient shape {g.shape} does not match "
                f"parameter '{name}' of shape {pv.shape}")
        if not np.all(np.isfinite(g)):
            raise DomainError(f"adam_step: non-finite gradient for '{name}'")
        m = state.first_moment[name] * beta1
        m += (1.0 - beta1) * g
        v = state.second_moment[name] * beta2
        v += (1.0 - beta2) * (g * g)
        denom = np.sqrt(v)
        denom *= v_corr
        denom += eps
        step = m / denom
        step *= lr * m_corr
        new_params[name] = pv - step
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(new_m, new_v, t)


def grad_check(loss_fn, params, fd_step: float = 1e-5,
               max_coords: int = 200, rng=None) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` maps a dict name -> Tensor to a scalar Tensor and must be
    deterministic. At most ``max_coords`` coordinates per parameter block are
    probed. Relative error is |analytic - fd| / max(1, |fd|).
    """
    if fd_step <= 0:
        raise ValueError("grad_check: fd_step must be positive")
    if rng is None:
        rng = np.random.default_rng(0)
    with Tape() as tape:
        loss = loss_fn(params)
    if not np.isfinite(loss.values):
        raise DomainError("grad_check: loss is not finite")
    analytic = tape.gradients(loss, params)

    def eval_at(name, flat_index, value):
        shifted = dict(params)
        bumped = params[name].values.copy()
        bumped.flat[flat_index] = value
        shifted[name] = Tensor(bumped)
        out = loss_fn(shifted).values
        if not np.isfinite(out):
            raise DomainError("grad_check: perturbed loss is not finite")
        return float(out)

    worst = 0.0
    for name, p in params.items():
        n = p.size
        coords = (np.arange(n) if n <= max_coords
                  else rng.choice(n, size=max_coords, replace=False))
        for c in coords:
            base = p.values.flat[c]
            hi = eval_at(name, c, base + fd_step)
            lo = eval_at(name, c, base - fd_step)
            fd = (hi - lo) / (2.0 * fd_step)
            a = analytic[name].flat[c]
            worst = max(worst, abs(a - fd) / max(1.0, abs(fd)))
    return worst
