"""Dense float64 tensors with tape-based reverse-mode differentiation.

The primitive set is deliberately small: ``matmul``, ``add``, ``mul``,
``softmax``, ``layer_norm``, ``relu``, ``embedding``, ``cross_entropy``,
``reshape``, ``transpose``, ``masked_fill`` and ``sum``. Every model in the
package is composed from these, so ``check_gradients`` can audit any of them
against central finite differences.

Recording only happens inside an active :class:`Tape`::

    with Tape() as tape:
        loss = cross_entropy(matmul(x, w), targets)
    backward(loss, tape)
"""
from __future__ import annotations

import contextlib
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    """A forward or backward computation produced NaN or Inf."""


class NondeterministicError(RuntimeError):
    pass


_TAPES: list = []
_OP_COUNTS: Counter = Counter()


def _check_finite(arr, where):
    # a single reduction catches NaN and +/-Inf anywhere in the array
    if not math.isfinite(float(np.sum(arr))):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{where}: {bad} non-finite value(s) in array of shape {np.shape(arr)}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_leaf")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        _check_finite(arr, name or "Tensor")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._leaf = True

    @classmethod
    def _from_op(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.name = None
        t._leaf = False
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Entry:
    op: str
    inputs: tuple
    out: Tensor
    backward: object


class Tape:
    """Ordered record of primitive applications made while the tape is active."""

    def __init__(self):
        self.entries: list[_Entry] = []
        self.consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self.entries)


@contextlib.contextmanager
def no_grad():
    """Suspend recording on the active tape."""
    _TAPES.append(None)
    try:
        yield
    finally:
        _TAPES.pop()


@contextlib.contextmanager
def count_ops():
    """Yield a Counter that collects primitive applications made inside the block."""
    before = _OP_COUNTS.copy()
    counts: Counter = Counter()
    try:
        yield counts
    finally:
        diff = _OP_COUNTS.copy()
        diff.subtract(before)
        counts.update({k: v for k, v in diff.items() if v})


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op, arr, inputs, backward_fn):
    _OP_COUNTS[op] += 1
    _check_finite(arr, op)
    out = Tensor._from_op(arr)
    tape = _TAPES[-1] if _TAPES else None
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.entries.append(_Entry(op, inputs, out, backward_fn))
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", out, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", out, (a, b), backward)


def matmul(a, b):
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: cannot broadcast {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit("matmul", out, (a, b), backward)


def relu(x):
    x = _as_tensor(x)
    out = np.maximum(x.data, 0.0)

    def backward(g):
        return (g * (x.data > 0.0),)

    return _emit("relu", out, (x,), backward)


def softmax(x, axis=-1):
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    axis %= x.ndim
    last = axis == x.ndim - 1
    src = x.data if last else np.ascontiguousarray(np.moveaxis(x.data, axis, -1))
    n = src.shape[-1]
    y = kernels.softmax_rows(src.reshape(-1, n)).reshape(src.shape)

    def backward(g):
        gs = g if last else np.moveaxis(g, axis, -1)
        gs = np.ascontiguousarray(gs).reshape(-1, n)
        dx = kernels.softmax_rows_backward(y.reshape(-1, n), gs).reshape(y.shape)
        return (dx if last else np.moveaxis(dx, -1, axis),)

    out = y if last else np.ascontiguousarray(np.moveaxis(y, -1, axis))
    return _emit("softmax", out, (x,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}, {beta.shape} do not match width {d}")
    y, xhat, rstd = kernels.layer_norm_rows(x.data.reshape(-1, d), gamma.data, beta.data, eps)

    def backward(g):
        dx, dgamma, dbeta = kernels.layer_norm_rows_backward(
            np.ascontiguousarray(g).reshape(-1, d), xhat, rstd, gamma.data
        )
        return dx.reshape(x.shape), dgamma, dbeta

    return _emit("layer_norm", y.reshape(x.shape), (x, gamma, beta), backward)


def embedding(table, ids):
    """Row lookup ``table[ids]``; ``ids`` is an integer array of any shape."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding: ids must be integers")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding: id out of range [0, {n})")
    out = table.data[ids]

    def backward(g):
        flat = np.ascontiguousarray(ids.reshape(-1), dtype=np.int64)
        return (kernels.scatter_add_rows(n, flat, np.ascontiguousarray(g).reshape(-1, table.shape[1])),)

    return _emit("embedding", out, (table,), backward)


def cross_entropy(logits, targets, ignore_index=None, label_smoothing=0.0):
    """Mean (optionally label-smoothed) negative log-likelihood over kept rows.

    ``logits`` is ``[B, n]`` and ``targets`` holds class indices; rows whose
    target equals ``ignore_index`` contribute to neither value nor gradient.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    targets = np.ascontiguousarray(targets, dtype=np.int64).reshape(-1)
    n, v = logits.shape
    if targets.shape[0] != n:
        raise ShapeError(f"cross_entropy: {n} rows but {targets.shape[0]} targets")
    ign = -1 if ignore_index is None else int(ignore_index)
    live = targets[targets != ign]
    if live.size and (live.min() < 0 or live.max() >= v):
        raise IndexError(f"cross_entropy: target out of range [0, {v})")
    if live.size == 0:
        raise ValueError("cross_entropy: every position is ignored; mean is undefined")
    total, kept, d = kernels.cross_entropy_rows(logits.data, targets, ign, float(label_smoothing))

    def backward(g):
        return (d * (float(g) / kept),)

    return _emit("cross_entropy", np.array(total / kept), (logits,), backward)


def reshape(x, shape):
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return _emit("reshape", out, (x,), backward)


def transpose(x, axes=None):
    x = _as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation for {x.ndim} axes")
    out = np.ascontiguousarray(x.data.transpose(axes))
    inv = np.argsort(axes)

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _emit("transpose", out, (x,), backward)


def masked_fill(x, mask, value):
    """Replace entries where ``mask`` (broadcastable bool array) is true."""
    x = _as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    try:
        out = np.where(mask, value, x.data)
    except ValueError:
        raise ShapeError(f"masked_fill: mask {mask.shape} does not broadcast to {x.shape}") from None
    if out.shape != x.shape:
        raise ShapeError(f"masked_fill: mask {mask.shape} would enlarge {x.shape}")

    def backward(g):
        return (np.where(mask, 0.0, g),)

    return _emit("masked_fill", out, (x,), backward)


def sum(x):  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)

    def backward(g):
        return (np.full(x.shape, float(g)),)

    return _emit("sum", np.array(x.data.sum()), (x,), backward)


# ------------------------------------------------------------------- backward


def backward(loss, tape):
    """Accumulate dloss/dleaf into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if tape.consumed:
        raise RuntimeError("backward: tape already replayed")
    tape.consumed = True
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.data)
    leaves = {}
    for entry in reversed(tape.entries):
        g = entry.out.grad
        if g is None:
            continue
        grads = entry.backward(g)
        for t, gt in zip(entry.inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            t.grad = gt if t.grad is None else t.grad + gt
            if t._leaf:
                leaves[id(t)] = (t, entry.op)
        entry.out.grad = None
    # non-finite values reach the leaves from wherever they arise
    for t, op in leaves.values():
        _check_finite(t.grad, f"{op} backward into {t.name or 'leaf'}")


# ------------------------------------------------------------ gradient check


@dataclass
class GradCheckReport:
    max_rel_error: dict = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self):
        return all(e < self.tolerance for e in self.max_rel_error.values())

    @property
    def worst(self):
        return max(self.max_rel_error.values(), default=0.0)


def check_gradients(f, params, step=1e-5, tolerance=1e-4):
    """Compare tape gradients of scalar ``f()`` with central differences.

    ``params`` are the leaf tensors ``f`` closes over. The relative error of
    each element is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if step <= 0:
        raise ValueError("check_gradients: step must be positive")
    with no_grad():
        v1, v2 = f().item(), f().item()
    if v1 != v2:
        raise NondeterministicError(f"check_gradients: f() returned {v1!r} then {v2!r}")

    saved = [(p.requires_grad, p.grad) for p in params]
    for p in params:
        p.requires_grad = True
        p.grad = None
    try:
        with Tape() as tape:
            loss = f()
        backward(loss, tape)
        analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    finally:
        for p, (rg, g) in zip(params, saved):
            p.requires_grad, p.grad = rg, g

    report = GradCheckReport(tolerance=tolerance)
    with no_grad():
        for i, (p, a) in enumerate(zip(params, analytic)):
            flat = p.data.reshape(-1)
            a = a.reshape(-1)
            worst = 0.0
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                fp = f().item()
                flat[j] = orig - step
                fm = f().item()
                flat[j] = orig
                num = (fp - fm) / (2.0 * step)
                err = abs(a[j] - num) / max(abs(a[j]), abs(num), 1e-8)
                worst = max(worst, err)
            report.max_rel_error[p.name or f"param{i}"] = worst
    return report
