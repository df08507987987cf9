"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

A Tape records operations in execution order; backward() replays the tape
once in reverse, accumulating vector-Jacobian products. Reductions always
accumulate in float64, even when the working dtype is float32.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .exceptions import NonFiniteError, ShapeMismatchError

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """Dense real tensor. Leaves with requires_grad=True receive gradients."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None, check: bool = True):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if check and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor contains NaN or Inf")
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    vjp: Callable  # grad_out -> tuple of grads aligned with inputs (None = no grad)


class Tape:
    """Append-only record of ops; parents always precede children."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._tracked: set[int] = set()
        self.leaves: list[Tensor] = []
        self._leaf_ids: set[int] = set()

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def watch(self, t: Tensor) -> None:
        if id(t) not in self._leaf_ids:
            self._leaf_ids.add(id(t))
            self._tracked.add(id(t))
            self.leaves.append(t)

    def tracks(self, t: Tensor) -> bool:
        if id(t) in self._tracked:
            return True
        if t.requires_grad:
            self.watch(t)
            return True
        return False

    def record(self, out: Tensor, inputs: tuple, vjp: Callable) -> None:
        self.nodes.append(_Node(out, inputs, vjp))
        self._tracked.add(id(out))


_TAPE_STACK: list[Tape] = []


def current_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _maybe_record(out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = current_tape()
    if tape is None:
        return out
    # no short-circuit: every requires_grad input must become a watched leaf
    tracked = [tape.tracks(t) for t in inputs]
    if any(tracked):
        tape.record(out, tuple(inputs), vjp)
    return out


def backward(tape: Tape, root: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate gradients of the scalar `root` w.r.t. every watched leaf.

    Leaves that do not reach the root get zero gradients.
    """
    if root.data.size != 1:
        raise ValueError("backward root must be a scalar tensor")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.vjp(g)
        for parent, pg in zip(node.inputs, parent_grads):
            if pg is None:
                continue
            prev = grads.get(id(parent))
            if prev is None:
                grads[id(parent)] = pg
            else:
                grads[id(parent)] = prev + pg
    return {
        leaf: grads.get(id(leaf), np.zeros_like(leaf.data)) for leaf in tape.leaves
    }


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64)
    return grad.astype(_DEFAULT_DTYPE, copy=False)


def constant(data) -> Tensor:
    return Tensor(data)


# ---------------------------------------------------------------------------
# elementwise / linear ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, check=False)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _maybe_record(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, check=False)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _maybe_record(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, check=False)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _maybe_record(out, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c, check=False)

    def vjp(g):
        return (g * c,)

    return _maybe_record(out, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError("matmul operands must have ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul inner dims {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, check=False)

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _maybe_record(out, (a, b), vjp)


def transpose(a: Tensor, axes: tuple | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    out = Tensor(np.transpose(a.data, axes), check=False)
    inv = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _maybe_record(out, (a,), vjp)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = Tensor(a.data.reshape(shape), check=False)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _maybe_record(out, (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), check=False)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _maybe_record(out, tuple(tensors), vjp)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into a 2D table; out shape = ids.shape + (d,)."""
    if table.ndim != 2:
        raise ShapeMismatchError("gather_rows expects a 2D table")
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.shape[0]):
        raise IndexError("gather id out of range")
    out = Tensor(table.data[ids], check=False)

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _maybe_record(out, (table,), vjp)


# ---------------------------------------------------------------------------
# nonlinearities


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True, dtype=np.float64)
    out = Tensor(s, check=False)

    def vjp(g):
        dot = (g * s).sum(axis=axis, keepdims=True, dtype=np.float64)
        return (s * (g - dot),)

    return _maybe_record(out, (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True, dtype=np.float64))
    ls = z - lse
    out = Tensor(ls, check=False)
    sm = np.exp(ls)

    def vjp(g):
        return (g - sm * g.sum(axis=axis, keepdims=True, dtype=np.float64),)

    return _maybe_record(out, (a,), vjp)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(u)
    out = Tensor(0.5 * x * (1.0 + th), check=False)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du),)

    return _maybe_record(out, (a,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True, dtype=np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    out = Tensor(xn * gain.data + bias.data, check=False)
    n = x.shape[-1]

    def vjp(g):
        gg = g * gain.data
        m1 = gg.mean(axis=-1, keepdims=True, dtype=np.float64)
        m2 = (gg * xn).mean(axis=-1, keepdims=True, dtype=np.float64)
        gx = inv * (gg - m1 - xn * m2)
        ggain = _unbroadcast(g * xn, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return _maybe_record(out, (x, gain, bias), vjp)


# ---------------------------------------------------------------------------
# reductions and losses


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(
        a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64), check=False
    )

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(_DEFAULT_DTYPE, copy=False),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).astype(_DEFAULT_DTYPE, copy=False),)

    return _maybe_record(out, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[i] for i in axis]))
    else:
        count = a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def squared_error(a: Tensor, b: Tensor, axis=None) -> Tensor:
    """Sum of squared differences (over `axis`, or all entries)."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"squared_error shapes {a.shape} vs {b.shape}")
    d = sub(a, b)
    return tsum(mul(d, d), axis=axis)


def cross_entropy(logits: Tensor, ids: np.ndarray) -> Tensor:
    """Per-position NLL: -log softmax(logits)[..., ids]. Shape = ids.shape."""
    ids = np.asarray(ids)
    if logits.shape[:-1] != ids.shape:
        raise ShapeMismatchError(f"cross_entropy {logits.shape} vs ids {ids.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True, dtype=np.float64))
    ls = z - lse
    picked = np.take_along_axis(ls, ids[..., None], axis=-1)[..., 0]
    out = Tensor(-picked, check=False)
    sm = np.exp(ls)

    def vjp(g):
        gl = sm * g[..., None]
        np.put_along_axis(
            gl, ids[..., None], np.take_along_axis(gl, ids[..., None], axis=-1) - g[..., None], axis=-1
        )
        return (gl,)

    return _maybe_record(out, (logits,), vjp)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    worst_input: int = 0
    worst_index: tuple = ()
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def gradcheck(
    f: Callable[..., Tensor],
    points: Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-5,
) -> GradCheckReport:
    """Compare tape gradients of scalar f(*points) against central differences."""
    for p in points:
        p.requires_grad = True
    with Tape() as tape:
        for p in points:
            tape.watch(p)
        out = f(*points)
    grads = backward(tape, out)

    report = GradCheckReport(max_rel_err=0.0, tol=tol)
    for k, p in enumerate(points):
        analytic = grads[p]
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(*points).item()
            flat[i] = orig - eps
            fm = f(*points).item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst_input = k
                report.worst_index = np.unravel_index(i, p.shape)
            if rel > tol:
                report.failures.append((k, i, a, numeric, rel))
    return report


def check_finite(arr: np.ndarray, what: str = "value") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite {what}")
    return arr
