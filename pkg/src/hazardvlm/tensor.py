"""Minimal dense-tensor library with tape-based reverse-mode differentiation.

Tensors wrap row-major numpy float arrays (float32 by default). Operations
record themselves on the active ``Tape`` when any input requires gradients;
``Tape.backward`` replays the tape in reverse and accumulates gradients into
the ``grad`` buffers of every tensor that requires them. GELU is the only
activation provided (smooth everywhere, which keeps finite-difference
checks clean).

A tape and the tensors recorded on it belong to one logical thread;
tensors are not mutated after creation except their grad buffers. Pure
stateless ops on disjoint data are safe to call concurrently.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

# NaN/Inf guard at op outputs; tests and training leave it on, hot inner
# loops may disable it via `finite_checks(False)`.
_FINITE_CHECKS = True

_TAPE_STACK: list["Tape"] = []


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared at an operation boundary."""


class finite_checks:
    """Context manager toggling the NaN/Inf guard."""

    def __init__(self, enabled: bool):
        self.enabled = enabled

    def __enter__(self):
        global _FINITE_CHECKS
        self.prev = _FINITE_CHECKS
        _FINITE_CHECKS = self.enabled
        return self

    def __exit__(self, *exc):
        global _FINITE_CHECKS
        _FINITE_CHECKS = self.prev
        return False


def _guard(arr: np.ndarray, op: str) -> np.ndarray:
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")
    return arr


class Tensor:
    """Dense row-major float array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            data = np.asarray(data, dtype=dtype)
        elif isinstance(data, (np.ndarray, np.floating)):
            # keep float32/float64 as-is (numpy scalars included, so 0-d op
            # results don't get silently downcast)
            data = np.asarray(data)
            if data.dtype not in (np.float32, np.float64):
                data = data.astype(DEFAULT_DTYPE)
        else:
            data = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data: np.ndarray = data
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the module-level functions are the real surface
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class TapeNode:
    """One recorded op: parents, output, and the backward rule."""

    __slots__ = ("op", "parents", "output", "backward_fn")

    def __init__(
        self,
        op: str,
        parents: tuple[Tensor, ...],
        output: Tensor,
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    ):
        self.op = op
        self.parents = parents
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Append-only op record; construction order is the topological order."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape contexts exited out of order"
        return False

    def backward(self, root: Tensor) -> None:
        backward(self, root)


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(op: str, parents: tuple[Tensor, ...], out_data: np.ndarray, backward_fn) -> Tensor:
    _guard(out_data, op)
    requires = any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=requires)
    tape = _active_tape()
    if requires and tape is not None:
        tape.nodes.append(TapeNode(op, parents, out, backward_fn))
    return out


def backward(tape: Tape, root: Tensor) -> None:
    """Accumulate d(root)/d(tensor) into grad buffers along the tape.

    Fan-out adds gradient contributions; repeated backward calls keep
    accumulating into ``grad`` until ``zero_grad``. By reverse topological
    order, a tensor's gradient is complete when its producing node is
    reached, so it is flushed to the buffer exactly once.
    """
    if root.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    grads: dict[Tensor, np.ndarray] = {root: np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g_out = grads.pop(node.output, None)
        if g_out is None:
            continue
        if node.output.requires_grad:
            node.output.accumulate_grad(g_out)
        for parent, g in zip(node.parents, node.backward_fn(g_out)):
            if g is None or not parent.requires_grad:
                continue
            if parent in grads:
                grads[parent] = grads[parent] + g
            else:
                grads[parent] = g
    # anything left was not produced on this tape: leaves, params, constants
    for t, g in grads.items():
        if t.requires_grad:
            t.accumulate_grad(g)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _record("matmul", (a, b), out, bwd)


def add(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), a.data + b.data, bwd)


def sub(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", (a, b), a.data - b.data, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", (a, b), a.data * b.data, bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _record("div", (a, b), a.data / b.data, bwd)


def scale(x: Tensor, s: float) -> Tensor:
    x = _as_tensor(x)
    s = float(s)

    def bwd(g):
        return (g * s,)

    return _record("scale", (x,), x.data * s, bwd)


def shift(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)

    def bwd(g):
        return (g,)

    return _record("shift", (x,), x.data + float(c), bwd)


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)

    def bwd(g):
        return (g * out,)

    return _record("exp", (x,), out, bwd)


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def bwd(g):
        return (g / x.data,)

    return _record("log", (x,), np.log(x.data), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    x = _as_tensor(x)
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        dx = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner
        return (g * dx,)

    return _record("gelu", (x,), out, bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along `axis`; rows sum to 1 within 1e-6."""
    x = _as_tensor(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _record("softmax", (x,), out, bwd)


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of `targets` under row-wise softmax.

    logits: T x V; targets: T integer token indices. Returns a scalar.
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects T x V logits, got {logits.shape}")
    idx = np.asarray(targets, dtype=np.int64)
    if idx.ndim != 1 or idx.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"targets length {idx.shape} does not match logits rows {logits.shape[0]}"
        )
    vocab = logits.shape[1]
    if idx.size == 0:
        raise ShapeError("cross_entropy on an empty target sequence")
    if idx.min() < 0 or idx.max() >= vocab:
        raise IndexError(f"target index out of range [0, {vocab})")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(n), idx]
    out = np.asarray(nll.mean(), dtype=logits.dtype)

    def bwd(g):
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), idx] -= 1.0
        return (float(g) * p / n,)

    return _record("cross_entropy", (logits,), out, bwd)


def tsum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", (x,), np.asarray(out), bwd)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    old = x.shape

    def bwd(g):
        return (g.reshape(old),)

    return _record("reshape", (x,), x.data.reshape(shape), bwd)


def permute(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inverse),)

    return _record("permute", (x,), np.transpose(x.data, axes).copy(), bwd)


def transpose(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects rank 2, got {x.shape}")
    return permute(x, (1, 0))


def take_rows(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Row gather (embedding lookup). Backward scatter-adds into the table."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("take_rows expects a flat index sequence")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"row index out of range [0, {x.shape[0]})")

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record("take_rows", (x,), x.data[idx].copy(), bwd)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _record("slice_axis", (x,), x.data[sl].copy(), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        outs = []
        for i in range(len(parts)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            outs.append(g[tuple(sl)])
        return outs

    return _record("concat", parts, np.concatenate([p.data for p in parts], axis=axis), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv
    out = y * gain.data + bias.data
    d = x.shape[-1]

    def bwd(g):
        gy = g * gain.data
        dx = inv * (gy - gy.mean(axis=-1, keepdims=True) - y * (gy * y).mean(axis=-1, keepdims=True))
        ggain = (g * y).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        return dx, ggain, gbias

    return _record("layer_norm", (x, gain, bias), out, bwd)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> float:
    """Max relative error between backward() and central differences.

    The function is evaluated with a float64 copy of ``x`` (float32 rounding
    inside the forward would swamp the 1e-3 tolerance). Componentwise error
    is |a-b| / max(|a|, |b|, 1e-8); the max over components is returned.
    """
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True)
    with Tape() as tape:
        out = f(x64)
    if out.size != 1:
        raise ShapeError("grad_check requires a scalar-valued function")
    tape.backward(out)
    analytic = x64.grad if x64.grad is not None else np.zeros_like(x64.data)

    flat = x64.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x64).item()
        flat[i] = orig - eps
        lo = f(x64).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * eps)
    numeric = numeric.reshape(x64.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
