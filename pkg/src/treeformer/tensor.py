"""Dense tensors with reverse-mode automatic differentiation.

Operations execute eagerly on numpy arrays.  While a ``Tape`` is active and
any operand requires gradients, each operation also appends a backward rule
to the tape; ``Tape.backward`` replays the rules in reverse execution order,
which is a valid topological order by construction.

Elementwise broadcasting is deliberately restricted: the smaller operand's
shape must be a trailing suffix of the larger one (i.e. broadcasting happens
over leading batch dimensions only).  This keeps every backward rule a plain
sum over leading axes.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes do not conform to the operation's contract."""


class MaskError(ValueError):
    """An attention mask left a softmax row with no visible position."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared where the computation requires finiteness."""


_DEBUG_CHECKS = [False]


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf checking after every forward operation (slow)."""
    _DEBUG_CHECKS[0] = bool(enabled)


class Tensor:
    """Dense n-dimensional value, optionally participating in gradient taping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tape:
    """Ordered record of executed operations for one backward pass.

    A tape is confined to the thread that opened it.  Records are
    (output, inputs, rule) triples where ``rule`` maps the output gradient
    to one gradient per input (``None`` for non-differentiable slots).
    """

    def __init__(self):
        self._records: list = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Populate .grad on every requires_grad ancestor of ``loss``."""
        if loss.data.ndim != 0:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if not self._records:
            raise ValueError("backward on an empty tape")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, rule in reversed(self._records):
            gout = out.grad
            if gout is None:
                continue
            grads = rule(gout)
            for tensor, g in zip(inputs, grads):
                if g is None or not tensor.requires_grad:
                    continue
                tensor.grad = g if tensor.grad is None else tensor.grad + g


def _active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def record_op(data: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    """Wrap an op result, recording ``rule`` if a tape is active and needed.

    Exposed so composite operations (e.g. fused losses) can register a
    hand-derived backward rule instead of composing primitives.
    """
    if _DEBUG_CHECKS[0] and not np.all(np.isfinite(data)):
        raise NumericalError("non-finite value produced by a forward operation")
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        tape._records.append((out, tuple(inputs), rule))
        return out
    return Tensor(data)


def _check_suffix_broadcast(a_shape: tuple, b_shape: tuple) -> None:
    if a_shape == b_shape:
        return
    small, big = (a_shape, b_shape) if len(a_shape) < len(b_shape) else (b_shape, a_shape)
    if len(small) == len(big) or big[len(big) - len(small):] != small:
        raise ShapeError(
            f"shapes {a_shape} and {b_shape} do not conform: elementwise ops "
            "broadcast only over leading batch dimensions"
        )


def _sum_to_suffix(shape: tuple, g: np.ndarray) -> np.ndarray:
    """Reduce a gradient to ``shape`` by summing broadcast leading axes."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _sum_to_shape(shape: tuple, g: np.ndarray) -> np.ndarray:
    """Reduce a gradient to ``shape``, handling extent-1 broadcast axes too.

    Needed for matmul batch dimensions, which numpy broadcasts generally.
    """
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    ones = tuple(i for i, (want, got) in enumerate(zip(shape, g.shape)) if want == 1 and got != 1)
    if ones:
        g = g.sum(axis=ones, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitive kernels
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batched over leading axes."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def rule(g):
        ga = _sum_to_shape(ad.shape, g @ bd.swapaxes(-1, -2))
        gb = _sum_to_shape(bd.shape, ad.swapaxes(-1, -2) @ g)
        return ga, gb

    return record_op(out, (a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix_broadcast(a.data.shape, b.data.shape)
    a_shape, b_shape = a.data.shape, b.data.shape

    def rule(g):
        return _sum_to_suffix(a_shape, g), _sum_to_suffix(b_shape, g)

    return record_op(a.data + b.data, (a, b), rule)


def mul_elementwise(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix_broadcast(a.data.shape, b.data.shape)
    ad, bd = a.data, b.data

    def rule(g):
        return _sum_to_suffix(ad.shape, g * bd), _sum_to_suffix(bd.shape, g * ad)

    return record_op(ad * bd, (a, b), rule)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def rule(g):
        return (g * s,)

    return record_op(a.data * s, (a,), rule)


def relu(a: Tensor) -> Tensor:
    ad = a.data

    def rule(g):
        return (g * (ad > 0),)

    return record_op(np.maximum(ad, 0), (a,), rule)


def concat_last_dim(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != b.data.ndim or a.data.shape[:-1] != b.data.shape[:-1]:
        raise ShapeError(f"concat operands must agree on all but the last dim: {a.shape} vs {b.shape}")
    split = a.data.shape[-1]

    def rule(g):
        return g[..., :split], g[..., split:]

    return record_op(np.concatenate([a.data, b.data], axis=-1), (a, b), rule)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"token id out of range [0, {table.data.shape[0]}) in embedding lookup"
        )
    shape = table.data.shape

    def rule(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (gt,)

    return record_op(table.data[ids], (table,), rule)


def swap_axes(a: Tensor, axis1: int, axis2: int) -> Tensor:
    def rule(g):
        return (g.swapaxes(axis1, axis2),)

    return record_op(a.data.swapaxes(axis1, axis2), (a,), rule)


def transpose_last_two(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise ShapeError(f"transpose_last_two needs rank >= 2, got {a.shape}")
    return swap_axes(a, -2, -1)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} (size {a.data.size}) to {shape}")
    old = a.data.shape

    def rule(g):
        return (g.reshape(old),)

    return record_op(a.data.reshape(shape), (a,), rule)


def sum_all(a: Tensor) -> Tensor:
    ad = a.data

    def rule(g):
        return (g * np.ones_like(ad),)

    return record_op(np.asarray(ad.sum(), dtype=ad.dtype), (a,), rule)


def softmax_last_dim(x: Tensor, mask=None) -> Tensor:
    """Numerically stabilized softmax over the last axis.

    ``mask`` is a boolean array broadcastable to x's shape; True marks a
    visible position.  Masked positions come out exactly 0.  A row with no
    visible position signals a malformed attention mask and raises.
    """
    z = x.data
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not m.any(axis=-1).all():
            raise MaskError("softmax row is fully masked")
        z = np.where(m, z, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return record_op(y, (x,), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta_shift: Tensor, eps: float = 1e-6) -> Tensor:
    """Standardize over the last axis, then apply learned scale and shift."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta_shift.data.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/shift must have shape ({d},), got {gamma.shape} and {beta_shift.shape}"
        )
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta_shift.data
    gdata = gamma.data

    def rule(g):
        reduce_axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        dxhat = g * gdata
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return record_op(out, (x, gamma, beta_shift), rule)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def grad_check(f, x, step: float = 1e-5, projection_seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic Tensor -> Tensor function.  Its output is
    contracted with a fixed random projection so the check exercises the
    full jacobian even when the output has constant reductions (softmax
    rows, for instance).  Runs in double precision; returns
    max_i |analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, 1e-8).
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    probe = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(probe)
        w = np.random.default_rng(projection_seed).standard_normal(y.data.shape)
        loss = sum_all(mul_elementwise(y, Tensor(w)))
    tape.backward(loss)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(x0)

    def objective(arr: np.ndarray) -> float:
        return float((f(Tensor(arr)).data * w).sum())

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = objective(x0)
        flat[i] = orig - step
        lo = objective(x0)
        flat[i] = orig
        num_flat[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    return float(rel.max()) if rel.size else 0.0
