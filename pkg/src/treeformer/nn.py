"""Transformer building blocks on the tape-autodiff tensor core.

Layers are plain parameter-holding objects; evaluation is a method call.
Passing an ``rng`` enables dropout (training mode); ``rng=None`` evaluates
deterministically with dropout disabled.
"""

from __future__ import annotations

import math
from typing import Iterator, Optional, Tuple

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    embedding_lookup,
    layer_norm,
    matmul,
    mul_elementwise,
    record_op,
    relu,
    reshape,
    scale,
    softmax_last_dim,
    swap_axes,
    transpose_last_two,
)

NamedParams = Iterator[Tuple[str, Tensor]]


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


class Linear:
    """Affine map over the last axis: x @ weight (+ bias)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32,
                 bias: bool = True):
        self.weight = Tensor(glorot_uniform(rng, in_dim, out_dim, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return add(y, self.bias) if self.bias is not None else y

    def named_parameters(self, prefix: str) -> NamedParams:
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


class LayerNorm:
    def __init__(self, dim: int, eps: float = 1e-6, dtype=np.float32):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)

    def named_parameters(self, prefix: str) -> NamedParams:
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


class FeedForward:
    """Position-wise two-layer network with a ReLU in between."""

    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator, dtype=np.float32):
        self.lin1 = Linear(d_model, d_ff, rng, dtype)
        self.lin2 = Linear(d_ff, d_model, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(relu(self.lin1(x)))

    def named_parameters(self, prefix: str) -> NamedParams:
        yield from self.lin1.named_parameters(f"{prefix}.lin1")
        yield from self.lin2.named_parameters(f"{prefix}.lin2")


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when rate is 0 or no rng is supplied."""
    if rate == 0.0 or rng is None:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype)
    return mul_elementwise(x, Tensor(keep / (1.0 - rate)))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """softmax(q k^T / sqrt(d_key)) v with optional visibility mask."""
    d_key = q.data.shape[-1]
    scores = scale(matmul(q, transpose_last_two(k)), 1.0 / math.sqrt(d_key))
    weights = softmax_last_dim(scores, mask)
    return matmul(weights, v)


class MultiHeadAttention:
    """Project into per-head subspaces, attend in parallel, merge and project."""

    def __init__(self, d_model: int, num_heads: int, rng: np.random.Generator, dtype=np.float32):
        if d_model % num_heads != 0:
            raise ValueError(f"d_model {d_model} is not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.head_dim = d_model // num_heads
        self.q_proj = Linear(d_model, d_model, rng, dtype)
        # a key bias shifts every score in a row equally and softmax cancels
        # it, so the parameter could never train; leave it out
        self.k_proj = Linear(d_model, d_model, rng, dtype, bias=False)
        self.v_proj = Linear(d_model, d_model, rng, dtype)
        self.out_proj = Linear(d_model, d_model, rng, dtype)

    def _split_heads(self, x: Tensor) -> Tensor:
        b, t, d = x.data.shape
        x = reshape(x, (b, t, self.num_heads, self.head_dim))
        return swap_axes(x, 1, 2)  # (b, heads, t, head_dim)

    def _merge_heads(self, x: Tensor) -> Tensor:
        b, h, t, hd = x.data.shape
        return reshape(swap_axes(x, 1, 2), (b, t, h * hd))

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor, mask=None) -> Tensor:
        q = self._split_heads(self.q_proj(q_in))
        k = self._split_heads(self.k_proj(k_in))
        v = self._split_heads(self.v_proj(v_in))
        attended = scaled_dot_attention(q, k, v, mask)
        return self.out_proj(self._merge_heads(attended))

    def named_parameters(self, prefix: str) -> NamedParams:
        yield from self.q_proj.named_parameters(f"{prefix}.q_proj")
        yield from self.k_proj.named_parameters(f"{prefix}.k_proj")
        yield from self.v_proj.named_parameters(f"{prefix}.v_proj")
        yield from self.out_proj.named_parameters(f"{prefix}.out_proj")


class Embedding:
    def __init__(self, vocab_size: int, d_model: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = Tensor(glorot_uniform(rng, vocab_size, d_model, dtype), requires_grad=True)

    def __call__(self, ids) -> Tensor:
        return embedding_lookup(self.weight, ids)

    def named_parameters(self, prefix: str) -> NamedParams:
        yield f"{prefix}.weight", self.weight


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    """Interleaved sin/cos position table; row 0 is [0, 1, 0, 1, ...]."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    freqs = np.power(10000.0, -np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    table = np.zeros((max_len, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(pos * freqs)
    table[:, 1::2] = np.cos(pos * freqs[: d_model // 2])
    return table


class EncoderLayer:
    """Pre-norm residual block: self-attention then position-wise FFN."""

    def __init__(self, d_model, num_heads, d_ff, dropout_rate, ln_eps, rng, dtype=np.float32):
        self.ln1 = LayerNorm(d_model, ln_eps, dtype)
        self.self_attn = MultiHeadAttention(d_model, num_heads, rng, dtype)
        self.ln2 = LayerNorm(d_model, ln_eps, dtype)
        self.ffn = FeedForward(d_model, d_ff, rng, dtype)
        self.dropout_rate = dropout_rate

    def __call__(self, x: Tensor, mask, rng: Optional[np.random.Generator] = None) -> Tensor:
        h = self.ln1(x)
        x = add(x, dropout(self.self_attn(h, h, h, mask), self.dropout_rate, rng))
        x = add(x, dropout(self.ffn(self.ln2(x)), self.dropout_rate, rng))
        return x

    def named_parameters(self, prefix: str) -> NamedParams:
        yield from self.ln1.named_parameters(f"{prefix}.ln1")
        yield from self.self_attn.named_parameters(f"{prefix}.self_attn")
        yield from self.ln2.named_parameters(f"{prefix}.ln2")
        yield from self.ffn.named_parameters(f"{prefix}.ffn")


class DecoderLayer:
    """Pre-norm residual block: causal self-attention, cross-attention, FFN."""

    def __init__(self, d_model, num_heads, d_ff, dropout_rate, ln_eps, rng, dtype=np.float32):
        self.ln1 = LayerNorm(d_model, ln_eps, dtype)
        self.self_attn = MultiHeadAttention(d_model, num_heads, rng, dtype)
        self.ln2 = LayerNorm(d_model, ln_eps, dtype)
        self.cross_attn = MultiHeadAttention(d_model, num_heads, rng, dtype)
        self.ln3 = LayerNorm(d_model, ln_eps, dtype)
        self.ffn = FeedForward(d_model, d_ff, rng, dtype)
        self.dropout_rate = dropout_rate

    def __call__(self, x, memory, self_mask, cross_mask, rng=None) -> Tensor:
        h = self.ln1(x)
        x = add(x, dropout(self.self_attn(h, h, h, self_mask), self.dropout_rate, rng))
        h = self.ln2(x)
        x = add(x, dropout(self.cross_attn(h, memory, memory, cross_mask), self.dropout_rate, rng))
        x = add(x, dropout(self.ffn(self.ln3(x)), self.dropout_rate, rng))
        return x

    def named_parameters(self, prefix: str) -> NamedParams:
        yield from self.ln1.named_parameters(f"{prefix}.ln1")
        yield from self.self_attn.named_parameters(f"{prefix}.self_attn")
        yield from self.ln2.named_parameters(f"{prefix}.ln2")
        yield from self.cross_attn.named_parameters(f"{prefix}.cross_attn")
        yield from self.ln3.named_parameters(f"{prefix}.ln3")
        yield from self.ffn.named_parameters(f"{prefix}.ffn")


def label_smoothed_ce(logits: Tensor, targets, eps_ls: float, pad_id: int) -> Tensor:
    """Mean KL(smoothed one-hot || softmax(logits)) over non-pad positions.

    The smoothed target puts 1 - eps_ls on the gold class and
    eps_ls / (V - 1) on every other class.  Pad positions contribute
    neither to the loss nor to the normalization count.
    """
    z = logits.data
    targets = np.asarray(targets)
    if z.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {z.shape} do not match targets {targets.shape}")
    vocab = z.shape[-1]
    if not 0.0 <= eps_ls < 1.0:
        raise ValueError(f"label smoothing must be in [0, 1), got {eps_ls}")
    nonpad = targets != pad_id
    n_tokens = int(nonpad.sum())
    if n_tokens == 0:
        raise ValueError("label_smoothed_ce on an all-pad batch")

    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))
    logp = z - lse
    gold_logp = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]

    off = eps_ls / (vocab - 1)
    cross = -((1.0 - eps_ls - off) * gold_logp + off * logp.sum(axis=-1))
    if eps_ls > 0.0:
        neg_entropy = (1.0 - eps_ls) * math.log(1.0 - eps_ls) + eps_ls * math.log(off)
    else:
        neg_entropy = 0.0
    loss = (cross[nonpad].mean() + neg_entropy).astype(z.dtype)

    def rule(g):
        p = np.exp(logp)
        q = np.full_like(p, off)
        np.put_along_axis(q, targets[..., None], 1.0 - eps_ls, axis=-1)
        dz = (p - q) * nonpad[..., None] * (float(g) / n_tokens)
        return (dz,)

    return record_op(np.asarray(loss), (logits,), rule)
