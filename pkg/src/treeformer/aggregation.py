"""Cross-layer fusion: pairwise formulas, the residual tree, and baselines.

The tree aggregator consumes an ordered list of per-layer outputs whose
length must be a power of two (at least 2).  Leaves are paired into a
complete binary tree evaluated bottom-up in post-order.  Every internal
node fuses its children with its own independently parameterized formula;
at every node except the final (root) one, the value of the right child --
the one covering deeper layers -- is added back as a residual.

Flat baselines: a softmax-weighted linear combination of all layer outputs,
an iterative left fold of the pairwise formula, and the same complete tree
with every residual connection removed.
"""

from __future__ import annotations

from functools import reduce
from typing import List

import numpy as np

from .nn import LayerNorm, Linear, NamedParams, dropout
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat_last_dim,
    matmul,
    mul_elementwise,
    relu,
    reshape,
    scale,
    softmax_last_dim,
)

FORMULAS = ("mean", "concat_ffn", "ewp_ffn")
STRUCTURES = ("none", "rtal", "linear", "iterative", "cnn_tree")


class MeanFormula:
    """Parameter-free elementwise average of the two inputs."""

    def apply(self, a: Tensor, b: Tensor, rng=None) -> Tensor:
        return scale(add(a, b), 0.5)

    def named_parameters(self, prefix: str) -> NamedParams:
        return iter(())


class ConcatFfnFormula:
    """Concatenate to 2d, then a single-hidden-layer network back to d."""

    def __init__(self, d_model: int, inner_dim: int, rng: np.random.Generator, dtype=np.float32):
        self.lin1 = Linear(2 * d_model, inner_dim, rng, dtype)
        self.lin2 = Linear(inner_dim, d_model, rng, dtype)

    def apply(self, a: Tensor, b: Tensor, rng=None) -> Tensor:
        return self.lin2(relu(self.lin1(concat_last_dim(a, b))))

    def named_parameters(self, prefix: str) -> NamedParams:
        yield from self.lin1.named_parameters(f"{prefix}.lin1")
        yield from self.lin2.named_parameters(f"{prefix}.lin2")


class EwpFfnFormula:
    """Scale the elementwise sum by a trainable beta, then LN -> FFN -> residual.

    s = beta * (a + b); output = dropout(FFN(LN(s))) + s.
    """

    def __init__(self, d_model, inner_dim, dropout_rate, ln_eps, rng, dtype=np.float32):
        self.norm = LayerNorm(d_model, ln_eps, dtype)
        self.lin1 = Linear(d_model, inner_dim, rng, dtype)
        self.lin2 = Linear(inner_dim, d_model, rng, dtype)
        self.beta = Tensor(np.asarray(1.0, dtype=dtype), requires_grad=True)
        self.dropout_rate = dropout_rate

    def apply(self, a: Tensor, b: Tensor, rng=None) -> Tensor:
        s = mul_elementwise(add(a, b), self.beta)
        f = self.lin2(relu(self.lin1(self.norm(s))))
        return add(dropout(f, self.dropout_rate, rng), s)

    def named_parameters(self, prefix: str) -> NamedParams:
        yield from self.norm.named_parameters(f"{prefix}.norm")
        yield from self.lin1.named_parameters(f"{prefix}.lin1")
        yield from self.lin2.named_parameters(f"{prefix}.lin2")
        yield f"{prefix}.beta", self.beta


def make_formula(kind, d_model, inner_dim, dropout_rate, ln_eps, rng, dtype=np.float32):
    if kind == "mean":
        return MeanFormula()
    if kind == "concat_ffn":
        return ConcatFfnFormula(d_model, inner_dim, rng, dtype)
    if kind == "ewp_ffn":
        return EwpFfnFormula(d_model, inner_dim, dropout_rate, ln_eps, rng, dtype)
    raise ValueError(f"unknown aggregation formula {kind!r}, expected one of {FORMULAS}")


def formula_param_count(kind: str, d_model: int, inner_dim: int) -> int:
    """Trainable scalars added by one formula instance (one tree node)."""
    if kind == "mean":
        return 0
    if kind == "concat_ffn":
        return (2 * d_model * inner_dim + inner_dim) + (inner_dim * d_model + d_model)
    if kind == "ewp_ffn":
        return (d_model * inner_dim + inner_dim) + (inner_dim * d_model + d_model) + 2 * d_model + 1
    raise ValueError(f"unknown aggregation formula {kind!r}")


class _Node:
    __slots__ = ("left", "right", "formula", "residual")

    def __init__(self, left, right, formula, residual):
        self.left = left  # _Node or int leaf index
        self.right = right
        self.formula = formula
        self.residual = residual


class TreeAggregator:
    """Complete binary tree over 2^n ordered inputs, fused bottom-up.

    With ``residuals=True`` every internal node except the root adds its
    right child's value back after fusing; ``residuals=False`` gives the
    plain tree used as the no-residual baseline.
    """

    def __init__(self, num_inputs, formula_kind, d_model, inner_dim, dropout_rate,
                 ln_eps, rng, dtype=np.float32, residuals=True):
        if num_inputs < 2 or num_inputs & (num_inputs - 1):
            raise ShapeError(
                f"tree aggregation requires 2^n inputs with n >= 1, got {num_inputs}"
            )
        self.num_inputs = num_inputs
        self.nodes: List[_Node] = []  # post-order

        def build(lo: int, hi: int) -> object:
            if hi - lo == 1:
                return lo
            mid = (lo + hi) // 2
            left = build(lo, mid)
            right = build(mid, hi)
            node = _Node(left, right,
                         make_formula(formula_kind, d_model, inner_dim, dropout_rate,
                                      ln_eps, rng, dtype),
                         residuals)
            self.nodes.append(node)
            return node

        root = build(0, num_inputs)
        root.residual = False
        self.root = root

    def apply(self, layer_outputs: List[Tensor], rng=None) -> Tensor:
        if len(layer_outputs) != self.num_inputs:
            raise ShapeError(
                f"tree aggregator built for {self.num_inputs} inputs, got {len(layer_outputs)}"
            )

        def evaluate(node):
            if isinstance(node, int):
                return layer_outputs[node]
            left = evaluate(node.left)
            right = evaluate(node.right)
            value = node.formula.apply(left, right, rng)
            if node.residual:
                value = add(value, right)
            return value

        return evaluate(self.root)

    def named_parameters(self, prefix: str) -> NamedParams:
        for i, node in enumerate(self.nodes):
            yield from node.formula.named_parameters(f"{prefix}.nodes.{i}")


def rtal_aggregate(tree: TreeAggregator, layer_outputs: List[Tensor], rng=None) -> Tensor:
    return tree.apply(layer_outputs, rng)


class LinearCombination:
    """Softmax-normalized scalar weight per layer; weights start at zero."""

    def __init__(self, num_inputs: int, rng=None, dtype=np.float32):
        if num_inputs < 1:
            raise ShapeError("linear combination needs at least one input")
        self.num_inputs = num_inputs
        self.weights = Tensor(np.zeros(num_inputs, dtype=dtype), requires_grad=True)

    def apply(self, layer_outputs: List[Tensor], rng=None) -> Tensor:
        if len(layer_outputs) != self.num_inputs:
            raise ShapeError(
                f"linear combination built for {self.num_inputs} inputs, got {len(layer_outputs)}"
            )
        out_shape = layer_outputs[0].data.shape
        columns = [reshape(h, out_shape + (1,)) for h in layer_outputs]
        stacked = reduce(concat_last_dim, columns)  # (..., d, L)
        coeffs = reshape(softmax_last_dim(self.weights), (self.num_inputs, 1))
        return reshape(matmul(stacked, coeffs), out_shape)

    def named_parameters(self, prefix: str) -> NamedParams:
        yield f"{prefix}.weights", self.weights


class IterativeCombination:
    """Left fold y_l = AGG(h_l, y_{l-1}); one formula instance per fold step."""

    def __init__(self, num_inputs, formula_kind, d_model, inner_dim, dropout_rate,
                 ln_eps, rng, dtype=np.float32):
        if num_inputs < 1:
            raise ShapeError("iterative combination needs at least one input")
        self.num_inputs = num_inputs
        self.steps = [
            make_formula(formula_kind, d_model, inner_dim, dropout_rate, ln_eps, rng, dtype)
            for _ in range(num_inputs - 1)
        ]

    def apply(self, layer_outputs: List[Tensor], rng=None) -> Tensor:
        if len(layer_outputs) != self.num_inputs:
            raise ShapeError(
                f"iterative combination built for {self.num_inputs} inputs, got {len(layer_outputs)}"
            )
        acc = layer_outputs[0]
        for h, formula in zip(layer_outputs[1:], self.steps):
            acc = formula.apply(h, acc, rng)
        return acc

    def named_parameters(self, prefix: str) -> NamedParams:
        for i, step in enumerate(self.steps):
            yield from step.named_parameters(f"{prefix}.steps.{i}")


def baseline_aggregate(agg, layer_outputs: List[Tensor], rng=None) -> Tensor:
    return agg.apply(layer_outputs, rng)


def build_aggregator(structure, formula_kind, num_inputs, d_model, inner_dim,
                     dropout_rate, ln_eps, rng, dtype=np.float32):
    """Instantiate the aggregator for one stack, or None for structure 'none'."""
    if structure == "none":
        return None
    if structure == "rtal":
        return TreeAggregator(num_inputs, formula_kind, d_model, inner_dim,
                              dropout_rate, ln_eps, rng, dtype, residuals=True)
    if structure == "cnn_tree":
        return TreeAggregator(num_inputs, formula_kind, d_model, inner_dim,
                              dropout_rate, ln_eps, rng, dtype, residuals=False)
    if structure == "linear":
        return LinearCombination(num_inputs, rng, dtype)
    if structure == "iterative":
        return IterativeCombination(num_inputs, formula_kind, d_model, inner_dim,
                                    dropout_rate, ln_eps, rng, dtype)
    raise ValueError(f"unknown aggregation structure {structure!r}, expected one of {STRUCTURES}")


def aggregator_param_count(structure, formula_kind, num_inputs, d_model, inner_dim) -> int:
    """Closed-form trainable-scalar count for one stack's aggregator."""
    if structure == "none":
        return 0
    if structure in ("rtal", "cnn_tree"):
        return (num_inputs - 1) * formula_param_count(formula_kind, d_model, inner_dim)
    if structure == "linear":
        return num_inputs
    if structure == "iterative":
        return (num_inputs - 1) * formula_param_count(formula_kind, d_model, inner_dim)
    raise ValueError(f"unknown aggregation structure {structure!r}")
