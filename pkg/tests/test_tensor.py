"""Tensor-core kernels, softmax/layer-norm, tape backward, grad_check."""

import numpy as np
import pytest

from treeformer.tensor import (
    MaskError,
    NumericalError,
    ShapeError,
    Tape,
    Tensor,
    add,
    concat_last_dim,
    embedding_lookup,
    grad_check,
    layer_norm,
    matmul,
    mul_elementwise,
    relu,
    reshape,
    scale,
    set_debug_checks,
    softmax_last_dim,
    sum_all,
    swap_axes,
    transpose_last_two,
)

from oracles import scalar_matmul, scalar_softmax


class TestKernels:
    def test_matmul_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = matmul(a, Tensor(np.eye(2)))
        np.testing.assert_array_equal(out.data, a.data)

    def test_matmul_against_scalar_loop(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((2, 3))
        b = rng.standard_normal((3, 2))
        out = matmul(Tensor(a), Tensor(b)).data
        ref = scalar_matmul(a, b)
        assert np.abs(out - ref).max() <= 1e-6 * np.abs(ref).max()

    def test_batched_matmul_against_scalar_loop(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            bsz, m, k, n = (int(rng.integers(1, 9)) for _ in range(4))
            a = rng.standard_normal((bsz, m, k))
            b = rng.standard_normal((bsz, k, n))
            out = matmul(Tensor(a), Tensor(b)).data
            ref = scalar_matmul(a, b)
            assert np.abs(out - ref).max() <= 1e-6 * max(np.abs(ref).max(), 1.0)

    def test_matmul_shape_errors(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))

    def test_relu_definition(self):
        out = relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_concat_last_dim(self):
        out = concat_last_dim(Tensor([1.0, 2.0]), Tensor([3.0]))
        np.testing.assert_array_equal(out.data, [1.0, 2.0, 3.0])

    def test_concat_shape_error(self):
        with pytest.raises(ShapeError):
            concat_last_dim(Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2))))

    def test_add_leading_broadcast_only(self):
        out = add(Tensor(np.ones((2, 3, 4))), Tensor(np.ones(4)))
        assert out.shape == (2, 3, 4)
        with pytest.raises(ShapeError):
            add(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((2, 3, 1))))

    def test_scale_and_mul(self):
        x = np.array([1.0, -2.0])
        np.testing.assert_array_equal(scale(Tensor(x), -0.5).data, [-0.5, 1.0])
        np.testing.assert_array_equal(
            mul_elementwise(Tensor(x), Tensor(x)).data, [1.0, 4.0]
        )

    def test_embedding_lookup_and_range_check(self):
        table = Tensor(np.arange(12, dtype=np.float32).reshape(4, 3))
        out = embedding_lookup(table, np.array([[0, 3], [1, 1]]))
        np.testing.assert_array_equal(out.data[0, 1], table.data[3])
        with pytest.raises(IndexError):
            embedding_lookup(table, np.array([4]))

    def test_transpose_and_reshape(self):
        x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
        np.testing.assert_array_equal(transpose_last_two(x).data, x.data.T)
        np.testing.assert_array_equal(
            swap_axes(Tensor(np.zeros((2, 3, 4))), 0, 1).data.shape, (3, 2, 4)
        )
        assert reshape(x, (3, 2)).shape == (3, 2)
        with pytest.raises(ShapeError):
            reshape(x, (4, 2))

    def test_int_input_becomes_default_float(self):
        assert Tensor([1, 2, 3]).dtype == np.float32


class TestSoftmax:
    def test_uniform_row(self):
        out = softmax_last_dim(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=1e-6)

    def test_single_visible_key(self):
        out = softmax_last_dim(Tensor([5.0, 7.0]), mask=np.array([True, False]))
        np.testing.assert_array_equal(out.data, [1.0, 0.0])

    def test_against_direct_formula(self):
        out = softmax_last_dim(Tensor([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(out.data, scalar_softmax(np.array([1.0, 2.0, 3.0])), rtol=1e-6)

    def test_rows_sum_to_one_over_wide_range(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            x = rng.uniform(-50, 50, size=(4, 6))
            sums = softmax_last_dim(Tensor(x)).data.sum(axis=-1)
            np.testing.assert_allclose(sums, 1.0, atol=1e-6)

    def test_masked_positions_exactly_zero(self):
        rng = np.random.default_rng(8)
        x = rng.uniform(-50, 50, size=(3, 5))
        mask = rng.random((3, 5)) > 0.4
        mask[:, 0] = True
        out = softmax_last_dim(Tensor(x), mask=mask).data
        assert (out[~mask] == 0.0).all()
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)

    def test_fully_masked_row_raises(self):
        with pytest.raises(MaskError):
            softmax_last_dim(Tensor([[1.0, 2.0]]), mask=np.array([[False, False]]))


class TestLayerNorm:
    def test_zero_input(self):
        d = 4
        out = layer_norm(Tensor(np.zeros(d)), Tensor(np.ones(d)), Tensor(np.zeros(d)), 1e-5)
        np.testing.assert_array_equal(out.data, np.zeros(d))

    def test_constant_input_zero_normalized_part(self):
        d = 4
        gamma = Tensor(np.full(d, 3.0))
        out = layer_norm(Tensor(np.ones(d)), gamma, Tensor(np.zeros(d)), 1e-5)
        np.testing.assert_allclose(out.data, np.zeros(d), atol=1e-7)

    def test_hand_evaluation(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        eps = 1e-5
        expected = (x - x.mean()) / np.sqrt(x.var() + eps)
        out = layer_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), eps)
        np.testing.assert_allclose(out.data, expected, rtol=1e-6)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(4)), 1e-5)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(x)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_quadratic(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(mul_elementwise(x, x))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_fanout_accumulates(self):
        x = Tensor(np.array([1.0, 1.0]), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(add(x, x))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = relu(x)
        with pytest.raises(ShapeError):
            tape.backward(y)

    def test_empty_tape_rejected(self):
        with pytest.raises(ValueError):
            Tape().backward(Tensor(np.float64(0.0)))

    def test_no_recording_without_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = relu(x)
        assert not y.requires_grad

    def test_broadcast_add_reduces_grad(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.zeros(3), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(add(x, b))
        tape.backward(loss)
        np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])

    def test_tape_determinism(self):
        def run():
            rng = np.random.default_rng(42)
            x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
            w = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
            with Tape() as tape:
                y = softmax_last_dim(matmul(relu(x), w))
                loss = sum_all(mul_elementwise(y, y))
            tape.backward(loss)
            return y.data.copy(), x.grad.copy(), w.grad.copy()

        first, second = run(), run()
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)

    def test_debug_checks_flag_nonfinite(self):
        set_debug_checks(True)
        try:
            with pytest.raises(NumericalError):
                scale(Tensor([1.0]), float("inf"))
        finally:
            set_debug_checks(False)


class TestGradCheck:
    def test_identity(self):
        err = grad_check(lambda t: t, Tensor(np.linspace(-1, 1, 6)))
        assert err <= 1e-9

    def test_relu_away_from_kink(self):
        x = np.array([-0.8, -0.3, 0.4, 1.2])
        assert grad_check(relu, Tensor(x)) <= 1e-7

    def test_softmax(self):
        rng = np.random.default_rng(3)
        assert grad_check(softmax_last_dim, Tensor(rng.standard_normal((2, 5)))) <= 1e-6

    @pytest.mark.parametrize("seed", range(100))
    def test_primitives_many_seeds(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 3))
        other = Tensor(rng.standard_normal((2, 3)))
        w = Tensor(rng.standard_normal((3, 4)))
        gamma = Tensor(rng.standard_normal(3))
        beta = Tensor(rng.standard_normal(3))
        safe = x + np.sign(x) * 0.05   # keep relu coordinates off the kink
        cases = [
            (lambda t: matmul(t, w), x),
            (lambda t: add(t, other), x),
            (lambda t: mul_elementwise(t, other), x),
            (lambda t: scale(t, -1.7), x),
            (relu, safe),
            (lambda t: concat_last_dim(t, other), x),
            (transpose_last_two, x),
            (lambda t: reshape(t, (3, 2)), x),
            (softmax_last_dim, x),
            (lambda t: layer_norm(t, gamma, beta, 1e-6), x),
            (sum_all, x),
        ]
        for f, point in cases:
            assert grad_check(f, Tensor(point)) <= 1e-5

    def test_embedding_table_gradient(self):
        ids = np.array([[0, 2], [2, 1]])
        err = grad_check(lambda t: embedding_lookup(t, ids), Tensor(np.random.default_rng(5).standard_normal((3, 4))))
        assert err <= 1e-6
