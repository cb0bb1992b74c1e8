import math
import unittest
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from stransformer.autodiff import (
    Tape,
    Tensor,
    active_tape,
    add,
    add_row_bias,
    causal_dilated_conv1d,
    circular_conv1d,
    concat_cols,
    dropout,
    hadamard,
    layer_norm_rows,
    matmul,
    mean_all,
    mse_loss,
    relu,
    scale,
    softmax_rows,
    sub,
    sum_all,
    transpose,
)
from stransformer.errors import ConfigError, DimensionError, UsageError
from stransformer.gradcheck import finite_diff_check


def _param(array) -> Tensor:
    return Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)


def _conv(weights) -> tuple[Tensor, Tensor]:
    w = np.asarray(weights, dtype=np.float64).reshape(1, 1, -1)
    return Tensor(w), Tensor(np.zeros(1))


class TensorTests(unittest.TestCase):
    def test_scalar_input_becomes_one_element_vector(self) -> None:
        t = Tensor(3.0)
        self.assertEqual(t.shape, (1,))
        self.assertEqual(t.item(), 3.0)

    def test_data_is_float64(self) -> None:
        self.assertEqual(Tensor([1, 2, 3]).data.dtype, np.float64)

    def test_item_rejects_multi_element(self) -> None:
        with self.assertRaises(UsageError):
            Tensor([1.0, 2.0]).item()


class ElementwiseTests(unittest.TestCase):
    def test_hadamard_examples(self) -> None:
        a = Tensor(np.arange(6.0).reshape(2, 3))
        assert_array_equal(hadamard(a, Tensor(np.ones((2, 3)))).data, a.data)
        assert_array_equal(hadamard(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [3.0, 8.0])

    def test_add_inverse_is_zero(self) -> None:
        a = Tensor(np.random.default_rng(0).standard_normal((3, 4)))
        assert_array_equal(add(a, scale(a, -1.0)).data, np.zeros((3, 4)))

    def test_no_implicit_broadcasting(self) -> None:
        with self.assertRaises(DimensionError):
            add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
        with self.assertRaises(DimensionError):
            hadamard(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))

    def test_relu_definition_and_idempotence(self) -> None:
        x = Tensor([-1.0, 0.0, 2.0])
        assert_array_equal(relu(x).data, [0.0, 0.0, 2.0])
        assert_array_equal(relu(relu(x)).data, relu(x).data)

    def test_relu_gradient_passes_only_positive_inputs(self) -> None:
        x = _param([-1.0, 2.0])
        with Tape() as tape:
            tape.backward(sum_all(relu(x)))
        assert_array_equal(x.grad, [0.0, 1.0])

    def test_relu_subgradient_at_zero_is_zero(self) -> None:
        x = _param([0.0])
        with Tape() as tape:
            tape.backward(sum_all(relu(x)))
        assert_array_equal(x.grad, [0.0])

    def test_dropout_is_identity_without_rng_or_rate(self) -> None:
        x = Tensor(np.ones((2, 2)))
        self.assertIs(dropout(x, 0.5, None), x)
        self.assertIs(dropout(x, 0.0, np.random.default_rng(0)), x)

    def test_dropout_is_seeded(self) -> None:
        x = Tensor(np.ones((4, 5)))
        first = dropout(x, 0.5, np.random.default_rng(3)).data
        second = dropout(x, 0.5, np.random.default_rng(3)).data
        assert_array_equal(first, second)
        self.assertTrue(set(np.unique(first)) <= {0.0, 2.0})


class LinearAlgebraTests(unittest.TestCase):
    def test_matmul_examples(self) -> None:
        b = Tensor(np.random.default_rng(1).standard_normal((3, 2)))
        assert_array_equal(matmul(Tensor(np.eye(3)), b).data, b.data)
        assert_array_equal(
            matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]])).data, [[3.0], [7.0]]
        )

    def test_matmul_shape_error_names_both_shapes(self) -> None:
        with self.assertRaises(DimensionError) as ctx:
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        self.assertIn("(2, 3)", str(ctx.exception))

    def test_matmul_gradient_against_ones(self) -> None:
        a = _param(np.random.default_rng(2).standard_normal((2, 3)))
        b = Tensor(np.ones((3, 4)))
        with Tape() as tape:
            tape.backward(sum_all(matmul(a, b)))
        assert_array_equal(a.grad, np.full((2, 3), 4.0))

    def test_gradient_wrt_right_operand(self) -> None:
        a = Tensor(np.random.default_rng(3).standard_normal((2, 3)))
        b = _param(np.random.default_rng(4).standard_normal((3, 4)))
        with Tape() as tape:
            tape.backward(sum_all(matmul(a, b)))
        assert_allclose(b.grad, a.data.T @ np.ones((2, 4)), rtol=0, atol=1e-12)

    def test_concat_and_transpose(self) -> None:
        a = Tensor(np.arange(6.0).reshape(2, 3))
        assert_array_equal(concat_cols(a, Tensor(np.zeros((2, 0)))).data, a.data)
        assert_array_equal(concat_cols(Tensor([[1.0]]), Tensor([[2.0]])).data, [[1.0, 2.0]])
        assert_array_equal(transpose(transpose(a)).data, a.data)
        with self.assertRaises(DimensionError):
            concat_cols(Tensor(np.ones((2, 1))), Tensor(np.ones((3, 1))))

    def test_add_row_bias_requires_matching_width(self) -> None:
        out = add_row_bias(Tensor(np.zeros((2, 3))), Tensor([1.0, 2.0, 3.0]))
        assert_array_equal(out.data, [[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])
        with self.assertRaises(DimensionError):
            add_row_bias(Tensor(np.zeros((2, 3))), Tensor([1.0, 2.0]))


class NormalizerOpTests(unittest.TestCase):
    def test_softmax_examples(self) -> None:
        assert_allclose(softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]], atol=1e-15)
        assert_allclose(softmax_rows(Tensor([[1000.0, 1000.0]])).data, [[0.5, 0.5]], atol=1e-15)
        assert_allclose(
            softmax_rows(Tensor([[math.log(1.0), math.log(3.0)]])).data, [[0.25, 0.75]], atol=1e-15
        )

    def test_softmax_rows_sum_to_one_and_are_shift_invariant(self) -> None:
        rng = np.random.default_rng(5)
        for _ in range(20):
            v = rng.uniform(-50, 50, size=(4, 7))
            probs = softmax_rows(Tensor(v)).data
            self.assertTrue(np.all(probs >= 0))
            assert_allclose(probs.sum(axis=1), np.ones(4), atol=1e-12)
            shifted = softmax_rows(Tensor(v + 17.25)).data
            assert_allclose(shifted, probs, atol=1e-12)

    def test_layer_norm_examples(self) -> None:
        ones, zeros = Tensor(np.ones(3)), Tensor(np.zeros(3))
        assert_allclose(layer_norm_rows(Tensor([[2.0, 2.0, 2.0]]), ones, zeros).data, [[0.0, 0.0, 0.0]])
        expected = math.sqrt(1.5)
        assert_allclose(
            layer_norm_rows(Tensor([[1.0, 2.0, 3.0]]), ones, zeros, eps=1e-14).data,
            [[-expected, 0.0, expected]],
            atol=1e-9,
        )
        bias = Tensor([0.5, -1.0, 2.0])
        out = layer_norm_rows(Tensor(np.random.default_rng(6).standard_normal((4, 3))), zeros, bias).data
        assert_array_equal(out, np.tile(bias.data, (4, 1)))

    def test_layer_norm_matches_direct_formula(self) -> None:
        rng = np.random.default_rng(7)
        x = rng.standard_normal((5, 6))
        eps = 1e-5
        expected = (x - x.mean(axis=1, keepdims=True)) / np.sqrt(x.var(axis=1, keepdims=True) + eps)
        out = layer_norm_rows(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6)), eps).data
        assert_allclose(out, expected, atol=1e-12)
        self.assertLess(np.abs(out.mean(axis=1)).max(), 1e-10)

    def test_layer_norm_rejects_nonpositive_eps(self) -> None:
        with self.assertRaises(ConfigError):
            layer_norm_rows(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)


class ConvolutionTests(unittest.TestCase):
    def test_causal_conv_examples(self) -> None:
        x = Tensor([[1.0, 2.0, 3.0, 4.0]])
        w, b = _conv([1.0, 1.0])
        assert_array_equal(causal_dilated_conv1d(x, w, b, dilation=1).data, [[1.0, 3.0, 5.0, 7.0]])
        assert_array_equal(causal_dilated_conv1d(x, w, b, dilation=2).data, [[1.0, 2.0, 4.0, 6.0]])

    def test_causal_conv_identity_kernel(self) -> None:
        x = Tensor(np.random.default_rng(8).standard_normal((3, 6)))
        w = Tensor(np.eye(3)[:, :, None])
        assert_array_equal(causal_dilated_conv1d(x, w, Tensor(np.zeros(3))).data, x.data)

    def test_causal_conv_is_bit_exactly_causal(self) -> None:
        rng = np.random.default_rng(9)
        for _ in range(100):
            c_in, c_out, length = rng.integers(1, 4), rng.integers(1, 4), int(rng.integers(2, 20))
            kernel, dilation = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            x = rng.standard_normal((c_in, length))
            w = Tensor(rng.standard_normal((c_out, c_in, kernel)))
            b = Tensor(rng.standard_normal(c_out))
            t0 = int(rng.integers(0, length - 1))
            perturbed = x.copy()
            perturbed[:, t0 + 1 :] += rng.standard_normal((c_in, length - t0 - 1))
            base = causal_dilated_conv1d(Tensor(x), w, b, dilation).data
            moved = causal_dilated_conv1d(Tensor(perturbed), w, b, dilation).data
            assert_array_equal(base[:, : t0 + 1], moved[:, : t0 + 1])

    def test_circular_conv_example(self) -> None:
        w, b = _conv([1.0, 1.0])
        assert_array_equal(circular_conv1d(Tensor([[1.0, 2.0, 3.0]]), w, b).data, [[3.0, 5.0, 4.0]])

    def test_zero_padding_drops_wraparound(self) -> None:
        w, b = _conv([1.0, 1.0])
        out = circular_conv1d(Tensor([[1.0, 2.0, 3.0]]), w, b, padding="zero").data
        assert_array_equal(out, [[3.0, 5.0, 3.0]])

    def test_circular_conv_width_one_is_pointwise(self) -> None:
        rng = np.random.default_rng(10)
        x = rng.standard_normal((4, 5))
        w = rng.standard_normal((2, 4, 1))
        out = circular_conv1d(Tensor(x), Tensor(w), Tensor(np.zeros(2))).data
        assert_allclose(out, w[:, :, 0] @ x, atol=1e-12)

    def test_circular_conv_is_shift_equivariant(self) -> None:
        rng = np.random.default_rng(11)
        x = rng.standard_normal((3, 7))
        w, b = Tensor(rng.standard_normal((2, 3, 3))), Tensor(rng.standard_normal(2))
        base = circular_conv1d(Tensor(x), w, b).data
        for shift in range(1, 7):
            rolled = circular_conv1d(Tensor(np.roll(x, shift, axis=1)), w, b).data
            assert_allclose(rolled, np.roll(base, shift, axis=1), atol=1e-12)

    def test_circular_conv_rejects_kernel_wider_than_length(self) -> None:
        w, b = _conv([1.0, 1.0, 1.0])
        with self.assertRaises(ConfigError):
            circular_conv1d(Tensor([[1.0, 2.0]]), w, b)


class TapeTests(unittest.TestCase):
    def test_sum_of_squares_gradient(self) -> None:
        x = _param([1.0, -2.0, 3.0])
        with Tape() as tape:
            tape.backward(sum_all(hadamard(x, x)))
        assert_array_equal(x.grad, [2.0, -4.0, 6.0])

    def test_fan_out_accumulates(self) -> None:
        x = _param([1.5])
        with Tape() as tape:
            y = scale(x, 2.0)
            tape.backward(sum_all(add(y, hadamard(y, x))))
        # d/dx (2x + 2x²) = 2 + 4x
        assert_allclose(x.grad, [8.0])

    def test_repeated_backward_accumulates_until_zeroed(self) -> None:
        x = _param([1.0, 2.0])
        for _ in range(2):
            with Tape() as tape:
                tape.backward(sum_all(scale(x, 3.0)))
        assert_array_equal(x.grad, [6.0, 6.0])
        x.zero_grad()
        self.assertIsNone(x.grad)

    def test_constant_inputs_never_receive_gradient(self) -> None:
        x = _param([1.0, 2.0])
        c = Tensor([3.0, 4.0])
        with Tape() as tape:
            tape.backward(sum_all(hadamard(x, c)))
        self.assertIsNone(c.grad)
        assert_array_equal(x.grad, [3.0, 4.0])

    def test_disconnected_parameter_gets_no_gradient(self) -> None:
        x, unused = _param([1.0]), _param([5.0])
        with Tape() as tape:
            tape.backward(sum_all(x))
        self.assertIsNone(unused.grad)

    def test_non_scalar_loss_is_usage_error(self) -> None:
        x = _param([1.0, 2.0])
        with Tape() as tape:
            with self.assertRaises(UsageError):
                tape.backward(scale(x, 2.0))

    def test_loss_from_another_tape_is_usage_error(self) -> None:
        x = _param([1.0])
        with Tape():
            loss = sum_all(x)
        with Tape() as other:
            with self.assertRaises(UsageError):
                other.backward(loss)

    def test_nothing_recorded_outside_a_tape(self) -> None:
        self.assertIsNone(active_tape())
        out = sum_all(_param([1.0, 2.0]))
        self.assertFalse(out.requires_grad)
        self.assertIsNone(out.node)

    def test_threads_keep_separate_tapes(self) -> None:
        def grad_of(value: float) -> float:
            x = _param([value])
            with Tape() as tape:
                tape.backward(sum_all(hadamard(x, x)))
            return float(x.grad[0])

        with ThreadPoolExecutor(max_workers=4) as pool:
            results = list(pool.map(grad_of, [1.0, 2.0, 3.0, 4.0]))
        self.assertEqual(results, [2.0, 4.0, 6.0, 8.0])


class OpGradientTests(unittest.TestCase):
    """Every differentiable op against central differences on inputs in [-1, 1]."""

    def setUp(self) -> None:
        self.rng = np.random.default_rng(12)

    def _uniform(self, *shape: int) -> Tensor:
        return _param(self.rng.uniform(-1.0, 1.0, size=shape))

    def _check(self, build, *params: Tensor) -> None:
        direction = self.rng.standard_normal(build().shape)

        def loss() -> Tensor:
            return sum_all(hadamard(build(), Tensor(direction)))

        self.assertLess(finite_diff_check(loss, list(params), h=1e-5), 1e-4)

    def test_elementwise_ops(self) -> None:
        a, b = self._uniform(3, 4), self._uniform(3, 4)
        self._check(lambda: add(a, b), a, b)
        self._check(lambda: sub(a, b), a, b)
        self._check(lambda: hadamard(a, b), a, b)
        self._check(lambda: scale(a, -2.5), a)
        self._check(lambda: relu(a), a)

    def test_layout_and_linear_ops(self) -> None:
        a, b, bias = self._uniform(3, 4), self._uniform(4, 2), self._uniform(2)
        c = self._uniform(3, 2)
        self._check(lambda: matmul(a, b), a, b)
        self._check(lambda: add_row_bias(c, bias), c, bias)
        self._check(lambda: transpose(a), a)
        self._check(lambda: concat_cols(a, c), a, c)

    def test_reductions_and_loss(self) -> None:
        a, target = self._uniform(3, 4), self._uniform(3, 4)
        self._check(lambda: sum_all(a), a)
        self._check(lambda: mean_all(a), a)
        self._check(lambda: mse_loss(a, target), a, target)

    def test_row_normalizers(self) -> None:
        a, gain, bias = self._uniform(3, 5), self._uniform(5), self._uniform(5)
        self._check(lambda: softmax_rows(a), a)
        self._check(lambda: layer_norm_rows(a, gain, bias), a, gain, bias)

    def test_convolutions(self) -> None:
        x, w, b = self._uniform(2, 7), self._uniform(3, 2, 3), self._uniform(3)
        self._check(lambda: causal_dilated_conv1d(x, w, b, dilation=2), x, w, b)
        self._check(lambda: circular_conv1d(x, w, b), x, w, b)
        self._check(lambda: circular_conv1d(x, w, b, padding="zero"), x, w, b)


if __name__ == "__main__":
    unittest.main()
