import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from amdl.errors import DimensionError, NumericError
from amdl.tensor import (
    GradCheckError,
    OptimState,
    Tensor,
    backward,
    batchnorm,
    conv2d,
    conv2d_direct,
    global_avg_pool,
    grad_check,
    linear,
    no_grad,
    relu,
    sgd_step,
    softmax,
    softmax_cross_entropy,
    tsum,
)


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def weighted_sum(out: Tensor, seed: int = 0) -> Tensor:
    """Scalar probe with non-uniform weights so every output entry matters."""
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return tsum(out * Tensor(w))


class TestConv2d:
    def test_scalar_kernel(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        w = Tensor(np.array([[[[2.0]]]]))
        out = conv2d(x, w, Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data[0, 0], [[2, 4], [6, 8]])

    def test_delta_kernel_is_identity(self):
        x = np.random.default_rng(1).standard_normal((2, 1, 6, 5))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = conv2d(Tensor(x), Tensor(w), stride=1, pad=1)
        np.testing.assert_array_equal(out.data, x)

    @pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1), (1, 0, 3), (3, 2, 3)])
    def test_matches_direct_loop(self, stride, pad, k):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((4, 3, k, k))
        b = rng.standard_normal(4)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad)
        np.testing.assert_allclose(out.data, conv2d_direct(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        x = t64(rng.standard_normal((2, 3, 5, 5)))
        w = t64(rng.standard_normal((4, 3, 3, 3)))
        b = t64(rng.standard_normal(4))
        err = grad_check(lambda x, w, b: weighted_sum(conv2d(x, w, b, 1, 1)), [x, w, b])
        assert err < 1e-4

    @pytest.mark.parametrize("stride,k", [(2, 3), (2, 1), (1, 1)])
    def test_gradients_strided_and_pointwise(self, stride, k):
        rng = np.random.default_rng(3)
        x = t64(rng.standard_normal((2, 3, 6, 6)))
        w = t64(rng.standard_normal((2, 3, k, k)))
        pad = (k - 1) // 2
        assert grad_check(lambda x, w: weighted_sum(conv2d(x, w, None, stride, pad)), [x, w]) < 1e-4

    @pytest.mark.parametrize("stride", [1, 2])
    def test_centre_kernel_equals_parallel_pointwise(self, stride):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 3, 6, 7))
        w, a = rng.standard_normal((4, 3, 3, 3)), rng.standard_normal((4, 3, 1, 1))
        b, ab = rng.standard_normal(4), rng.standard_normal(4)
        fused = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, 1, center=Tensor(a), center_bias=Tensor(ab))
        ref = conv2d_direct(x, w, b, stride, 1) + conv2d_direct(x, a, ab, stride, 0)
        np.testing.assert_allclose(fused.data, ref, rtol=1e-12, atol=1e-12)

    def test_centre_kernel_gradients(self):
        rng = np.random.default_rng(12)
        x = t64(rng.standard_normal((2, 3, 5, 5)))
        w, a = t64(rng.standard_normal((2, 3, 3, 3))), t64(rng.standard_normal((2, 3, 1, 1)))
        b, ab = t64(rng.standard_normal(2)), t64(rng.standard_normal(2))

        def fn(x, w, b, a, ab):
            return weighted_sum(conv2d(x, w, b, 2, 1, center=a, center_bias=ab))

        assert grad_check(fn, [x, w, b, a, ab]) < 1e-4

    def test_centre_kernel_shape_checked(self):
        with pytest.raises(DimensionError):
            conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 2, 3, 3))), center=Tensor(np.ones((3, 2, 3, 3))))
        with pytest.raises(DimensionError):
            conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 2, 2, 2))), center=Tensor(np.ones((3, 2, 1, 1))))

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_rank_mismatch(self):
        with pytest.raises(DimensionError):
            conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 2, 3, 3))))

    def test_non_finite_input(self):
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 1, 1] = np.nan
        with pytest.raises(NumericError):
            conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))

    def test_frozen_weight_gets_no_grad(self):
        x = Tensor(np.ones((1, 1, 3, 3)), requires_grad=True)
        w = Tensor(np.ones((1, 1, 3, 3)))
        backward(tsum(conv2d(x, w, pad=1)))
        assert w.grad is None
        assert x.grad is not None


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_subgradient_zero_at_zero(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
        backward(tsum(relu(x)))
        np.testing.assert_array_equal(x.grad, [0, 0, 1])

    @given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e6, 1e6)))
    def test_non_negative(self, a):
        assert (relu(Tensor(a)).data >= 0).all()


class TestBatchNorm:
    def _params(self, c):
        return Tensor(np.ones(c)), Tensor(np.zeros(c)), np.zeros(c), np.ones(c)

    def test_two_value_batch(self):
        g, b, rm, rv = self._params(1)
        x = Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1, 1))
        out = batchnorm(x, g, b, rm, rv, training=True)
        expected = 1.0 / math.sqrt(1.0 + 1e-5)
        np.testing.assert_allclose(out.data.ravel(), [-expected, expected], rtol=1e-12)
        assert abs(expected - 0.999995) < 1e-6

    def test_running_update(self):
        g, b, rm, rv = self._params(1)
        x = Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1, 1))
        batchnorm(x, g, b, rm, rv, training=True)
        np.testing.assert_allclose(rm, [0.2])  # 0.9*0 + 0.1*2
        np.testing.assert_allclose(rv, [1.0])  # 0.9*1 + 0.1*1 (biased variance)

    def test_train_output_standardized(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((8, 3, 5, 5)) * 4 + 7)
        g, b, rm, rv = self._params(3)
        out = batchnorm(x, g, b, rm, rv, training=True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-5)

    def test_eval_is_affine_map_of_stored_stats(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 2, 3, 3))
        gamma, beta = np.array([1.5, -0.5]), np.array([0.1, 2.0])
        rm, rv = np.array([0.3, -1.0]), np.array([2.0, 0.5])
        out = batchnorm(Tensor(x), Tensor(gamma), Tensor(beta), rm.copy(), rv.copy(), training=False).data
        ref = (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5) * gamma[None, :, None, None] + beta[None, :, None, None]
        np.testing.assert_allclose(out, ref, rtol=1e-12)

    def test_eval_before_training_uses_initial_stats(self):
        x = np.random.default_rng(2).standard_normal((2, 1, 2, 2))
        g, b, rm, rv = self._params(1)
        out = batchnorm(Tensor(x), g, b, rm, rv, training=False).data
        np.testing.assert_allclose(out, x / math.sqrt(1 + 1e-5))

    def test_eval_leaves_stats_untouched(self):
        g, b, rm, rv = self._params(2)
        batchnorm(Tensor(np.ones((2, 2, 2, 2))), g, b, rm, rv, training=False)
        np.testing.assert_array_equal(rm, 0)
        np.testing.assert_array_equal(rv, 1)

    def test_zero_variance_is_finite(self):
        g, b, rm, rv = self._params(1)
        out = batchnorm(Tensor(np.full((4, 1, 2, 2), 5.0)), g, b, rm, rv, training=True)
        np.testing.assert_array_equal(out.data, 0)

    @pytest.mark.parametrize("training", [True, False])
    def test_gradients(self, training):
        rng = np.random.default_rng(4)
        x = t64(rng.standard_normal((3, 2, 3, 3)))
        gamma, beta = t64(rng.standard_normal(2) + 1), t64(rng.standard_normal(2))
        rm, rv = np.array([0.1, -0.2]), np.array([1.3, 0.7])

        def fn(x, gamma, beta):
            return weighted_sum(batchnorm(x, gamma, beta, rm.copy(), rv.copy(), training))

        assert grad_check(fn, [x, gamma, beta]) < 1e-4

    def test_single_value_per_channel_rejected(self):
        g, b, rm, rv = self._params(1)
        with pytest.raises(DimensionError):
            batchnorm(Tensor(np.ones((1, 1, 1, 1))), g, b, rm, rv, training=True)


class TestLinear:
    def test_identity(self):
        out = linear(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor(np.zeros(2)))
        np.testing.assert_array_equal(out.data, [[1, 2]])

    def test_arithmetic(self):
        out = linear(Tensor([[1.0, 2.0]]), Tensor([[1.0, 0.0], [1.0, 1.0]]), Tensor([1.0, 1.0]))
        np.testing.assert_array_equal(out.data, [[4, 3]])

    def test_gradients(self):
        rng = np.random.default_rng(5)
        x, w, b = t64(rng.standard_normal((4, 3))), t64(rng.standard_normal((3, 5))), t64(rng.standard_normal(5))
        assert grad_check(lambda x, w, b: weighted_sum(linear(x, w, b)), [x, w, b]) < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


class TestGlobalAvgPool:
    def test_mean(self):
        out = global_avg_pool(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
        assert out.data.item() == 2.5

    def test_constant(self):
        np.testing.assert_array_equal(global_avg_pool(Tensor(np.full((2, 3, 4, 4), 7.0))).data, 7.0)

    def test_gradient_is_uniform(self):
        x = Tensor(np.ones((1, 1, 2, 4)), requires_grad=True)
        backward(tsum(global_avg_pool(x)))
        np.testing.assert_allclose(x.grad, 1 / 8)

    def test_finite_differences(self):
        x = t64(np.random.default_rng(6).standard_normal((2, 3, 3, 2)))
        assert grad_check(lambda x: weighted_sum(global_avg_pool(x)), [x]) < 1e-4


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss = softmax_cross_entropy(Tensor(np.zeros((1, 10))), [3])
        assert loss.item() == pytest.approx(math.log(10), abs=1e-6)

    def test_confident_correct(self):
        z = np.zeros((1, 5))
        z[0, 2] = 1000
        assert softmax_cross_entropy(Tensor(z), [2]).item() < 1e-6

    def test_gradient_closed_form(self):
        rng = np.random.default_rng(8)
        z = rng.standard_normal((4, 6))
        y = np.array([0, 5, 2, 2])
        logits = Tensor(z.copy(), requires_grad=True)
        backward(softmax_cross_entropy(logits, y))
        ref = (softmax(z) - np.eye(6)[y]) / 4
        np.testing.assert_allclose(logits.grad, ref, atol=1e-6)

    def test_finite_differences(self):
        z = t64(np.random.default_rng(9).standard_normal((3, 4)))
        assert grad_check(lambda z: softmax_cross_entropy(z, [1, 0, 3]), [z]) < 1e-4

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)), st.lists(st.integers(0, 3), min_size=3, max_size=3))
    def test_non_negative_and_finite(self, z, y):
        loss = softmax_cross_entropy(Tensor(z), y).item()
        assert loss >= 0 and math.isfinite(loss)


class TestBackward:
    def test_sum(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        backward(tsum(x))
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_conv_relu_reaches_both_leaves(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
        backward(tsum(relu(conv2d(x, w, pad=1))))
        assert x.grad is not None and np.isfinite(x.grad).all()
        assert w.grad is not None and np.isfinite(w.grad).all()

    def test_two_layer_net(self):
        rng = np.random.default_rng(10)
        x = t64(rng.standard_normal((2, 2, 5, 5)), grad=False)
        w1, w2 = t64(rng.standard_normal((3, 2, 3, 3))), t64(rng.standard_normal((3, 4)))
        b2 = t64(rng.standard_normal(4))

        def fn(w1, w2, b2):
            h = global_avg_pool(relu(conv2d(x, w1, None, 2, 1)))
            return softmax_cross_entropy(linear(h, w2, b2), [1, 3])

        assert grad_check(fn, [w1, w2, b2]) < 1e-4

    def test_accumulates_without_zeroing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        backward(tsum(x))
        backward(tsum(x))
        np.testing.assert_array_equal(x.grad, [2, 2])

    def test_shared_subexpression(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        backward(tsum(x * x))
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_unreached_leaf_untouched(self):
        x = Tensor(np.ones(2), requires_grad=True)
        y = Tensor(np.ones(2), requires_grad=True)
        backward(tsum(x))
        assert y.grad is None

    def test_non_scalar_rejected(self):
        with pytest.raises(DimensionError):
            backward(Tensor(np.ones(2), requires_grad=True))

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = tsum(x)
        assert not y.requires_grad and y.is_leaf

    def test_non_float_input_defaults_to_float32(self):
        assert Tensor([1, 2]).dtype == np.float32


class TestSGD:
    def _step(self, lr, wd, mom, grads):
        w = Tensor(np.array([1.0]), requires_grad=True)
        state = OptimState(lr=lr, momentum=mom, weight_decay=wd)
        for g in grads:
            w.grad = np.array([g])
            sgd_step([w], state)
        return w.data[0]

    def test_plain(self):
        assert self._step(0.1, 0.0, 0.0, [1.0]) == pytest.approx(0.9)

    def test_weight_decay(self):
        assert self._step(0.1, 0.1, 0.0, [1.0]) == pytest.approx(0.89)

    def test_momentum_two_steps(self):
        assert self._step(0.1, 0.0, 0.9, [1.0, 1.0]) == pytest.approx(0.71)

    def test_clears_grad_and_skips_missing(self):
        a = Tensor(np.array([1.0]), requires_grad=True)
        b = Tensor(np.array([1.0]), requires_grad=True)
        a.grad = np.array([1.0])
        sgd_step([a, b], OptimState(lr=1.0))
        assert a.grad is None and a.data[0] == 0.0 and b.data[0] == 1.0


class TestGradCheck:
    def test_square(self):
        x = t64([1.0, 2.0])
        assert grad_check(lambda x: tsum(x * x), [x]) < 1e-8

    def test_constant(self):
        x = t64([1.0, 2.0])
        assert grad_check(lambda x: tsum(Tensor(np.ones(2))), [x]) == 0.0

    def test_detects_wrong_gradient(self):
        from amdl.tensor import _make

        def bad_square(x):
            return _make(np.asarray((x.data**2).sum()), (x,), lambda g: (g * 3 * x.data,), "bad")

        with pytest.raises(GradCheckError):
            grad_check(bad_square, [t64([1.0, 2.0])], tol=1e-4)

    def test_requires_float64(self):
        with pytest.raises(TypeError):
            grad_check(lambda x: tsum(x), [Tensor(np.ones(2, dtype=np.float32), requires_grad=True)])

    def test_non_scalar_rejected(self):
        with pytest.raises(DimensionError):
            grad_check(lambda x: x * x, [t64([1.0, 2.0])])
