import numpy as np
import pytest

from errors import NonFiniteError, ParameterError, PreconditionError, ShapeError
from gradcheck import numeric_grad, relative_error
from tensor_nn import (AdamState, ConvParams, adam_step, conv2d_grad, conv2d_same, init_adam_state, maxpool2,
                       maxpool2_grad, mse_loss, relu, relu_grad, sigmoid, sigmoid_grad, upsample2_grad,
                       upsample2_nearest)


def naive_conv(x, weights, bias):
    n, c_in, h, w = x.shape
    c_out = weights.shape[0]
    padded = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, c_out, h, w))
    for b in range(n):
        for o in range(c_out):
            for i in range(h):
                for j in range(w):
                    out[b, o, i, j] = np.sum(padded[b, :, i:i + 3, j:j + 3] * weights[o]) + bias[o]
    return out


def random_params(rng, c_out, c_in, dtype=np.float64):
    return ConvParams(weights=rng.standard_normal((c_out, c_in, 3, 3)).astype(dtype),
                      bias=rng.standard_normal(c_out).astype(dtype))


class TestConvolution:
    def test_matches_direct_convolution_on_random_shapes(self, rng):
        for _ in range(100):
            n, c_in, c_out = rng.integers(1, 3), rng.integers(1, 5), rng.integers(1, 5)
            h, w = rng.integers(1, 7), rng.integers(1, 7)
            x = rng.standard_normal((n, c_in, h, w)).astype(np.float32)
            params = random_params(rng, c_out, c_in, np.float32)
            out = conv2d_same(x, params)
            assert out.shape == (n, c_out, h, w)
            assert out.dtype == np.float32
            # float32: hasta 36 productos de N(0, 1) acumulados, el error queda en ~1e-5; 1e-6 se exige en 64 bits
            np.testing.assert_allclose(out, naive_conv(x, params.weights, params.bias), rtol=1e-5, atol=1e-5)

    def test_matches_direct_convolution_in_64_bits(self, rng):
        x = rng.standard_normal((2, 3, 8, 8))
        params = random_params(rng, 4, 3)
        out = conv2d_same(x, params)
        assert out.dtype == np.float64
        np.testing.assert_allclose(out, naive_conv(x, params.weights, params.bias), rtol=0, atol=1e-12)

    def test_image_range_input_in_32_bits(self, rng):
        x = rng.uniform(0, 1, size=(2, 3, 8, 8)).astype(np.float32)
        params = ConvParams(weights=rng.uniform(-0.1, 0.1, size=(4, 3, 3, 3)).astype(np.float32),
                            bias=rng.uniform(-0.1, 0.1, size=4).astype(np.float32))
        np.testing.assert_allclose(conv2d_same(x, params), naive_conv(x, params.weights, params.bias),
                                   rtol=0, atol=1e-6)

    def test_all_ones_kernel_counts_neighbours(self):
        x = np.ones((1, 1, 3, 3))
        params = ConvParams(weights=np.ones((1, 1, 3, 3)), bias=np.zeros(1))
        expected = np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]], dtype=np.float64)
        np.testing.assert_array_equal(conv2d_same(x, params)[0, 0], expected)

    def test_rejects_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            conv2d_same(np.zeros((1, 2, 4, 4)), random_params(rng, 3, 3))
        with pytest.raises(ShapeError):
            ConvParams(weights=np.zeros((2, 1, 3, 3)), bias=np.zeros(3))

    def test_gradients_match_finite_differences(self, rng):
        x = rng.standard_normal((2, 3, 5, 4))
        params = random_params(rng, 2, 3)
        upstream = rng.standard_normal((2, 2, 5, 4))

        def loss():
            return float(np.sum(upstream * conv2d_same(x, params)))

        d_input, d_params = conv2d_grad(x, params, upstream)
        assert relative_error(d_input, numeric_grad(loss, x)) < 1e-6
        assert relative_error(d_params.weights, numeric_grad(loss, params.weights)) < 1e-6
        assert relative_error(d_params.bias, numeric_grad(loss, params.bias)) < 1e-6

    def test_grad_rejects_wrong_upstream_shape(self, rng):
        with pytest.raises(ShapeError):
            conv2d_grad(np.zeros((1, 3, 4, 4)), random_params(rng, 2, 3), np.zeros((1, 2, 2, 2)))


class TestActivations:
    def test_relu_gradient(self, rng):
        x = rng.uniform(0.1, 1.0, size=(2, 3, 4, 4)) * rng.choice([-1.0, 1.0], size=(2, 3, 4, 4))
        upstream = rng.standard_normal(x.shape)
        _, mask = relu(x)
        analytic = relu_grad(upstream, mask)
        numeric = numeric_grad(lambda: float(np.sum(upstream * relu(x)[0])), x)
        assert relative_error(analytic, numeric) < 1e-6

    def test_relu_zeroes_negatives(self):
        out, mask = relu(np.array([[[[-1.0, 0.0, 2.0]]]]))
        np.testing.assert_array_equal(out, [[[[0.0, 0.0, 2.0]]]])
        np.testing.assert_array_equal(mask, [[[[False, False, True]]]])

    def test_sigmoid_is_stable_for_large_inputs(self):
        with np.errstate(over='raise'):
            out = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])

    def test_sigmoid_gradient(self, rng):
        x = rng.standard_normal((1, 2, 3, 3)) * 3
        upstream = rng.standard_normal(x.shape)
        analytic = sigmoid_grad(upstream, sigmoid(x))
        numeric = numeric_grad(lambda: float(np.sum(upstream * sigmoid(x))), x)
        assert relative_error(analytic, numeric) < 1e-6


class TestPooling:
    def test_odd_dimensions_rejected(self):
        with pytest.raises(PreconditionError):
            maxpool2(np.zeros((1, 1, 3, 4)))

    def test_ties_route_gradient_to_first_element(self):
        x = np.ones((1, 1, 2, 2))
        out, argmax = maxpool2(x)
        assert argmax[0, 0, 0, 0] == 0
        grad = maxpool2_grad(np.full_like(out, 5.0), argmax)
        np.testing.assert_array_equal(grad[0, 0], [[5.0, 0.0], [0.0, 0.0]])

    def test_maxpool_values(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        out, _ = maxpool2(x)
        np.testing.assert_array_equal(out[0, 0], [[5, 7], [13, 15]])

    def test_maxpool_matches_blockwise_max(self, rng):
        x = rng.standard_normal((2, 3, 6, 6))
        out, _ = maxpool2(x)
        expected = np.empty((2, 3, 3, 3))
        for i in range(3):
            for j in range(3):
                expected[:, :, i, j] = x[:, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max(axis=(2, 3))
        np.testing.assert_array_equal(out, expected)

    def test_maxpool_gradient(self, rng):
        size = 2 * 3 * 4 * 6
        x = (rng.permutation(size) * 0.1).reshape(2, 3, 4, 6).astype(np.float64)
        upstream = rng.standard_normal((2, 3, 2, 3))
        _, argmax = maxpool2(x)
        analytic = maxpool2_grad(upstream, argmax)
        numeric = numeric_grad(lambda: float(np.sum(upstream * maxpool2(x)[0])), x)
        assert relative_error(analytic, numeric) < 1e-6

    def test_upsample_replicates_blocks(self):
        x = np.array([[[[1.0, 2.0]]]])
        np.testing.assert_array_equal(upsample2_nearest(x)[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2]])

    def test_upsample_gradient(self, rng):
        x = rng.standard_normal((2, 2, 3, 2))
        upstream = rng.standard_normal((2, 2, 6, 4))
        numeric = numeric_grad(lambda: float(np.sum(upstream * upsample2_nearest(x))), x)
        assert relative_error(upsample2_grad(upstream), numeric) < 1e-6


class TestLoss:
    def test_mean_reduction_value(self):
        loss, grad = mse_loss(np.array([[[[1.0, 3.0]]]]), np.array([[[[0.0, 1.0]]]]))
        assert loss == pytest.approx(2.5)
        np.testing.assert_allclose(grad, [[[[1.0, 2.0]]]])

    def test_batch_reduction_scales_by_elements_per_item(self, rng):
        pred = rng.uniform(size=(4, 3, 2, 2))
        target = rng.uniform(size=(4, 3, 2, 2))
        mean_loss, _ = mse_loss(pred, target, reduction="mean")
        batch_loss, _ = mse_loss(pred, target, reduction="batch")
        assert batch_loss == pytest.approx(mean_loss * 12)

    def test_gradient(self, rng):
        pred = rng.uniform(size=(2, 3, 2, 2))
        target = rng.uniform(size=(2, 3, 2, 2))
        for reduction in ("mean", "batch"):
            _, analytic = mse_loss(pred, target, reduction=reduction)
            numeric = numeric_grad(lambda: mse_loss(pred, target, reduction=reduction)[0], pred)
            assert relative_error(analytic, numeric) < 1e-6

    def test_invalid_arguments(self):
        with pytest.raises(ShapeError):
            mse_loss(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))
        with pytest.raises(ParameterError):
            mse_loss(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 2)), reduction="sum")


def reference_adam(param, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    m = np.zeros_like(param)
    v = np.zeros_like(param)
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        param = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return param


class TestAdam:
    def test_first_step_moves_by_learning_rate(self, rng):
        param = rng.standard_normal(10)
        grad = rng.standard_normal(10)
        new_param, state = adam_step(param, grad, init_adam_state(param), lr=0.01)
        np.testing.assert_allclose(new_param, param - 0.01 * np.sign(grad), atol=1e-6)
        assert state.t == 1

    def test_matches_reference_over_several_steps(self, rng):
        param = rng.standard_normal((3, 4))
        grads = [rng.standard_normal((3, 4)) for _ in range(6)]
        state = init_adam_state(param)
        current = param
        for g in grads:
            current, state = adam_step(current, g, state, lr=0.003)
        np.testing.assert_allclose(current, reference_adam(param, grads, 0.003), rtol=1e-12, atol=1e-12)
        assert state.t == 6

    def test_does_not_mutate_inputs(self, rng):
        param = rng.standard_normal(5)
        grad = rng.standard_normal(5)
        state = init_adam_state(param)
        before = (param.copy(), state.m.copy(), state.v.copy())
        adam_step(param, grad, state, lr=0.1)
        np.testing.assert_array_equal(param, before[0])
        np.testing.assert_array_equal(state.m, before[1])
        np.testing.assert_array_equal(state.v, before[2])
        assert state.t == 0

    def test_minimizes_quadratic(self):
        param = np.array([5.0, -3.0])
        state = init_adam_state(param)
        for _ in range(3000):
            param, state = adam_step(param, 2 * param, state, lr=0.01)
        np.testing.assert_allclose(param, [0.0, 0.0], atol=1e-2)

    def test_non_finite_gradient_raises(self):
        param = np.zeros(3)
        with pytest.raises(NonFiniteError, match="enc_conv.weight"):
            adam_step(param, np.array([0.0, np.nan, 1.0]), init_adam_state(param), lr=0.1,
                      name="enc_conv.weight")

    def test_shape_mismatch_raises(self):
        param = np.zeros(3)
        with pytest.raises(ShapeError):
            adam_step(param, np.zeros(4), init_adam_state(param), lr=0.1)
        with pytest.raises(ShapeError):
            adam_step(param, np.zeros(3), AdamState(m=np.zeros(2), v=np.zeros(3)), lr=0.1)
