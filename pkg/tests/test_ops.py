"""Forward-path tests for the layer primitives, checked against naive oracles."""
import numpy as np
import pytest

from medbox import ops
from medbox.errors import MissingContext, NonFiniteError, ShapeMismatch
from medbox.ops import (
    BNState,
    batchnorm_forward,
    concat_channels,
    conv2d_forward,
    gap_forward,
    linear_forward,
    pool2d_forward,
    relu_forward,
)

from oracles import conv2d_loops, matmul_loops, pool2d_loops


class TestConv2d:
    def test_scalar_product(self):
        x = np.full((1, 1, 1, 1), 3.0, dtype=np.float32)
        w = np.full((1, 1, 1, 1), 2.0, dtype=np.float32)
        out, _ = conv2d_forward(x, w)
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 6.0

    def test_all_ones_sum(self):
        x = np.ones((1, 1, 3, 3), dtype=np.float32)
        w = np.ones((1, 1, 3, 3), dtype=np.float32)
        out, _ = conv2d_forward(x, w)
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 9.0

    def test_matches_loop_oracle_strided_padded(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        out, _ = conv2d_forward(x, w, stride=2, padding=1)
        assert out.shape == (1, 3, 2, 2)
        ref = conv2d_loops(x.astype(np.float64), w.astype(np.float64), stride=2, padding=1)
        np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)

    @pytest.mark.parametrize("stride,padding,kh", [(1, 0, 3), (2, 1, 3), (1, 2, 5), (3, 0, 1)])
    def test_matches_loop_oracle_configs(self, stride, padding, kh):
        rng = np.random.default_rng(stride * 100 + padding * 10 + kh)
        x = rng.standard_normal((2, 3, 7, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, kh, kh)).astype(np.float32)
        out, _ = conv2d_forward(x, w, stride=stride, padding=padding)
        ref = conv2d_loops(x.astype(np.float64), w.astype(np.float64), stride, padding)
        np.testing.assert_allclose(out, ref, rtol=1e-4, atol=1e-4)

    def test_channel_mismatch_names_both_shapes(self):
        x = np.zeros((1, 2, 4, 4), dtype=np.float32)
        w = np.zeros((3, 5, 3, 3), dtype=np.float32)
        with pytest.raises(ShapeMismatch) as e:
            conv2d_forward(x, w)
        assert "(1, 2, 4, 4)" in str(e.value) and "(3, 5, 3, 3)" in str(e.value)

    def test_kernel_larger_than_padded_input(self):
        x = np.zeros((1, 1, 2, 2), dtype=np.float32)
        w = np.zeros((1, 1, 5, 5), dtype=np.float32)
        with pytest.raises(ShapeMismatch):
            conv2d_forward(x, w)

    def test_1x1_equals_per_pixel_linear(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 5, 4, 4)).astype(np.float32)
        w = rng.standard_normal((3, 5, 1, 1)).astype(np.float32)
        out, _ = conv2d_forward(x, w)
        x_rows = x.transpose(0, 2, 3, 1).reshape(-1, 5)
        lin, _ = linear_forward(x_rows, w.reshape(3, 5), np.zeros(3, dtype=np.float32))
        np.testing.assert_allclose(
            out, lin.reshape(2, 4, 4, 3).transpose(0, 3, 1, 2), rtol=1e-6, atol=1e-6
        )

    def test_non_finite_rejected(self):
        x = np.full((1, 1, 2, 2), np.inf, dtype=np.float32)
        w = np.ones((1, 1, 2, 2), dtype=np.float32)
        with pytest.raises(NonFiniteError):
            conv2d_forward(x, w)

    def test_deterministic_across_calls(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 4, 9, 9)).astype(np.float32)
        w = rng.standard_normal((6, 4, 3, 3)).astype(np.float32)
        a, _ = conv2d_forward(x, w, stride=2, padding=1)
        b, _ = conv2d_forward(x.copy(), w.copy(), stride=2, padding=1)
        assert np.array_equal(a, b)


class TestBatchNorm:
    def test_constant_channel_normalizes_to_zero(self):
        x = np.full((2, 1, 2, 2), 7.5, dtype=np.float32)
        g = np.ones(1, dtype=np.float32)
        b = np.zeros(1, dtype=np.float32)
        out, _ = batchnorm_forward(x, g, b, BNState(1), mode="train")
        np.testing.assert_allclose(out, 0.0, atol=1e-4)

    def test_zero_gamma_scale_annihilation(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 3, 2, 2)).astype(np.float32)
        g = np.zeros(3, dtype=np.float32)
        b = np.full(3, 5.0, dtype=np.float32)
        out, _ = batchnorm_forward(x, g, b, BNState(3), mode="train")
        np.testing.assert_allclose(out, 5.0)

    def test_hand_computed_normalization(self):
        # 2x1x2x2 fixed values; expected = (x - mean) / sqrt(var + 1e-5)
        x = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
                     dtype=np.float32).reshape(2, 1, 2, 2)
        mu = 4.5
        var = np.mean((np.arange(1.0, 9.0) - mu) ** 2)  # 5.25
        expected = ((x - mu) / np.sqrt(var + 1e-5)).astype(np.float32)
        g = np.ones(1, dtype=np.float32)
        b = np.zeros(1, dtype=np.float32)
        out, _ = batchnorm_forward(x, g, b, BNState(1), mode="train", epsilon=1e-5)
        np.testing.assert_allclose(out, expected, rtol=1e-5)

    def test_eval_uninitialized_errors(self):
        x = np.zeros((1, 2, 2, 2), dtype=np.float32)
        with pytest.raises(ValueError, match="uninitialized"):
            batchnorm_forward(x, np.ones(2, np.float32), np.zeros(2, np.float32),
                              BNState(2), mode="eval")

    def test_running_stats_drive_eval(self):
        rng = np.random.default_rng(5)
        state = BNState(2)
        g = np.ones(2, dtype=np.float32)
        b = np.zeros(2, dtype=np.float32)
        for _ in range(50):
            x = (rng.standard_normal((8, 2, 4, 4)) * 2.0 + 3.0).astype(np.float32)
            batchnorm_forward(x, g, b, state, mode="train")
        np.testing.assert_allclose(state.running_mean, 3.0, atol=0.3)
        np.testing.assert_allclose(state.running_var, 4.0, atol=0.8)
        out, _ = batchnorm_forward(
            np.full((1, 2, 1, 1), 3.0, dtype=np.float32), g, b, state, mode="eval"
        )
        np.testing.assert_allclose(out, 0.0, atol=0.2)


class TestRelu:
    def test_basic(self):
        x = np.array([-1.0, 0.0, 2.0], dtype=np.float32).reshape(1, 3, 1, 1)
        out, _ = relu_forward(x)
        np.testing.assert_array_equal(out.ravel(), [0.0, 0.0, 2.0])

    def test_all_negative(self):
        x = -np.abs(np.random.default_rng(1).standard_normal((2, 3, 4, 4))).astype(np.float32) - 0.1
        out, _ = relu_forward(x)
        assert (out == 0).all()

    def test_identity_on_nonnegative(self):
        x = np.abs(np.random.default_rng(2).standard_normal((2, 3, 4, 4))).astype(np.float32)
        out, _ = relu_forward(x)
        np.testing.assert_array_equal(out, x)


class TestPool2d:
    def test_average_mean_of_four(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32).reshape(1, 1, 2, 2)
        out, _ = pool2d_forward(x, "average", window=2, stride=2)
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == pytest.approx(2.5)

    def test_max_of_four(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32).reshape(1, 1, 2, 2)
        out, _ = pool2d_forward(x, "max", window=2, stride=2)
        assert out[0, 0, 0, 0] == 4.0

    @pytest.mark.parametrize("kind", ["max", "average"])
    def test_matches_loop_oracle(self, kind):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((1, 1, 4, 4)).astype(np.float32)
        out, _ = pool2d_forward(x, kind, window=2, stride=2)
        ref = pool2d_loops(x, kind, window=2, stride=2)
        np.testing.assert_allclose(out, ref, rtol=1e-6)

    @pytest.mark.parametrize("kind", ["max", "average"])
    @pytest.mark.parametrize("window,stride,padding", [(3, 2, 1), (2, 1, 0), (3, 3, 1)])
    def test_matches_loop_oracle_padded(self, kind, window, stride, padding):
        rng = np.random.default_rng(17)
        x = rng.standard_normal((2, 3, 7, 6)).astype(np.float32)
        out, _ = pool2d_forward(x, kind, window=window, stride=stride, padding=padding)
        ref = pool2d_loops(x, kind, window=window, stride=stride, padding=padding)
        np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-6)

    def test_window_too_large_errors(self):
        x = np.zeros((1, 1, 2, 2), dtype=np.float32)
        with pytest.raises(ShapeMismatch):
            pool2d_forward(x, "max", window=5, stride=1)

    def test_kinds_not_aliased(self):
        # witness input where avg-then-max differs from max-then-avg
        x = np.array([[0.0, 10.0, 0.0, 0.0],
                      [0.0, 0.0, 0.0, 0.0],
                      [1.0, 1.0, 1.0, 1.0],
                      [1.0, 1.0, 1.0, 1.0]], dtype=np.float32).reshape(1, 1, 4, 4)
        avg, _ = pool2d_forward(x, "average", window=2, stride=2)
        mx, _ = pool2d_forward(x, "max", window=2, stride=2)
        am = mx.max()
        assert avg.max() != am
        assert not np.array_equal(avg, mx)


class TestConcat:
    def test_order_preserved(self):
        a = np.zeros((1, 1, 2, 2), dtype=np.float32)
        b = np.ones((1, 1, 2, 2), dtype=np.float32)
        out, _ = concat_channels([a, b])
        assert out.shape == (1, 2, 2, 2)
        assert (out[:, 0] == 0).all() and (out[:, 1] == 1).all()

    def test_single_input_identity(self):
        a = np.random.default_rng(0).standard_normal((2, 3, 4, 4)).astype(np.float32)
        out, _ = concat_channels([a])
        np.testing.assert_array_equal(out, a)

    def test_slices_recoverable(self):
        rng = np.random.default_rng(21)
        parts = [rng.standard_normal((2, c, 3, 3)).astype(np.float32) for c in (3, 5, 7)]
        out, _ = concat_channels(parts)
        assert out.shape[1] == 15
        np.testing.assert_array_equal(out[:, 0:3], parts[0])
        np.testing.assert_array_equal(out[:, 3:8], parts[1])
        np.testing.assert_array_equal(out[:, 8:15], parts[2])

    def test_spatial_mismatch_names_index(self):
        a = np.zeros((1, 1, 2, 2), dtype=np.float32)
        b = np.zeros((1, 1, 3, 3), dtype=np.float32)
        with pytest.raises(ShapeMismatch, match="input 1"):
            concat_channels([a, b])


class TestLinear:
    def test_identity_weight(self):
        x = np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32)
        out, _ = linear_forward(x, np.eye(4, dtype=np.float32), np.zeros(4, np.float32))
        np.testing.assert_allclose(out, x, rtol=1e-6)

    def test_zero_weight_gives_bias_rows(self):
        x = np.random.default_rng(1).standard_normal((3, 4)).astype(np.float32)
        b = np.array([1.0, 2.0], dtype=np.float32)
        out, _ = linear_forward(x, np.zeros((2, 4), np.float32), b)
        for row in out:
            np.testing.assert_array_equal(row, b)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(42)
        x = rng.standard_normal((2, 3)).astype(np.float32)
        w = rng.standard_normal((4, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        out, _ = linear_forward(x, w, b)
        ref = matmul_loops(x.astype(np.float64), w.astype(np.float64), b.astype(np.float64))
        np.testing.assert_allclose(out, ref, rtol=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            linear_forward(np.zeros((2, 3), np.float32),
                           np.zeros((4, 5), np.float32), np.zeros(4, np.float32))


class TestGap:
    def test_mean_per_channel(self):
        x = np.arange(8, dtype=np.float32).reshape(1, 2, 2, 2)
        out, _ = gap_forward(x)
        np.testing.assert_allclose(out, [[1.5, 5.5]])


class TestContextHandling:
    def test_missing_context_raises(self):
        x = np.ones((1, 1, 2, 2), dtype=np.float32)
        _, ctx = conv2d_forward(x, np.ones((1, 1, 2, 2), np.float32), want_ctx=False)
        assert ctx is None
        with pytest.raises(MissingContext):
            ops.conv2d_backward(ctx, x)

    def test_relu_gate_semantics(self):
        x = np.array([-1.0, 2.0], dtype=np.float32)
        out, ctx = relu_forward(x, want_ctx=True)
        g = ctx.backward(np.ones_like(x))
        np.testing.assert_array_equal(g.input_grad, [0.0, 1.0])

    def test_linear_identity_weight_backward(self):
        x = np.random.default_rng(2).standard_normal((3, 4)).astype(np.float32)
        _, ctx = linear_forward(x, np.eye(4, dtype=np.float32),
                                np.zeros(4, np.float32), want_ctx=True)
        up = np.random.default_rng(3).standard_normal((3, 4)).astype(np.float32)
        g = ctx.backward(up)
        np.testing.assert_allclose(g.input_grad, up, rtol=1e-6)

    def test_concat_backward_splits_exactly(self):
        rng = np.random.default_rng(4)
        parts = [rng.standard_normal((2, c, 3, 3)).astype(np.float32) for c in (2, 3)]
        _, ctx = concat_channels(parts, want_ctx=True)
        up = rng.standard_normal((2, 5, 3, 3)).astype(np.float32)
        grads = ctx.backward(up)
        reassembled = np.concatenate(grads, axis=1)
        assert np.array_equal(reassembled, up)
