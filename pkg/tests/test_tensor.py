import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cxrcam import tensor as T
from oracles import (bilinear_loops, conv2d_loops, dense_loops, depthwise_separable_loops,
                     gap_loops, maxpool_loops)

N_SHAPES = 50


def random_conv_case(rng):
    n = int(rng.integers(1, 3))
    cin = int(rng.integers(1, 4))
    cout = int(rng.integers(1, 4))
    kh, kw = (int(v) for v in rng.integers(1, 4, size=2))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    h = int(rng.integers(max(kh - 2 * padding, 1), 8))
    w = int(rng.integers(max(kw - 2 * padding, 1), 8))
    x = rng.standard_normal((n, cin, h, w)).astype(np.float32)
    k = rng.standard_normal((cout, cin, kh, kw)).astype(np.float32)
    b = rng.standard_normal(cout).astype(np.float32)
    return x, k, b, stride, padding


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).standard_normal((2, 1, 5, 6)).astype(np.float32)
        k = np.zeros((1, 1, 3, 3), np.float32)
        k[0, 0, 1, 1] = 1
        np.testing.assert_array_equal(T.conv2d(x, k, np.zeros(1, np.float32), 1, 1), x)

    def test_zero_kernel(self):
        x = np.random.default_rng(1).standard_normal((1, 3, 4, 4)).astype(np.float32)
        out = T.conv2d(x, np.zeros((2, 3, 3, 3), np.float32), np.zeros(2, np.float32))
        assert out.shape == (1, 2, 2, 2)
        assert not out.any()

    def test_documented_small_case(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 2, 4, 4))
        k = rng.standard_normal((3, 2, 3, 3))
        b = np.zeros(3)
        np.testing.assert_allclose(T.conv2d(x, k, b), conv2d_loops(x, k, b), atol=1e-6)

    @pytest.mark.parametrize("case", range(N_SHAPES))
    def test_matches_loop_oracle(self, case):
        x, k, b, stride, padding = random_conv_case(np.random.default_rng(100 + case))
        got = T.conv2d(x, k, b, stride, padding)
        want = conv2d_loops(x, k, b, stride, padding)
        assert got.shape == want.shape
        assert got.shape[2] == T.conv_output_size(x.shape[2], k.shape[2], stride, padding)
        np.testing.assert_allclose(got, want, atol=1e-5, rtol=1e-6)

    def test_channel_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))

    def test_kernel_larger_than_input(self):
        with pytest.raises(T.ShapeError):
            T.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1))

    @settings(max_examples=30, deadline=None)
    @given(a=st.floats(-10, 10), seed=st.integers(0, 2**16))
    def test_linearity(self, a, seed):
        x, k, _, stride, padding = random_conv_case(np.random.default_rng(seed))
        zero = np.zeros(k.shape[0])
        x, k = x.astype(np.float64), k.astype(np.float64)
        np.testing.assert_allclose(T.conv2d(a * x, k, zero, stride, padding),
                                   a * T.conv2d(x, k, zero, stride, padding), atol=1e-5)


class TestDepthwiseSeparable:
    def test_identity(self):
        x = np.random.default_rng(3).standard_normal((2, 3, 5, 5)).astype(np.float32)
        dk = np.zeros((3, 1, 3, 3), np.float32)
        dk[:, 0, 1, 1] = 1
        pk = np.eye(3, dtype=np.float32)[:, :, None, None]
        out = T.depthwise_separable_conv(x, dk, pk, np.zeros(3, np.float32), 1, 1)
        np.testing.assert_array_equal(out, x)

    def test_equals_two_stage_conv(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 3, 6, 6))
        dk = rng.standard_normal((3, 1, 3, 3))
        pk = rng.standard_normal((4, 3, 1, 1))
        b = rng.standard_normal(4)
        mid = np.concatenate([T.conv2d(x[:, c:c + 1], dk[c:c + 1], np.zeros(1), 2, 1)
                              for c in range(3)], axis=1)
        want = T.conv2d(mid, pk, b)
        np.testing.assert_allclose(T.depthwise_separable_conv(x, dk, pk, b, 2, 1), want, atol=1e-12)

    @pytest.mark.parametrize("case", range(N_SHAPES))
    def test_matches_loop_oracle(self, case):
        rng = np.random.default_rng(200 + case)
        x, k, b, stride, padding = random_conv_case(rng)
        cin = x.shape[1]
        dk = rng.standard_normal((cin, 1) + k.shape[2:]).astype(np.float32)
        pk = rng.standard_normal((k.shape[0], cin, 1, 1)).astype(np.float32)
        got = T.depthwise_separable_conv(x, dk, pk, b, stride, padding)
        np.testing.assert_allclose(got, depthwise_separable_loops(x, dk, pk, b, stride, padding),
                                   atol=1e-5, rtol=1e-6)

    def test_channel_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.depthwise_separable_conv(np.zeros((1, 2, 4, 4)), np.zeros((2, 1, 3, 3)),
                                       np.zeros((1, 3, 1, 1)), np.zeros(1))


class TestMaxpool:
    def test_two_by_two(self):
        out, _ = T.maxpool2d(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2)
        np.testing.assert_array_equal(out, [[[[4.0]]]])

    def test_constant(self):
        out, _ = T.maxpool2d(np.full((1, 2, 6, 6), 3.5), 2, 2)
        assert np.all(out == 3.5)

    @pytest.mark.parametrize("case", range(N_SHAPES))
    def test_matches_loop_oracle(self, case):
        rng = np.random.default_rng(300 + case)
        window = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 4)),
                                 int(rng.integers(window, 9)), int(rng.integers(window, 9))))
        got, _ = T.maxpool2d(x.astype(np.float32), window, stride)
        np.testing.assert_allclose(got, maxpool_loops(x.astype(np.float32), window, stride), atol=1e-6)

    def test_window_too_large(self):
        with pytest.raises(T.ShapeError):
            T.maxpool2d(np.zeros((1, 1, 2, 2)), 3, 1)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**16))
    def test_dominates_any_window_element(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 2, 6, 6))
        out, _ = T.maxpool2d(x, 2, 2)
        for i, j in np.ndindex(2, 2):
            assert np.all(out >= x[:, :, i::2, j::2])


class TestGlobalAvgPool:
    def test_constant(self):
        np.testing.assert_allclose(T.global_avg_pool(np.full((2, 3, 4, 5), 1.25)), np.full((2, 3), 1.25))

    def test_arithmetic_mean(self):
        assert T.global_avg_pool(np.array([[[[0.0, 1.0], [2.0, 3.0]]]]))[0, 0] == 1.5

    @pytest.mark.parametrize("case", range(N_SHAPES))
    def test_matches_loop_oracle(self, case):
        rng = np.random.default_rng(400 + case)
        x = rng.standard_normal(tuple(int(v) for v in rng.integers(1, 7, size=4))).astype(np.float32)
        np.testing.assert_allclose(T.global_avg_pool(x), gap_loops(x), atol=1e-6)


class TestDense:
    def test_identity(self):
        x = np.random.default_rng(5).standard_normal((3, 4))
        np.testing.assert_array_equal(T.dense(x, np.eye(4), np.zeros(4)), x)

    def test_zero_weight_gives_bias(self):
        b = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(T.dense(np.ones((2, 5)), np.zeros((5, 3)), b), np.tile(b, (2, 1)))

    @pytest.mark.parametrize("case", range(N_SHAPES))
    def test_matches_loop_oracle(self, case):
        rng = np.random.default_rng(500 + case)
        n, d, m = (int(v) for v in rng.integers(1, 9, size=3))
        x = rng.standard_normal((n, d)).astype(np.float32)
        w = rng.standard_normal((d, m)).astype(np.float32)
        b = rng.standard_normal(m).astype(np.float32)
        np.testing.assert_allclose(T.dense(x, w, b), dense_loops(x, w, b), atol=1e-5, rtol=1e-6)

    def test_inner_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.dense(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(2))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax_rows(np.zeros((1, 4))), [[0.25] * 4], atol=1e-12)

    def test_known_values(self):
        # high-precision oracle via math.fsum on the exact exponentials
        z = [1.0, 2.0, 3.0, 4.0]
        total = math.fsum(math.exp(v) for v in z)
        want = [math.exp(v) / total for v in z]
        np.testing.assert_allclose(T.softmax_rows(np.array([z]))[0], want, rtol=1e-12)

    def test_large_logits_stay_finite(self):
        p = T.softmax_rows(np.array([[1000.0, 1000.0, -1000.0]]))
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p, [[0.5, 0.5, 0.0]])

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**16), shift=st.floats(-50, 50))
    def test_rows_sum_to_one_and_shift_invariant(self, seed, shift):
        z = np.random.default_rng(seed).normal(0, 5, size=(3, 4)).astype(np.float32)
        p = T.softmax_rows(z)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(T.softmax_rows(z + np.float32(shift)), p, atol=1e-6)


class TestBilinearResize:
    def test_same_size_is_identity(self):
        img = np.random.default_rng(6).standard_normal((2, 5, 7)).astype(np.float32)
        np.testing.assert_allclose(T.bilinear_resize(img, 5, 7), img, atol=1e-6)

    def test_constant(self):
        out = T.bilinear_resize(np.full((1, 3, 3), 0.7), 11, 5)
        np.testing.assert_allclose(out, 0.7, atol=1e-12)

    def test_two_to_four_closed_form(self):
        # Half-pixel centres: output coordinates map to source -0.25, 0.25, 0.75, 1.25,
        # clamped to [0, 1], so each axis interpolates with weights 0, .25, .75, 1.
        img = np.array([[[0.0, 1.0], [2.0, 3.0]]])
        t = np.array([0.0, 0.25, 0.75, 1.0])
        want = 2 * t[:, None] + t[None, :]
        np.testing.assert_allclose(T.bilinear_resize(img, 4, 4)[0], want, atol=1e-12)

    @pytest.mark.parametrize("case", range(N_SHAPES))
    def test_matches_loop_oracle(self, case):
        rng = np.random.default_rng(600 + case)
        img = rng.standard_normal((int(rng.integers(1, 3)),) + tuple(
            int(v) for v in rng.integers(1, 8, size=2))).astype(np.float32)
        oh, ow = (int(v) for v in rng.integers(1, 12, size=2))
        np.testing.assert_allclose(T.bilinear_resize(img, oh, ow), bilinear_loops(img, oh, ow), atol=1e-6)

    def test_zero_target(self):
        with pytest.raises(ValueError):
            T.bilinear_resize(np.zeros((1, 2, 2)), 0, 3)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**16), oh=st.integers(1, 20), ow=st.integers(1, 20))
    def test_preserves_bounds(self, seed, oh, ow):
        img = np.random.default_rng(seed).standard_normal((1, 4, 6))
        out = T.bilinear_resize(img, oh, ow)
        assert out.min() >= img.min() - 1e-6
        assert out.max() <= img.max() + 1e-6


class TestTensorContainer:
    def test_as_tensor_default_dtype(self):
        t = T.as_tensor([[1, 2], [3, 4]])
        assert t.dtype == np.float32
        assert t.size == 4

    @pytest.mark.parametrize("shape", [(), (1, 1, 1, 1, 1), (0, 3)])
    def test_rejects_bad_shapes(self, shape):
        with pytest.raises(T.ShapeError):
            T.as_tensor(np.zeros(shape))

    def test_finite_inputs_give_finite_outputs(self):
        rng = np.random.default_rng(7)
        x = rng.normal(0, 100, (2, 3, 8, 8)).astype(np.float32)
        k = rng.normal(0, 10, (4, 3, 3, 3)).astype(np.float32)
        out = T.conv2d(x, k, np.zeros(4, np.float32), 1, 1)
        pooled, _ = T.maxpool2d(out, 2, 2)
        logits = T.dense(T.global_avg_pool(pooled), rng.standard_normal((4, 4)).astype(np.float32),
                         np.zeros(4, np.float32))
        assert np.all(np.isfinite(T.softmax_rows(logits)))
