import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spotmatch import numerics as nm
from spotmatch.gradcheck import numerical_gradient, relative_error
from spotmatch.oracles import naive_conv

# 50-digit evaluations of exp(-20)
EXP_M20 = 2.0611536224385578e-09


finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


class TestSoftmax:
    def test_extended_precision(self):
        from spotmatch.oracles import check_softmax_precision

        assert check_softmax_precision(np.random.default_rng(0)).passed

    def test_large_logits_stay_finite(self):
        p = nm.softmax(np.array([[1000.0, 0.0, -1000.0]]))
        np.testing.assert_allclose(p, [[1.0, 0.0, 0.0]])

    def test_rows_rejects_nonfinite_and_wrong_rank(self):
        with pytest.raises(nm.NonFiniteError):
            nm.softmax_rows(np.array([[-np.inf, 0.0]]))
        with pytest.raises(ValueError):
            nm.softmax_rows(np.zeros(3))

    @given(arrays(float, (3, 5), elements=finite))
    def test_rows_sum_to_one(self, x):
        np.testing.assert_allclose(nm.softmax(x).sum(axis=-1), 1.0, rtol=1e-12)

    @given(arrays(float, (4, 6), elements=finite))
    def test_log_softmax_consistent(self, x):
        np.testing.assert_allclose(np.exp(nm.log_softmax(x)), nm.softmax(x), atol=1e-14)

    def test_backward(self, rng):
        x = rng.normal(size=(3, 5))
        w = rng.normal(size=(3, 5))
        y = nm.softmax(x)
        num = numerical_gradient(lambda: float(np.sum(nm.softmax(x) * w)), x)
        assert relative_error(nm.softmax_backward(w, y), num) < 1e-7

    def test_nonfinite_input_raises(self):
        with pytest.raises(nm.NonFiniteError):
            nm.check_finite(np.array([1.0, np.nan]))


class TestElu:
    def test_tail(self):
        v = nm.elu_feature_map(np.array([-20.0]))[0]
        assert v > 0
        assert abs(v - EXP_M20) <= 1e-8
        np.testing.assert_allclose(v, EXP_M20, rtol=1e-6)

    @given(arrays(float, 7, elements=finite))
    def test_strictly_positive(self, x):
        assert np.all(nm.elu_feature_map(x) > 0)

    def test_identity_part(self):
        np.testing.assert_array_equal(nm.elu_feature_map(np.array([0.0, 2.5])), [1.0, 3.5])

    def test_backward(self, rng):
        x = rng.normal(size=10) * 2
        w = rng.normal(size=10)
        num = numerical_gradient(lambda: float(np.sum(nm.elu_feature_map(x) * w)), x)
        assert relative_error(nm.elu_feature_map_backward(w, x), num) < 1e-7


class TestPositionalEncoding:
    def test_formula_at_one_one(self):
        pe = nm.positional_encoding(8, 4, 4)
        # w_0 = 1, w_1 = 10000 ** -0.25 = 0.1
        expected = [0.8414709848078965, 0.5403023058681398, 0.8414709848078965, 0.5403023058681398,
                    0.09983341664682815, 0.9950041652780258, 0.09983341664682815, 0.9950041652780258]
        np.testing.assert_allclose(pe[1, 1], expected, rtol=0, atol=1e-15)

    def test_interleave_by_axis(self):
        pe = nm.positional_encoding(4, 3, 5)
        np.testing.assert_allclose(pe[2, 3], [np.sin(3), np.cos(3), np.sin(2), np.cos(2)])

    @pytest.mark.parametrize("size", [(4, 4), (16, 16), (20, 12)])
    def test_normalized_equals_base_when_sizes_match(self, size):
        cfg = nm.PositionalEncodingConfig(16, size, size)
        np.testing.assert_array_equal(nm.normalized_positional_encoding(cfg), nm.positional_encoding(16, size[1], size[0]))

    def test_normalized_rescales_coordinates(self):
        cfg = nm.PositionalEncodingConfig(8, (16, 16), (32, 8))
        pe = nm.normalized_positional_encoding(cfg)
        assert pe.shape == (8, 32, 8)
        # test column 6 maps to train column 3, test row 2 to train row 4
        np.testing.assert_allclose(pe[2, 6], nm.positional_encoding(8, 5, 4)[4, 3], atol=1e-15)

    def test_channels_multiple_of_four(self):
        with pytest.raises(ValueError):
            nm.PositionalEncodingConfig(6, (4, 4), (4, 4))


class TestConv:
    @pytest.mark.parametrize("k", [1, 3])
    def test_loop_oracle(self, rng, k):
        x = rng.normal(size=(5, 6, 2))
        kern = rng.normal(size=(k, k, 2, 3))
        b = rng.normal(size=3)
        np.testing.assert_allclose(nm.conv2d(x, kern, b), naive_conv(x, kern, b), atol=1e-10)

    def test_stride_two_subsamples(self, rng):
        x = rng.normal(size=(8, 8, 2))
        kern = rng.normal(size=(3, 3, 2, 4))
        np.testing.assert_allclose(nm.conv2d(x, kern, stride=2), nm.conv2d(x, kern)[::2, ::2], atol=1e-12)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_backward(self, rng, stride):
        x = rng.normal(size=(2, 6, 6, 2))
        kern = rng.normal(size=(3, 3, 2, 3))
        b = rng.normal(size=3)
        w = rng.normal(size=nm.conv2d(x, kern, b, stride).shape)

        def f():
            return float(np.sum(nm.conv2d(x, kern, b, stride) * w))

        dx, dk, db = nm.conv2d_backward(w, x, kern, stride)
        assert relative_error(dx, numerical_gradient(f, x)) < 1e-7
        assert relative_error(dk, numerical_gradient(f, kern)) < 1e-7
        assert relative_error(db, numerical_gradient(f, b)) < 1e-7

    def test_rejects_bad_kernel(self):
        with pytest.raises(ValueError):
            nm.conv2d(np.zeros((4, 4, 1)), np.zeros((5, 5, 1, 1)))


class TestResample:
    def test_round_trip_on_ramps(self):
        yy, xx = np.mgrid[0:8, 0:8] / 8.0
        m = np.stack([0.3 * xx + 0.2 * yy, np.sin(xx) * np.cos(yy)], axis=-1)
        np.testing.assert_allclose(nm.resample(nm.resample(m, "up4"), "down4"), m, atol=5e-2)

    def test_constant_preserved(self):
        m = np.full((4, 4, 3), 2.5)
        np.testing.assert_allclose(nm.resample(m, "up4"), 2.5)
        np.testing.assert_allclose(nm.resample(m, "down2"), 2.5)

    def test_down_rejects_indivisible(self):
        with pytest.raises(ValueError):
            nm.resample(np.zeros((6, 8, 1)), "down4")

    @pytest.mark.parametrize("mode,shape", [("up2", (3, 4, 2)), ("up4", (2, 3, 1)), ("down2", (4, 6, 2)), ("down4", (8, 4, 1))])
    def test_adjoint(self, rng, mode, shape):
        x = rng.normal(size=shape)
        y = nm.resample(x, mode)
        w = rng.normal(size=y.shape)
        # <A x, w> == <x, A^T w>
        np.testing.assert_allclose(np.sum(y * w), np.sum(x * nm.resample_backward(w, mode)), rtol=1e-12)


def test_layer_norm_backward(rng):
    x = rng.normal(size=(4, 6))
    g, b = rng.normal(size=6), rng.normal(size=6)
    w = rng.normal(size=(4, 6))

    def f():
        return float(np.sum(nm.layer_norm(x, g, b)[0] * w))

    dx, dg, db = nm.layer_norm_backward(w, nm.layer_norm(x, g, b)[1], g)
    assert relative_error(dx, numerical_gradient(f, x)) < 1e-6
    assert relative_error(dg, numerical_gradient(f, g)) < 1e-7
    assert relative_error(db, numerical_gradient(f, b)) < 1e-7


@settings(max_examples=30)
@given(st.integers(1, 6), st.integers(1, 6))
def test_bilinear_rows_are_convex(n, f):
    m = nm.bilinear_matrix(n, f)
    np.testing.assert_allclose(m.sum(axis=1), 1.0)
    assert np.all(m >= 0)
