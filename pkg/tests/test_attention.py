import numpy as np
import pytest

from spotmatch import attention as att
from spotmatch import sparse_attention as sa
from spotmatch.gradcheck import directional_check, numerical_gradient, relative_error
from spotmatch.numerics import conv2d, elu, elu_feature_map


def qkv(rng, n=7, m=9, h=2, d=4):
    return rng.normal(size=(n, h, d)), rng.normal(size=(m, h, d)), rng.normal(size=(m, h, d))


class TestVanilla:
    def test_direct_formula(self, rng):
        q, k, v = qkv(rng)
        out, _ = att.vanilla_attention(q, k, v)
        for h in range(2):
            s = q[:, h] @ k[:, h].T / 2.0
            p = np.exp(s - s.max(1, keepdims=True))
            np.testing.assert_allclose(out[:, h], (p / p.sum(1, keepdims=True)) @ v[:, h], atol=1e-12)

    def test_key_mask_equals_dropping_keys(self, rng):
        q, k, v = qkv(rng)
        mask = np.array([1, 0, 1, 1, 0, 0, 1, 1, 0], bool)
        a, _ = att.vanilla_attention(q, k, v, key_mask=mask)
        b, _ = att.vanilla_attention(q, k[mask], v[mask])
        np.testing.assert_allclose(a, b, atol=1e-14)

    def test_backward(self, rng):
        q, k, v = qkv(rng, 4, 5, 2, 3)
        up = rng.normal(size=(4, 2, 3))
        _, probs = att.vanilla_attention(q, k, v)

        def f():
            return float(np.sum(att.vanilla_attention(q, k, v)[0] * up))

        grads = att.vanilla_attention_backward(up, q, k, v, probs)
        for g, x in zip(grads, (q, k, v)):
            assert relative_error(g, numerical_gradient(f, x)) < 1e-6


class TestLinear:
    def test_quadratic_form(self, rng):
        q, k, v = qkv(rng)
        out, _ = att.linear_attention(q, k, v)
        fq, fk = elu_feature_map(q), elu_feature_map(k)
        for i in range(7):
            for h in range(2):
                w = fk[:, h] @ fq[i, h]
                np.testing.assert_allclose(out[i, h], w @ v[:, h] / w.sum(), atol=1e-12)

    def test_output_is_convex_combination(self, rng):
        q, k, v = qkv(rng)
        out, _ = att.linear_attention(q, k, v)
        assert np.all(out <= v.max(0) + 1e-12) and np.all(out >= v.min(0) - 1e-12)

    def test_key_mask(self, rng):
        q, k, v = qkv(rng)
        mask = rng.random(9) > 0.4
        mask[0] = True
        a, _ = att.linear_attention(q, k, v, key_mask=mask)
        b, _ = att.linear_attention(q, k[mask], v[mask])
        np.testing.assert_allclose(a, b, atol=1e-13)

    def test_backward(self, rng):
        q, k, v = qkv(rng, 4, 6, 2, 3)
        up = rng.normal(size=(4, 2, 3))
        _, cache = att.linear_attention(q, k, v)

        def f():
            return float(np.sum(att.linear_attention(q, k, v)[0] * up))

        grads = att.linear_attention_backward(up, q, k, v, cache)
        for g, x in zip(grads, (q, k, v)):
            assert relative_error(g, numerical_gradient(f, x)) < 1e-6


class TestDispatch:
    def test_vanilla_equals_sparse_dense_plan(self, rng):
        q, k, v = qkv(rng)
        a, _ = att.attend(q, k, v, "vanilla")
        b, _ = att.attend(q, k, v, "sparse", plan=sa.dense_plan(7, 9))
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_sparse_needs_plan(self, rng):
        with pytest.raises(ValueError):
            att.attend(*qkv(rng), "sparse")

    def test_unknown_kind(self, rng):
        with pytest.raises(ValueError):
            att.attend(*qkv(rng), "cosine")


def test_split_merge_round_trip(rng):
    x = rng.normal(size=(5, 12))
    np.testing.assert_array_equal(att.merge_heads(att.split_heads(x, 4)), x)
    with pytest.raises(ValueError):
        att.split_heads(x, 5)


def test_conv_mix_matches_residual_formula(rng):
    x = rng.normal(size=(4, 5, 3))
    p = att.init_layer(rng, att.LayerSpec(3, 1))
    ref = x + elu(conv2d(x, p["mix_w"], p["mix_b"]))
    np.testing.assert_allclose(att.conv_mix_block(x, p), ref, atol=1e-10)


class TestCrossLayer:
    @pytest.mark.parametrize("kind", att.KINDS)
    @pytest.mark.parametrize("layer_norm", [False, True])
    def test_backward(self, rng, kind, layer_norm):
        spec = att.LayerSpec(4, 2, conv_mix=True, layer_norm=layer_norm)
        p = att.init_layer(rng, spec)
        x, y = rng.normal(size=(2, 3, 4)), rng.normal(size=(3, 2, 4))
        plan = None
        if kind == "sparse":
            plan = sa.plan_from_arrays(*np.nonzero(rng.random((6, 6)) < 0.5), 6, 6)
        up = rng.normal(size=x.shape)

        def f():
            return float(np.sum(att.cross_attention_forward(x, y, p, 2, kind, plan)[0] * up))

        _, cache = att.cross_attention_forward(x, y, p, 2, kind, plan)
        dx, dy, grads = att.cross_attention_backward(up, p, cache)
        errs = directional_check(f, {"x": x, "y": y, **p}, {"x": dx, "y": dy, **grads}, rng, n_dirs=2)
        assert max(errs.values()) < 1e-6, errs

    def test_zero_layer_is_identity(self, rng):
        spec = att.LayerSpec(4, 2)
        x, y = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
        np.testing.assert_allclose(att.cross_attention_layer(x, y, att.zero_layer(spec), n_heads=2), x)

    def test_channel_mismatch(self, rng):
        p = att.init_layer(rng, att.LayerSpec(4, 2))
        with pytest.raises(ValueError):
            att.cross_attention_forward(np.zeros((2, 2, 4)), np.zeros((2, 2, 3)), p, 2)
