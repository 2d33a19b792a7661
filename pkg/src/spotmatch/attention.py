"""Attention building blocks and the cross-attention layer.

Token tensors are ``(..., tokens, heads, dims)``.  Layer parameters live in a
plain ``dict`` of arrays; backward functions return gradients under the same
keys.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sparse_attention as sa
from .numerics import (
    conv2d,
    conv2d_backward,
    elu,
    elu_backward,
    elu_feature_map,
    elu_feature_map_backward,
    layer_norm,
    layer_norm_backward,
    softmax,
    softmax_backward,
)

KINDS = ("vanilla", "linear", "sparse")


def split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    c = x.shape[-1]
    if c % n_heads:
        raise ValueError(f"{c} channels do not split into {n_heads} heads")
    return x.reshape(x.shape[:-1] + (n_heads, c // n_heads))


def merge_heads(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def flatten_map(m: np.ndarray) -> np.ndarray:
    """``(..., H, W, C)`` grid to ``(..., H*W, C)`` tokens (row-major)."""
    return m.reshape(m.shape[:-3] + (m.shape[-3] * m.shape[-2], m.shape[-1]))


def unflatten_map(t: np.ndarray, height: int, width: int) -> np.ndarray:
    return t.reshape(t.shape[:-2] + (height, width, t.shape[-1]))


def _check_qkv(q, k, v):
    if q.shape[-2:] != k.shape[-2:] or k.shape[:-1] != v.shape[:-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"layout mismatch: Q{q.shape} K{k.shape} V{v.shape}")


# ---------------------------------------------------------------- vanilla


def vanilla_attention(q, k, v, scale: float | None = None, key_mask=None):
    """``softmax(scale * Q K^T) V`` per head; returns ``(out, probs)``."""
    _check_qkv(q, k, v)
    scale = 1.0 / np.sqrt(q.shape[-1]) if scale is None else scale
    logits = np.einsum("...nhd,...mhd->...hnm", q, k) * scale
    if key_mask is not None:
        logits = np.where(key_mask[..., None, None, :], logits, -np.inf)
        logits = logits - np.max(logits, axis=-1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=-1, keepdims=True)
    else:
        p = softmax(logits, axis=-1)
    return np.einsum("...hnm,...mhd->...nhd", p, v), p


def vanilla_attention_backward(dout, q, k, v, probs, scale: float | None = None):
    scale = 1.0 / np.sqrt(q.shape[-1]) if scale is None else scale
    dv = np.einsum("...hnm,...nhd->...mhd", probs, dout)
    dp = np.einsum("...nhd,...mhd->...hnm", dout, v)
    dl = softmax_backward(dp, probs) * scale
    dq = np.einsum("...hnm,...mhd->...nhd", dl, k)
    dk = np.einsum("...hnm,...nhd->...mhd", dl, q)
    return dq, dk, dv


# ----------------------------------------------------------------- linear


def linear_attention(q, k, v, key_mask=None):
    """Kernelised attention ``phi(Q) (phi(K)^T V)`` normalised per query row.

    ``phi = elu + 1``.  ``key_mask`` (``(..., tokens)`` booleans) removes keys.
    Returns ``(out, cache)``.
    """
    _check_qkv(q, k, v)
    fq = elu_feature_map(q)
    fk = elu_feature_map(k)
    if key_mask is not None:
        fk = fk * key_mask[..., :, None, None]
    kv = np.einsum("...mhd,...mhe->...hde", fk, v)
    ksum = fk.sum(axis=-3)  # (..., h, d)
    num = np.einsum("...nhd,...hde->...nhe", fq, kv)
    den = np.einsum("...nhd,...hd->...nh", fq, ksum)
    out = num / den[..., None]
    return out, (fq, fk, kv, ksum, den, out, key_mask)


def linear_attention_backward(dout, q, k, v, cache):
    fq, fk, kv, ksum, den, out, key_mask = cache
    dnum = dout / den[..., None]
    dden = -np.sum(dout * out, axis=-1) / den
    dfq = np.einsum("...nhe,...hde->...nhd", dnum, kv) + dden[..., None] * ksum[..., None, :, :]
    dkv = np.einsum("...nhd,...nhe->...hde", fq, dnum)
    dksum = np.einsum("...nh,...nhd->...hd", dden, fq)
    dfk = np.einsum("...hde,...mhe->...mhd", dkv, v) + dksum[..., None, :, :]
    if key_mask is not None:
        dfk = dfk * key_mask[..., :, None, None]
    dv = np.einsum("...mhd,...hde->...mhe", fk, dkv)
    return elu_feature_map_backward(dfq, q), elu_feature_map_backward(dfk, k), dv


# -------------------------------------------------------- conv token mixing


def conv_mix_block(x: np.ndarray, params: dict) -> np.ndarray:
    """Residual 3x3 convolution ``x + elu(conv3x3(x))``; stands in for
    self-attention plus feed-forward."""
    return x + elu(conv2d(x, params["mix_w"], params["mix_b"]))


def _conv_mix_forward(x, params):
    pre = conv2d(x, params["mix_w"], params["mix_b"])
    return x + elu(pre), pre


def _conv_mix_backward(dy, x, pre, params, grads):
    dpre = elu_backward(dy, pre)
    dx, dw, db = conv2d_backward(dpre, x, params["mix_w"])
    grads["mix_w"] = grads.get("mix_w", 0) + dw
    grads["mix_b"] = grads.get("mix_b", 0) + db
    return dy + dx


# ------------------------------------------------------------ layer params


@dataclass(frozen=True)
class LayerSpec:
    channels: int
    n_heads: int = 4
    conv_mix: bool = True
    layer_norm: bool = False


def init_layer(rng: np.random.Generator, spec: LayerSpec, out_gain: float = 0.5) -> dict:
    c = spec.channels
    std = 1.0 / np.sqrt(c)
    p = {
        "wq": rng.normal(0, std, (c, c)),
        "wk": rng.normal(0, std, (c, c)),
        "wv": rng.normal(0, std, (c, c)),
        "wo": rng.normal(0, std * out_gain, (c, c)),
    }
    if spec.layer_norm:
        p["ln_g"] = np.ones(c)
        p["ln_b"] = np.zeros(c)
    if spec.conv_mix:
        p["mix_w"] = rng.normal(0, 0.5 / np.sqrt(9 * c), (3, 3, c, c))
        p["mix_b"] = np.zeros(c)
    return p


def zero_layer(spec: LayerSpec) -> dict:
    p = init_layer(np.random.default_rng(0), spec)
    return {k: (np.ones_like(v) if k == "ln_g" else np.zeros_like(v)) for k, v in p.items()}


# ----------------------------------------------------- token attention core


def attend(q, k, v, kind: str, plan=None, key_mask=None):
    """Dispatch to the three attention kinds; returns ``(out, cache)``."""
    if kind == "vanilla":
        out, probs = vanilla_attention(q, k, v, key_mask=key_mask)
        return out, probs
    if kind == "linear":
        return linear_attention(q, k, v, key_mask=key_mask)
    if kind == "sparse":
        if plan is None:
            raise ValueError("sparse attention requires a plan")
        res = sa.sparse_forward(q, k, v, plan)
        return res.output, res.weights
    raise ValueError(f"unknown attention kind {kind!r}")


def attend_backward(dout, q, k, v, kind: str, cache, plan=None):
    if kind == "vanilla":
        return vanilla_attention_backward(dout, q, k, v, cache)
    if kind == "linear":
        return linear_attention_backward(dout, q, k, v, cache)
    return sa.sparse_backward(q, k, v, plan, None, dout, weights=cache)


def message_forward(xt, yt, params, n_heads: int, kind: str, plan=None, key_mask=None):
    """Projected attention message from tokens ``yt`` to tokens ``xt``."""
    q = split_heads(xt @ params["wq"], n_heads)
    k = split_heads(yt @ params["wk"], n_heads)
    v = split_heads(yt @ params["wv"], n_heads)
    att, acache = attend(q, k, v, kind, plan, key_mask)
    merged = merge_heads(att)
    msg = merged @ params["wo"]
    lcache = None
    if "ln_g" in params:
        msg, lcache = layer_norm(msg, params["ln_g"], params["ln_b"])
    return msg, (xt, yt, q, k, v, acache, merged, lcache, kind, plan)


def message_backward(dmsg, params, cache, grads: dict):
    xt, yt, q, k, v, acache, merged, lcache, kind, plan = cache
    if lcache is not None:
        dmsg, dg, db = layer_norm_backward(dmsg, lcache, params["ln_g"])
        grads["ln_g"] = grads.get("ln_g", 0) + dg
        grads["ln_b"] = grads.get("ln_b", 0) + db
    lead = tuple(range(dmsg.ndim - 1))
    grads["wo"] = grads.get("wo", 0) + np.tensordot(merged, dmsg, axes=(lead, lead))
    datt = split_heads(dmsg @ params["wo"].T, q.shape[-2])
    dq, dk, dv = attend_backward(datt, q, k, v, kind, acache, plan)
    dq, dk, dv = merge_heads(dq), merge_heads(dk), merge_heads(dv)
    grads["wq"] = grads.get("wq", 0) + np.tensordot(xt, dq, axes=(lead, lead))
    grads["wk"] = grads.get("wk", 0) + np.tensordot(yt, dk, axes=(lead, lead))
    grads["wv"] = grads.get("wv", 0) + np.tensordot(yt, dv, axes=(lead, lead))
    dxt = dq @ params["wq"].T
    dyt = dk @ params["wk"].T + dv @ params["wv"].T
    return dxt, dyt


# ------------------------------------------------------ cross-attention layer


def cross_attention_forward(x, y, params, n_heads: int, kind: str = "vanilla", plan=None):
    """``x' = mix(x + msg(x <- y))`` on ``(H, W, C)`` maps; returns ``(x', cache)``."""
    if x.shape[-1] != y.shape[-1]:
        raise ValueError("channel mismatch between the two maps")
    if kind == "sparse" and plan is None:
        raise ValueError("sparse attention requires a plan")
    h, w = x.shape[-3:-1]
    msg, mcache = message_forward(flatten_map(x), flatten_map(y), params, n_heads, kind, plan)
    x1 = x + unflatten_map(msg, h, w)
    if "mix_w" in params:
        x2, pre = _conv_mix_forward(x1, params)
    else:
        x2, pre = x1, None
    return x2, (mcache, x1, pre, y.shape)


def cross_attention_backward(dx2, params, cache):
    """Returns ``(dx, dy, grads)``."""
    mcache, x1, pre, yshape = cache
    grads: dict = {}
    dx1 = _conv_mix_backward(dx2, x1, pre, params, grads) if pre is not None else dx2
    h, w = dx1.shape[-3:-1]
    dxt, dyt = message_backward(flatten_map(dx1), params, mcache, grads)
    dx = dx1 + unflatten_map(dxt, h, w)
    dy = unflatten_map(dyt, yshape[-3], yshape[-2])
    return dx, dy, grads


def cross_attention_layer(x, y, params, kind: str = "vanilla", plan=None, n_heads: int = 4):
    return cross_attention_forward(x, y, params, n_heads, kind, plan)[0]
