"""Dense differentiable primitives.

Every function that takes part in training comes with a hand-written adjoint
(``*_backward``).  Feature maps are ``(..., H, W, C)`` arrays; any leading
axes are treated as batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NonFiniteError(ValueError):
    """Raised when an operation receives NaN or Inf values."""


def check_finite(x: np.ndarray, what: str = "input") -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")


# ---------------------------------------------------------------- softmax


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    check_finite(x)
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-D array, stabilised by max subtraction."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {m.shape}")
    return softmax(m, axis=1)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    check_finite(x)
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax_backward(dy: np.ndarray, y: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (dy - np.sum(dy * y, axis=axis, keepdims=True))


# ------------------------------------------------------------ activations


def elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def elu_feature_map(x: np.ndarray) -> np.ndarray:
    """``elu(x) + 1``, evaluated as ``exp(x)`` on the negative branch so the
    result stays strictly positive (no cancellation near -1 + 1)."""
    x = np.asarray(x, dtype=float)
    return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))


def elu_feature_map_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


# ----------------------------------------------------- positional encoding


@dataclass(frozen=True)
class PositionalEncodingConfig:
    channels: int
    train_size: tuple[int, int]  # (width, height)
    test_size: tuple[int, int]  # (width, height)

    def __post_init__(self):
        if self.channels <= 0 or self.channels % 4:
            raise ValueError("channel count must be a positive multiple of 4")
        if min(*self.train_size, *self.test_size) < 1:
            raise ValueError("image extents must be >= 1")


def positional_encoding(
    channels: int, height: int, width: int, x_scale: float = 1.0, y_scale: float = 1.0
) -> np.ndarray:
    """Sinusoidal 2-D encoding with the (sin x, cos x, sin y, cos y) interleave.

    Channel ``4k + c`` uses frequency ``1 / 10000**(2k / channels)``; positions
    are pixel indices starting at 0, multiplied by ``x_scale`` / ``y_scale``.
    """
    if channels % 4:
        raise ValueError("channel count must be a multiple of 4")
    k = np.arange(channels // 4)
    freq = 1.0 / 10000.0 ** (2.0 * k / channels)
    x = np.arange(width) * x_scale
    y = np.arange(height) * y_scale
    wx = x[None, :, None] * freq  # (1, W, K)
    wy = y[:, None, None] * freq  # (H, 1, K)
    pe = np.empty((height, width, channels // 4, 4))
    pe[..., 0] = np.broadcast_to(np.sin(wx), (height, width, k.size))
    pe[..., 1] = np.broadcast_to(np.cos(wx), (height, width, k.size))
    pe[..., 2] = np.broadcast_to(np.sin(wy), (height, width, k.size))
    pe[..., 3] = np.broadcast_to(np.cos(wy), (height, width, k.size))
    return pe.reshape(height, width, channels)


def normalized_positional_encoding(cfg: PositionalEncodingConfig) -> np.ndarray:
    """Encoding for the test grid with coordinates rescaled to the train grid."""
    (w_tr, h_tr), (w_te, h_te) = cfg.train_size, cfg.test_size
    return positional_encoding(cfg.channels, h_te, w_te, w_tr / w_te, h_tr / h_te)


# ------------------------------------------------------------ convolution


def _conv_geometry(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("input too small for this kernel/stride")
    return ho, wo


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    pad = [(0, 0)] * (x.ndim - 3) + [(p, p), (p, p), (0, 0)]
    return np.pad(x, pad)


def conv2d(
    x: np.ndarray,
    kernel: np.ndarray,
    bias: np.ndarray | None = None,
    stride: int = 1,
    padding: int | None = None,
) -> np.ndarray:
    """Cross-correlation of ``x (..., H, W, Cin)`` with ``kernel (k, k, Cin, Cout)``.

    ``padding`` defaults to ``k // 2`` (zero padding).
    """
    k = kernel.shape[0]
    if kernel.shape[1] != k or k not in (1, 3):
        raise ValueError(f"unsupported kernel shape {kernel.shape}")
    if x.shape[-1] != kernel.shape[2]:
        raise ValueError(f"channel mismatch: input {x.shape[-1]}, kernel {kernel.shape[2]}")
    p = k // 2 if padding is None else padding
    ho, wo = _conv_geometry(x.shape[-3], x.shape[-2], k, stride, p)
    xp = _pad_hw(x, p)
    out = np.zeros(x.shape[:-3] + (ho, wo, kernel.shape[3]))
    for dy in range(k):
        for dx in range(k):
            patch = xp[..., dy : dy + stride * (ho - 1) + 1 : stride, dx : dx + stride * (wo - 1) + 1 : stride, :]
            out += patch @ kernel[dy, dx]
    if bias is not None:
        out += bias
    return out


def conv2d_backward(
    dout: np.ndarray,
    x: np.ndarray,
    kernel: np.ndarray,
    stride: int = 1,
    padding: int | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Adjoint of :func:`conv2d`; returns ``(dx, dkernel, dbias)``."""
    k = kernel.shape[0]
    p = k // 2 if padding is None else padding
    ho, wo = dout.shape[-3], dout.shape[-2]
    xp = _pad_hw(x, p)
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(kernel)
    cin, cout = kernel.shape[2], kernel.shape[3]
    g = dout.reshape(-1, cout)
    for dy in range(k):
        for dx in range(k):
            sl = (
                Ellipsis,
                slice(dy, dy + stride * (ho - 1) + 1, stride),
                slice(dx, dx + stride * (wo - 1) + 1, stride),
                slice(None),
            )
            dk[dy, dx] = xp[sl].reshape(-1, cin).T @ g
            dxp[sl] += dout @ kernel[dy, dx].T
    if p:
        dxp = dxp[..., p:-p, p:-p, :]
    db = g.sum(axis=0)
    return dxp, dk, db


# ------------------------------------------------------------- resampling

_MODES = {"down2": ("down", 2), "down4": ("down", 4), "up2": ("up", 2), "up4": ("up", 4)}


def bilinear_matrix(n_in: int, factor: int) -> np.ndarray:
    """``(n_in * factor, n_in)`` 1-D bilinear upsampling operator (half-pixel
    centres, edge clamped)."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resample(x: np.ndarray, mode: str) -> np.ndarray:
    """Average-pool (``down2``/``down4``) or bilinear upsample (``up2``/``up4``)."""
    kind, f = _MODES[mode]
    h, w, c = x.shape[-3:]
    lead = x.shape[:-3]
    if kind == "down":
        if h % f or w % f:
            raise ValueError(f"extents {h}x{w} not divisible by {f}")
        return x.reshape(lead + (h // f, f, w // f, f, c)).mean(axis=(-4, -2))
    uh, uw = bilinear_matrix(h, f), bilinear_matrix(w, f)
    return np.einsum("ah,...hwc,bw->...abc", uh, x, uw, optimize=True)


def resample_backward(dout: np.ndarray, mode: str) -> np.ndarray:
    kind, f = _MODES[mode]
    h, w, c = dout.shape[-3:]
    if kind == "down":
        g = np.repeat(np.repeat(dout, f, axis=-3), f, axis=-2)
        return g / (f * f)
    uh, uw = bilinear_matrix(h // f, f), bilinear_matrix(w // f, f)
    return np.einsum("ah,...abc,bw->...hwc", uh, dout, uw, optimize=True)


# ------------------------------------------------------------ layer norm


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv)


def layer_norm_backward(dy: np.ndarray, cache, gamma: np.ndarray):
    xhat, inv = cache
    lead = tuple(range(dy.ndim - 1))
    dgamma = np.sum(dy * xhat, axis=lead)
    dbeta = np.sum(dy, axis=lead)
    g = dy * gamma
    dx = inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta
