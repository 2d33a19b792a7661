"""Small convolutional feature pyramid (1/2, 1/8 and 1/32 outputs).

Five stride-2 stages of ``conv3x3 -> elu -> conv3x3 -> elu`` followed by a
top-down pathway that adds upsampled coarser maps into finer ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import conv2d, conv2d_backward, elu, elu_backward, resample, resample_backward

DESK_CHANNELS = (32, 48, 64, 64, 64)
FULL_CHANNELS = (128, 196, 256, 256, 256)


@dataclass(frozen=True)
class PyramidConfig:
    channels: tuple[int, ...] = DESK_CHANNELS
    coarse_dim: int = 64
    fine_dim: int = 32
    in_channels: int = 1

    def __post_init__(self):
        if len(self.channels) != 5:
            raise ValueError("the pyramid has exactly five stages")

    @classmethod
    def full_scale(cls) -> "PyramidConfig":
        return cls(channels=FULL_CHANNELS, coarse_dim=256, fine_dim=128)


def _he(rng, k, cin, cout):
    return rng.normal(0.0, np.sqrt(2.0 / (k * k * cin)), (k, k, cin, cout))


def init_pyramid(rng: np.random.Generator, cfg: PyramidConfig) -> dict:
    p = {}
    cin = cfg.in_channels
    for s, c in enumerate(cfg.channels):
        p[f"s{s}.a.w"] = _he(rng, 3, cin, c)
        p[f"s{s}.a.b"] = np.zeros(c)
        p[f"s{s}.b.w"] = _he(rng, 3, c, c)
        p[f"s{s}.b.b"] = np.zeros(c)
        cin = c
    d = cfg.coarse_dim
    for s, c in enumerate(cfg.channels):
        p[f"lat{s}.w"] = _he(rng, 1, c, d) * 0.5
        p[f"lat{s}.b"] = np.zeros(d)
    p["out8.w"] = _he(rng, 3, d, d) * 0.5
    p["out8.b"] = np.zeros(d)
    p["out2.w"] = _he(rng, 3, d, cfg.fine_dim) * 0.5
    p["out2.b"] = np.zeros(cfg.fine_dim)
    return p


def check_extents(height: int, width: int) -> None:
    if height % 32 or width % 32 or height < 32 or width < 32:
        raise ValueError(f"image extents {height}x{width} must be positive multiples of 32")


def pyramid_forward(image: np.ndarray, params: dict):
    """``image`` is ``(..., H, W, Cin)``.  Returns ``((f2, f8, f32), cache)``."""
    check_extents(*image.shape[-3:-1])
    x = image
    feats = []
    stage_cache = []
    for s in range(5):
        pa = conv2d(x, params[f"s{s}.a.w"], params[f"s{s}.a.b"], stride=2, padding=1)
        a = elu(pa)
        pb = conv2d(a, params[f"s{s}.b.w"], params[f"s{s}.b.b"])
        b = elu(pb)
        stage_cache.append((x, pa, a, pb))
        feats.append(b)
        x = b
    # top-down: td[4] is 1/32, td[2] is 1/8, td[0] is 1/2
    td = [None] * 5
    td[4] = conv2d(feats[4], params["lat4.w"], params["lat4.b"])
    for s in (3, 2, 1, 0):
        td[s] = conv2d(feats[s], params[f"lat{s}.w"], params[f"lat{s}.b"]) + resample(td[s + 1], "up2")
    e8 = elu(td[2])
    f8 = conv2d(e8, params["out8.w"], params["out8.b"])
    e2 = elu(td[0])
    f2 = conv2d(e2, params["out2.w"], params["out2.b"])
    f32 = td[4]
    return (f2, f8, f32), (stage_cache, feats, td, e8, e2)


def pyramid_backward(df2, df8, df32, params: dict, cache):
    """Adjoint of :func:`pyramid_forward`; returns parameter gradients."""
    stage_cache, feats, td, e8, e2 = cache
    g = {}
    dtd = [None] * 5
    de2, g["out2.w"], g["out2.b"] = conv2d_backward(df2, e2, params["out2.w"])
    dtd[0] = elu_backward(de2, td[0])
    de8, g["out8.w"], g["out8.b"] = conv2d_backward(df8, e8, params["out8.w"])
    dfeat = [np.zeros_like(f) for f in feats]
    for s in (0, 1, 2, 3):
        if s == 2:
            dtd[2] = dtd[2] + elu_backward(de8, td[2])
        df, g[f"lat{s}.w"], g[f"lat{s}.b"] = conv2d_backward(dtd[s], feats[s], params[f"lat{s}.w"])
        dfeat[s] += df
        up = resample_backward(dtd[s], "up2")
        dtd[s + 1] = up if dtd[s + 1] is None else dtd[s + 1] + up
    dtd[4] = dtd[4] + df32
    df, g["lat4.w"], g["lat4.b"] = conv2d_backward(dtd[4], feats[4], params["lat4.w"])
    dfeat[4] += df
    dx = None
    for s in (4, 3, 2, 1, 0):
        x, pa, a, pb = stage_cache[s]
        db = dfeat[s] if dx is None else dfeat[s] + dx
        dpb = elu_backward(db, pb)
        da, g[f"s{s}.b.w"], g[f"s{s}.b.b"] = conv2d_backward(dpb, a, params[f"s{s}.b.w"])
        dpa = elu_backward(da, pa)
        dx, g[f"s{s}.a.w"], g[f"s{s}.a.b"] = conv2d_backward(dpa, x, params[f"s{s}.a.w"], stride=2, padding=1)
    return g


def extract_pyramid(image: np.ndarray, params: dict):
    """Return ``{"1/2": f2, "1/8": f8, "1/32": f32}`` for an ``(H, W, 1)`` image."""
    (f2, f8, f32), _ = pyramid_forward(image, params)
    return {"1/2": f2, "1/8": f8, "1/32": f32}
