"""Multi-level spot-guided aggregation of the 1/32 and 1/8 feature maps.

Layout per forward: an initialisation stage (vanilla cross attention at 1/32,
linear cross attention at 1/8), then ``n_blocks`` blocks of
{fuse levels, vanilla cross attention at 1/32, spot-guided attention at 1/8},
then a last 1/32 -> 1/8 fusion.  Each attention stage updates both images;
by default both directions read the pre-stage features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention as att
from . import spot
from .numerics import conv2d, conv2d_backward, resample, resample_backward


@dataclass(frozen=True)
class AggregationConfig:
    channels: int = 64
    n_heads: int = 4
    n_blocks: int = 4
    layer_norm: bool = False
    sequential: bool = False  # update ref first, then src from the new ref
    spot: spot.SpotConfig = field(default_factory=spot.SpotConfig)

    def layer_spec(self) -> att.LayerSpec:
        return att.LayerSpec(self.channels, self.n_heads, conv_mix=True, layer_norm=self.layer_norm)


def init_aggregation(rng: np.random.Generator, cfg: AggregationConfig) -> dict:
    spec = cfg.layer_spec()
    c = cfg.channels
    p = {}

    def add(prefix, d):
        for k, v in d.items():
            p[f"{prefix}.{k}"] = v

    add("init32", att.init_layer(rng, spec))
    add("init8", att.init_layer(rng, spec))
    for b in range(cfg.n_blocks):
        add(f"b{b}.fuse", init_fuse(rng, c))
        add(f"b{b}.att32", att.init_layer(rng, spec))
        add(f"b{b}.spot8", att.init_layer(rng, spec))
    add("final.fuse", init_fuse(rng, c))
    return p


def init_fuse(rng, c: int, gain: float = 0.5) -> dict:
    return {
        "down_w": rng.normal(0, gain / np.sqrt(c), (1, 1, c, c)),
        "down_b": np.zeros(c),
        "up_w": rng.normal(0, gain / np.sqrt(c), (1, 1, c, c)),
        "up_b": np.zeros(c),
    }


def sub(params: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def _merge(grads: dict, prefix: str, g: dict) -> None:
    for k, v in g.items():
        key = f"{prefix}.{k}"
        grads[key] = grads[key] + v if key in grads else v


def _factor(f32, f8) -> int:
    f = f8.shape[-3] // f32.shape[-3]
    if f != 4 or f8.shape[-2] != 4 * f32.shape[-2] or f8.shape[-3] != 4 * f32.shape[-3]:
        raise ValueError(f"1/8 map {f8.shape[-3:-1]} must be 4x the 1/32 map {f32.shape[-3:-1]}")
    return f


# ------------------------------------------------------------------ fusion


def fuse_levels(f32, f8, params: dict):
    """``F32 + Conv1x1(Down(F8))`` and ``F8 + Conv1x1(Up(F32))``."""
    _factor(f32, f8)
    g32 = f32 + conv2d(resample(f8, "down4"), params["down_w"], params["down_b"])
    g8 = f8 + conv2d(resample(f32, "up4"), params["up_w"], params["up_b"])
    return g32, g8


def fuse_backward(dg32, dg8, f32, f8, params):
    grads = {}
    df32 = np.zeros_like(f32) if dg32 is None else dg32.copy()
    df8 = dg8.copy()
    if dg32 is not None:
        dd, grads["down_w"], grads["down_b"] = conv2d_backward(dg32, resample(f8, "down4"), params["down_w"])
        df8 += resample_backward(dd, "down4")
    du, grads["up_w"], grads["up_b"] = conv2d_backward(dg8, resample(f32, "up4"), params["up_w"])
    df32 += resample_backward(du, "up4")
    return df32, df8, grads


# --------------------------------------------------------- paired updates


def _pair_update(x, y, layer, cfg, kind):
    """Update both images with a shared layer; returns new maps and caches."""
    h = cfg.n_heads
    x_new, cx = att.cross_attention_forward(x, y, layer, h, kind)
    y_new, cy = att.cross_attention_forward(y, x_new if cfg.sequential else x, layer, h, kind)
    return x_new, y_new, (cx, cy)


def _pair_backward(dx_new, dy_new, layer, cfg, caches):
    cx, cy = caches
    dy, dx_src, g2 = att.cross_attention_backward(dy_new, layer, cy)
    if cfg.sequential:
        dx_new = dx_new + dx_src
        dx_src = 0
    dx, dy_src, g1 = att.cross_attention_backward(dx_new, layer, cx)
    grads = dict(g1)
    for k, v in g2.items():
        grads[k] = grads[k] + v if k in grads else v
    return dx + dx_src, dy + dy_src, grads


def _spot_pair(x, y, layer, cfg):
    h = cfg.n_heads
    x_new, lp_x, cx = spot.spot_guided_cross_attention(x, y, layer, cfg.spot, h)
    y_new, lp_y, cy = spot.spot_guided_cross_attention(y, x_new if cfg.sequential else x, layer, cfg.spot, h)
    return x_new, y_new, (lp_x, lp_y), (cx, cy)


def _spot_pair_backward(dx_new, dy_new, dlp, layer, cfg, caches):
    cx, cy = caches
    dlp_x, dlp_y = dlp
    dy, dx_src, g2 = spot.spot_guided_backward(dy_new, dlp_y, layer, cy)
    if cfg.sequential:
        dx_new = dx_new + dx_src
        dx_src = 0
    dx, dy_src, g1 = spot.spot_guided_backward(dx_new, dlp_x, layer, cx)
    grads = dict(g1)
    for k, v in g2.items():
        grads[k] = grads[k] + v if k in grads else v
    return dx + dx_src, dy + dy_src, grads


# ------------------------------------------------------------- public ops


def initialize_features(f32_ref, f32_src, f8_ref, f8_src, params: dict, cfg: AggregationConfig):
    """Vanilla cross attention at 1/32 and linear cross attention at 1/8."""
    a32, b32, c32 = _pair_update(f32_ref, f32_src, sub(params, "init32"), cfg, "vanilla")
    a8, b8, c8 = _pair_update(f8_ref, f8_src, sub(params, "init8"), cfg, "linear")
    return (a32, b32, a8, b8), (c32, c8)


@dataclass
class AggregationOutput:
    f8_ref: np.ndarray
    f8_src: np.ndarray
    log_spot: list  # per block: (log P_s ref->src, log P_s src->ref)
    selections: list  # per block: (SpotSelection ref, SpotSelection src)
    cache: tuple


def run_aggregation(f32_ref, f32_src, f8_ref, f8_src, params: dict, cfg: AggregationConfig) -> AggregationOutput:
    (r32, s32, r8, s8), init_cache = initialize_features(f32_ref, f32_src, f8_ref, f8_src, params, cfg)
    blocks = []
    log_spot = []
    selections = []
    for b in range(cfg.n_blocks):
        fuse = sub(params, f"b{b}.fuse")
        rr32, rr8 = fuse_levels(r32, r8, fuse)
        ss32, ss8 = fuse_levels(s32, s8, fuse)
        n_r32, n_s32, c32 = _pair_update(rr32, ss32, sub(params, f"b{b}.att32"), cfg, "vanilla")
        n_r8, n_s8, lps, c8 = _spot_pair(rr8, ss8, sub(params, f"b{b}.spot8"), cfg)
        blocks.append(((r32, r8, s32, s8), c32, c8))
        log_spot.append(lps)
        selections.append((c8[0][6], c8[1][6]))
        r32, s32, r8, s8 = n_r32, n_s32, n_r8, n_s8
    final = sub(params, "final.fuse")
    _, out_r8 = fuse_levels(r32, r8, final)
    _, out_s8 = fuse_levels(s32, s8, final)
    cache = (init_cache, blocks, (r32, r8, s32, s8), (f32_ref, f32_src, f8_ref, f8_src))
    return AggregationOutput(out_r8, out_s8, log_spot, selections, cache)


def aggregation_backward(d_r8, d_s8, dlog_spot, params: dict, cfg: AggregationConfig, cache):
    """Returns ``(d f32_ref, d f32_src, d f8_ref, d f8_src, grads)``.

    ``dlog_spot`` mirrors ``AggregationOutput.log_spot`` (entries may be None).
    """
    init_cache, blocks, last, inputs = cache
    grads: dict = {}
    r32, r8, s32, s8 = last
    final = sub(params, "final.fuse")
    dr32, dr8, g = fuse_backward(None, d_r8, r32, r8, final)
    _merge(grads, "final.fuse", g)
    ds32, ds8, g = fuse_backward(None, d_s8, s32, s8, final)
    _merge(grads, "final.fuse", g)
    for b in reversed(range(cfg.n_blocks)):
        (r32, r8, s32, s8), c32, c8 = blocks[b]
        dl = dlog_spot[b] if dlog_spot is not None else (None, None)
        drr8, dss8, g = _spot_pair_backward(dr8, ds8, dl, sub(params, f"b{b}.spot8"), cfg, c8)
        _merge(grads, f"b{b}.spot8", g)
        drr32, dss32, g = _pair_backward(dr32, ds32, sub(params, f"b{b}.att32"), cfg, c32)
        _merge(grads, f"b{b}.att32", g)
        fuse = sub(params, f"b{b}.fuse")
        dr32, dr8, g = fuse_backward(drr32, drr8, r32, r8, fuse)
        _merge(grads, f"b{b}.fuse", g)
        ds32, ds8, g = fuse_backward(dss32, dss8, s32, s8, fuse)
        _merge(grads, f"b{b}.fuse", g)
    c32, c8 = init_cache
    d8r, d8s, g = _pair_backward(dr8, ds8, sub(params, "init8"), cfg, c8)
    _merge(grads, "init8", g)
    d32r, d32s, g = _pair_backward(dr32, ds32, sub(params, "init32"), cfg, c32)
    _merge(grads, "init32", g)
    return d32r, d32s, d8r, d8s, grads
