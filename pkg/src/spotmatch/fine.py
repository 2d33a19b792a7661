"""Fine-level refinement on 1/2-resolution feature grids.

A reference grid of size ``s_i`` and a source grid of size ``s_j`` are cropped
around each coarse match; one linear self-attention and one linear
cross-attention layer mix the grid tokens; the reference centre token is then
correlated with every source token and the softmax heatmap's expectation gives
the sub-pixel source position.  Grids of different ``s_j`` are processed in
separate batches, so no resampling is involved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention as att
from .coarse import FINE_STRIDE


class NoRefinementError(ValueError):
    """Every source cell of a grid is padding."""


@dataclass(frozen=True)
class FineConfig:
    channels: int = 32
    n_heads: int = 4
    s_i: int = 5
    clamp: tuple[float, float] = (1.0, 3.0)


@dataclass
class FineResult:
    coords: np.ndarray  # (M, 2) sub-pixel source (x, y)
    variance: np.ndarray  # (M,) trace of the heatmap covariance, pixels^2
    sizes: np.ndarray  # (M,) source grid size used


def init_fine(rng: np.random.Generator, cfg: FineConfig) -> dict:
    spec = att.LayerSpec(cfg.channels, cfg.n_heads, conv_mix=False)
    p = {}
    for name in ("self", "cross"):
        for k, v in att.init_layer(rng, spec).items():
            p[f"{name}.{k}"] = v
    return p


def _sub(params, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


# ------------------------------------------------------------------ crops


def grid_indices(shape, centers, s: int):
    """Flat map indices ``(M, s*s)`` of ``s x s`` windows around ``(row, col)``
    centres, ``-1`` outside the map."""
    if s % 2 == 0:
        raise ValueError("grid size must be odd")
    h, w = shape
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
    if centers.size and (
        centers[:, 0].min() < 0 or centers[:, 0].max() >= h or centers[:, 1].min() < 0 or centers[:, 1].max() >= w
    ):
        raise IndexError("grid centre outside the map")
    r = s // 2
    dy, dx = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    yy = centers[:, 0:1] + dy.ravel()
    xx = centers[:, 1:2] + dx.ravel()
    ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
    return np.where(ok, yy * w + xx, -1)


def crop_grid(f: np.ndarray, center, s: int):
    """``s x s`` window of ``f (H, W, C)`` around ``center = (row, col)``;
    out-of-map cells are zero and flagged invalid.  Returns ``(grid, mask)``."""
    idx = grid_indices(f.shape[:2], [center], s)[0]
    flat = f.reshape(-1, f.shape[-1])
    grid = np.where((idx >= 0)[:, None], flat[np.maximum(idx, 0)], 0.0)
    return grid.reshape(s, s, -1), (idx >= 0).reshape(s, s)


def grid_coords(centers, s: int, stride: int = FINE_STRIDE) -> np.ndarray:
    """Pixel ``(x, y)`` centres of every cell of the grids, ``(M, s*s, 2)``."""
    centers = np.asarray(centers, dtype=float).reshape(-1, 2)
    r = s // 2
    dy, dx = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    off = (stride - 1) / 2.0
    x = (centers[:, 1:2] + dx.ravel()) * stride + off
    y = (centers[:, 0:1] + dy.ravel()) * stride + off
    return np.stack([x, y], axis=-1)


def fine_cell_of(points: np.ndarray, shape, stride: int = FINE_STRIDE) -> np.ndarray:
    """Nearest fine cell ``(row, col)`` to pixel points ``(x, y)``, clipped to the map."""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    off = (stride - 1) / 2.0
    col = np.clip(np.round((points[:, 0] - off) / stride), 0, shape[1] - 1)
    row = np.clip(np.round((points[:, 1] - off) / stride), 0, shape[0] - 1)
    return np.stack([row, col], axis=1).astype(np.int64)


# -------------------------------------------------------------- heatmap


def heatmap_expectation(logits, mask, coords):
    """Masked softmax heatmap, its expected coordinate and covariance trace."""
    logits = np.where(mask, logits, -np.inf)
    m = np.max(logits, axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise NoRefinementError("a source grid has no valid cells")
    e = np.where(mask, np.exp(logits - m), 0.0)
    heat = e / e.sum(axis=-1, keepdims=True)
    mu = np.einsum("...n,...nc->...c", heat, coords)
    var = np.einsum("...n,...n->...", heat, ((coords - mu[..., None, :]) ** 2).sum(-1))
    return mu, var, heat


# -------------------------------------------------------------- forward


def _group_forward(ref_t, ref_m, src_t, src_m, coords, params, cfg):
    h = cfg.n_heads
    ps, pc = _sub(params, "self"), _sub(params, "cross")
    m_r, c_sr = att.message_forward(ref_t, ref_t, ps, h, "linear", key_mask=ref_m)
    m_s, c_ss = att.message_forward(src_t, src_t, ps, h, "linear", key_mask=src_m)
    r1, s1 = ref_t + m_r, src_t + m_s
    m_r2, c_cr = att.message_forward(r1, s1, pc, h, "linear", key_mask=src_m)
    m_s2, c_cs = att.message_forward(s1, r1, pc, h, "linear", key_mask=ref_m)
    r2, s2 = r1 + m_r2, s1 + m_s2
    ci = ref_t.shape[1] // 2
    center = r2[:, ci]
    scale = 1.0 / np.sqrt(ref_t.shape[-1])
    logits = np.einsum("mc,mnc->mn", center, s2) * scale
    mu, var, heat = heatmap_expectation(logits, src_m, coords)
    return mu, var, (c_sr, c_ss, c_cr, c_cs, center, s2, heat, coords, scale, ci)


def _group_backward(dmu, params, cache, cfg):
    c_sr, c_ss, c_cr, c_cs, center, s2, heat, coords, scale, ci = cache
    ps, pc = _sub(params, "self"), _sub(params, "cross")
    gs, gc = {}, {}
    dheat = np.einsum("mc,mnc->mn", dmu, coords)
    dlog = heat * (dheat - np.sum(heat * dheat, axis=-1, keepdims=True))
    dcenter = np.einsum("mn,mnc->mc", dlog, s2) * scale
    ds2 = dlog[:, :, None] * center[:, None, :] * scale
    dr2 = np.zeros((center.shape[0],) + c_sr[0].shape[1:])
    dr2[:, ci] = dcenter
    # r2 = r1 + msg(r1 <- s1); s2 = s1 + msg(s1 <- r1)
    dq_r, dkv_s = att.message_backward(dr2, pc, c_cr, gc)
    dq_s, dkv_r = att.message_backward(ds2, pc, c_cs, gc)
    dr1 = dr2 + dq_r + dkv_r
    ds1 = ds2 + dq_s + dkv_s
    dq, dkv = att.message_backward(dr1, ps, c_sr, gs)
    dref = dr1 + dq + dkv
    dq, dkv = att.message_backward(ds1, ps, c_ss, gs)
    dsrc = ds1 + dq + dkv
    grads = {f"self.{k}": v for k, v in gs.items()}
    grads.update({f"cross.{k}": v for k, v in gc.items()})
    return dref, dsrc, grads


def _gather(flat, idx):
    return np.where((idx >= 0)[..., None], flat[np.maximum(idx, 0)], 0.0)


def refine_forward(f_ref, f_src, ref_centers, src_centers, sizes, params, cfg: FineConfig):
    """Refine ``M`` matches given fine-map cell centres ``(row, col)`` and the
    per-match source grid size.  Returns ``(FineResult, cache)``."""
    ref_centers = np.asarray(ref_centers, dtype=np.int64).reshape(-1, 2)
    src_centers = np.asarray(src_centers, dtype=np.int64).reshape(-1, 2)
    sizes = np.asarray(sizes, dtype=np.int64).reshape(-1)
    m = ref_centers.shape[0]
    mu = np.zeros((m, 2))
    var = np.zeros(m)
    fr = f_ref.reshape(-1, f_ref.shape[-1])
    fs = f_src.reshape(-1, f_src.shape[-1])
    ridx = grid_indices(f_ref.shape[:2], ref_centers, cfg.s_i)
    groups = []
    for s in np.unique(sizes):
        sel = np.flatnonzero(sizes == s)
        sidx = grid_indices(f_src.shape[:2], src_centers[sel], int(s))
        coords = grid_coords(src_centers[sel], int(s))
        ref_t, src_t = _gather(fr, ridx[sel]), _gather(fs, sidx)
        g_mu, g_var, cache = _group_forward(ref_t, ridx[sel] >= 0, src_t, sidx >= 0, coords, params, cfg)
        mu[sel], var[sel] = g_mu, g_var
        groups.append((sel, ridx[sel], sidx, cache))
    return FineResult(mu, var, sizes), (groups, f_ref.shape, f_src.shape)


def refine_backward(dmu, params, cfg: FineConfig, cache):
    """Gradients of the expected coordinates (variance is treated as constant)."""
    groups, ref_shape, src_shape = cache
    d_ref = np.zeros((ref_shape[0] * ref_shape[1], ref_shape[2]))
    d_src = np.zeros((src_shape[0] * src_shape[1], src_shape[2]))
    grads: dict = {}
    for sel, ridx, sidx, gcache in groups:
        dref, dsrc, g = _group_backward(dmu[sel], params, gcache, cfg)
        ok = ridx >= 0
        np.add.at(d_ref, ridx[ok], dref[ok])
        ok = sidx >= 0
        np.add.at(d_src, sidx[ok], dsrc[ok])
        for k, v in g.items():
            grads[k] = grads[k] + v if k in grads else v
    return d_ref.reshape(ref_shape), d_src.reshape(src_shape), grads


def refine_match(grid_ref, mask_ref, grid_src, mask_src, src_coords, params, cfg: FineConfig) -> FineResult:
    """Single-match refinement from pre-cropped ``(s, s, C)`` grids.

    ``src_coords`` holds the pixel ``(x, y)`` of every source cell, ``(s_j, s_j, 2)``.
    """
    ref_t = grid_ref.reshape(1, -1, grid_ref.shape[-1])
    src_t = grid_src.reshape(1, -1, grid_src.shape[-1])
    coords = np.asarray(src_coords, dtype=float).reshape(1, -1, 2)
    mu, var, _ = _group_forward(
        ref_t, mask_ref.reshape(1, -1), src_t, mask_src.reshape(1, -1), coords, params, cfg
    )
    return FineResult(mu, var, np.array([grid_src.shape[0]]))
