"""Spot-guided cross attention.

For every reference pixel ``p`` the keys are restricted to ``l x l`` spots in
the source map, centred on the matched locations of ``p`` and of its ``k``
best neighbours (ranked by local similarity times matching confidence).
Selection is a discrete, stop-gradient step; gradients reach the features
through the attention values and through the matching matrix loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attention as att
from .coarse import dual_log_softmax, dual_log_softmax_backward, row_log_softmax, row_log_softmax_backward
from .sparse_attention import SparseAttentionPlan, plan_from_arrays


@dataclass(frozen=True)
class SpotConfig:
    local_size: int = 5  # l
    top_k: int = 4  # k
    temperature: float | None = None  # defaults to 1/sqrt(C)
    matrix: str = "dual"  # "dual" | "row"
    similarity: str = "same"  # "same" (reference neighbours) | "cross" (source at the same positions)

    def __post_init__(self):
        if self.local_size < 3 or self.local_size % 2 == 0:
            raise ValueError("local region size must be odd and >= 3")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.temperature is not None and self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.matrix not in ("dual", "row") or self.similarity not in ("same", "cross"):
            raise ValueError("unknown matrix/similarity mode")

    def tau(self, channels: int) -> float:
        return 1.0 / np.sqrt(channels) if self.temperature is None else self.temperature


@dataclass
class SpotSelection:
    topk: np.ndarray  # (N, k+1) flat reference pixels; column 0 is p itself, -1 pads
    seeds: np.ndarray  # (N, k+1) flat source pixels (Loc of topk), -1 pads
    shape: tuple[int, int]  # reference map (H, W)

    def size(self, p: int) -> int:
        return int(np.count_nonzero(self.topk[p] >= 0))


# --------------------------------------------------------- matching matrix


def matching_log_matrix(f_ref, f_src, tau: float, mode: str = "dual"):
    a = f_ref.reshape(-1, f_ref.shape[-1])
    b = f_src.reshape(-1, f_src.shape[-1])
    s = tau * (a @ b.T)
    return dual_log_softmax(s) if mode == "dual" else row_log_softmax(s)


def matching_matrix(f_ref, f_src, tau: float, mode: str = "dual") -> np.ndarray:
    """``P_s`` across the two maps (dual-softmax by default)."""
    return np.exp(matching_log_matrix(f_ref, f_src, tau, mode)[0])


def matching_log_matrix_backward(dlogp, factors, f_ref, f_src, tau: float, mode: str = "dual"):
    ds = dual_log_softmax_backward(dlogp, factors) if mode == "dual" else row_log_softmax_backward(dlogp, factors)
    ds = ds * tau
    a = f_ref.reshape(-1, f_ref.shape[-1])
    b = f_src.reshape(-1, f_src.shape[-1])
    return (ds @ b).reshape(f_ref.shape), (ds.T @ a).reshape(f_src.shape)


# ----------------------------------------------------------- neighbourhoods


def window_offsets(l: int, include_center: bool) -> np.ndarray:
    r = l // 2
    dy, dx = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    off = np.stack([dy.ravel(), dx.ravel()], axis=1)
    if not include_center:
        off = off[(off != 0).any(axis=1)]
    return off


def neighbors(shape, l: int):
    """Flat neighbour indices ``(N, l*l-1)`` in increasing linear order and a
    validity mask (windows are clipped at the borders)."""
    h, w = shape
    off = window_offsets(l, include_center=False)
    yy, xx = np.divmod(np.arange(h * w), w)
    ny = yy[:, None] + off[None, :, 0]
    nx = xx[:, None] + off[None, :, 1]
    valid = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
    idx = np.where(valid, ny * w + nx, -1)
    return idx, valid


def _masked_softmax(x, valid):
    x = np.where(valid, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(valid, np.exp(x - m), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    return e / np.where(s > 0, s, 1.0)


def all_similarity_scores(f_ref, l: int, f_other=None):
    """Softmax over ``<f_ref(p), f(p_i)>`` for every pixel's clipped window.

    ``f_other`` switches the neighbour features to another map of the same
    size.  Returns ``(scores, neighbour_index, valid)``.
    """
    h, w, c = f_ref.shape
    idx, valid = neighbors((h, w), l)
    flat = f_ref.reshape(-1, c)
    nb = (f_ref if f_other is None else f_other).reshape(-1, c)
    if nb.shape[0] != flat.shape[0]:
        raise ValueError("cross-image similarity needs maps of equal size")
    dots = np.einsum("nc,nkc->nk", flat, nb[np.maximum(idx, 0)])
    return _masked_softmax(dots, valid), idx, valid


def similarity_scores(f: np.ndarray, p, l: int, f_other=None) -> np.ndarray:
    """Scores of one pixel ``p = (y, x)`` against its clipped ``l x l``
    neighbourhood (``p`` excluded), in increasing linear index order."""
    h, w, _ = f.shape
    y, x = p
    if not (0 <= y < h and 0 <= x < w):
        raise IndexError("pixel outside the map")
    scores, _, valid = all_similarity_scores(f, l, f_other)
    i = y * w + x
    return scores[i][valid[i]]


def confidence_and_loc(p_s: np.ndarray, nbrs=None):
    """Row maxima and first-index row argmax of ``P_s``, optionally gathered
    at neighbour indices."""
    conf = p_s.max(axis=1)
    loc = np.argmax(p_s, axis=1)
    if nbrs is None:
        return conf, loc
    nbrs = np.asarray(nbrs)
    return conf[nbrs], loc[nbrs]


def topk_order(scores: np.ndarray, valid: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest valid scores per row, ties to the lowest
    index; ``-1`` pads rows with fewer than ``k`` valid entries."""
    key = np.where(valid, -scores, np.inf)
    order = np.argsort(key, axis=-1, kind="stable")[..., :k]
    ok = np.take_along_axis(valid, order, axis=-1)
    return np.where(ok, order, -1)


def select_seeds(s_sim, s_conf, loc, p: int, k: int, nbr_index=None):
    """Single-pixel seed selection.

    ``s_sim``/``s_conf`` are aligned over ``N(p)``; ``loc`` maps every
    reference pixel to its matched source pixel.  ``nbr_index`` gives the
    flat pixel of each neighbour (defaults to ``0..len-1``).  Returns
    ``(topk_pixels, seed_pixels)`` with ``p`` first.
    """
    s_sim = np.asarray(s_sim, dtype=float)
    s_conf = np.asarray(s_conf, dtype=float)
    nbr_index = np.arange(s_sim.size) if nbr_index is None else np.asarray(nbr_index)
    order = topk_order(s_sim * s_conf, np.ones(s_sim.size, bool), k)
    chosen = nbr_index[order[order >= 0]]
    topk = np.concatenate([[p], chosen]).astype(np.int64)
    return topk, np.asarray(loc)[topk]


def select_all(f_ref, p_s, cfg: SpotConfig, f_other=None) -> SpotSelection:
    h, w, _ = f_ref.shape
    scores, idx, valid = all_similarity_scores(f_ref, cfg.local_size, f_other)
    conf, loc = confidence_and_loc(p_s)
    prod = scores * conf[np.maximum(idx, 0)]
    order = topk_order(prod, valid, cfg.top_k)
    chosen = np.where(order >= 0, np.take_along_axis(idx, np.maximum(order, 0), axis=1), -1)
    topk = np.concatenate([np.arange(h * w)[:, None], chosen], axis=1)
    seeds = np.where(topk >= 0, loc[np.maximum(topk, 0)], -1)
    return SpotSelection(topk=topk, seeds=seeds, shape=(h, w))


def build_spot_plan(sel: SpotSelection, l: int, src_shape) -> SparseAttentionPlan:
    """Keys of query ``p`` = union of clipped ``l x l`` windows around ``Seed(p)``."""
    hs, ws = src_shape
    off = window_offsets(l, include_center=True)
    sy, sx = np.divmod(np.maximum(sel.seeds, 0), ws)
    ky = sy[:, :, None] + off[None, None, :, 0]
    kx = sx[:, :, None] + off[None, None, :, 1]
    ok = (sel.seeds >= 0)[:, :, None] & (ky >= 0) & (ky < hs) & (kx >= 0) & (kx < ws)
    q = np.broadcast_to(np.arange(sel.seeds.shape[0])[:, None, None], ok.shape)
    return plan_from_arrays(q[ok], (ky * ws + kx)[ok], sel.seeds.shape[0], hs * ws)


def dump_selection(sel: SpotSelection, src_width: int, path) -> None:
    """Text lines ``p_y p_x : seed_y seed_x ...``."""
    w = sel.shape[1]
    with Path(path).open("w") as fh:
        for p, seeds in enumerate(sel.seeds):
            coords = [f"{s // src_width} {s % src_width}" for s in seeds if s >= 0]
            fh.write(f"{p // w} {p % w} : {' '.join(coords)}\n")


# ------------------------------------------------------------- the layer


def spot_guided_cross_attention(f_ref, f_src, params, cfg: SpotConfig, n_heads: int = 4):
    """Update ``f_ref`` from spot areas of ``f_src``.

    Returns ``(f_ref_new, log_P_s, cache)``; ``cache`` feeds
    :func:`spot_guided_backward` and carries the selection and plan.
    """
    tau = cfg.tau(f_ref.shape[-1])
    logp, factors = matching_log_matrix(f_ref, f_src, tau, cfg.matrix)
    p_s = np.exp(logp)
    other = f_src if cfg.similarity == "cross" else None
    sel = select_all(f_ref, p_s, cfg, other)
    plan = build_spot_plan(sel, cfg.local_size, f_src.shape[:2])
    out, acache = att.cross_attention_forward(f_ref, f_src, params, n_heads, "sparse", plan)
    return out, logp, (acache, factors, f_ref, f_src, tau, cfg.matrix, sel, plan)


def spot_guided_backward(dout, dlogp, params, cache):
    """Returns ``(d_ref, d_src, grads)``; ``dlogp`` may be ``None``."""
    acache, factors, f_ref, f_src, tau, mode, _, _ = cache
    d_ref, d_src, grads = att.cross_attention_backward(dout, params, acache)
    if dlogp is not None:
        gr, gs = matching_log_matrix_backward(dlogp, factors, f_ref, f_src, tau, mode)
        d_ref = d_ref + gr
        d_src = d_src + gs
    return d_ref, d_src, grads
