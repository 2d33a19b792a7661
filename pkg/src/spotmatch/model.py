"""The full matcher: pyramid, aggregation, coarse matching and fine refinement.

Parameters live in one flat dict with ``pyr.``, ``agg.`` and ``fine.``
prefixes.  :func:`coarse_forward` / :func:`coarse_backward` cover everything
up to the coarse log matching matrix; the fine stage is driven separately so
training can feed ground-truth grids while inference feeds extracted matches.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import aggregation as agg
from . import backbone as bb
from . import coarse, fine, geometry
from .numerics import PositionalEncodingConfig, normalized_positional_encoding


@dataclass(frozen=True)
class ModelConfig:
    pyramid: bb.PyramidConfig = field(default_factory=bb.PyramidConfig)
    aggregation: agg.AggregationConfig = field(default_factory=agg.AggregationConfig)
    fine: fine.FineConfig = field(default_factory=fine.FineConfig)
    temperature: float | None = None  # coarse tau, defaults to 1/sqrt(C)
    threshold: float = 0.2
    train_size: tuple[int, int] = (128, 128)  # (W, H) used by the normalized encoding

    def __post_init__(self):
        if self.aggregation.channels != self.pyramid.coarse_dim:
            raise ValueError("aggregation channels must equal the pyramid coarse dimension")
        if self.fine.channels != self.pyramid.fine_dim:
            raise ValueError("fine channels must equal the pyramid fine dimension")

    def tau(self) -> float:
        c = self.pyramid.coarse_dim
        return 1.0 / np.sqrt(c) if self.temperature is None else self.temperature

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:32]


def init_model(cfg: ModelConfig, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    params = {}
    for prefix, d in (
        ("pyr", bb.init_pyramid(rng, cfg.pyramid)),
        ("agg", agg.init_aggregation(rng, cfg.aggregation)),
        ("fine", fine.init_fine(rng, cfg.fine)),
    ):
        params.update({f"{prefix}.{k}": v for k, v in d.items()})
    return params


def standardize(image: np.ndarray) -> np.ndarray:
    """Zero-mean unit-variance grayscale with a trailing channel axis."""
    img = np.asarray(image, dtype=float)
    if img.ndim == 3:
        img = img.mean(axis=-1)
    sd = img.std()
    return ((img - img.mean()) / (sd if sd > 1e-12 else 1.0))[..., None]


def coarse_encoding(cfg: ModelConfig, shape) -> np.ndarray:
    """Normalized positional encoding for an ``(H, W)`` image, on the 1/8 grid."""
    h, w = shape
    tw, th = cfg.train_size
    pe = PositionalEncodingConfig(
        cfg.pyramid.coarse_dim, (tw // coarse.COARSE_STRIDE, th // coarse.COARSE_STRIDE), (w // 8, h // 8)
    )
    return normalized_positional_encoding(pe)


@dataclass
class CoarseOutput:
    f2: np.ndarray  # (2, H/2, W/2, Cf): reference then source
    f8_ref: np.ndarray
    f8_src: np.ndarray
    log_pc: np.ndarray  # (N_ref, N_src)
    log_spot: list
    selections: list
    cache: tuple

    @property
    def coarse_shape(self):
        return self.f8_ref.shape[:2]

    @property
    def fine_shape(self):
        return self.f2.shape[1:3]


def coarse_forward(params: dict, image_ref, image_src, cfg: ModelConfig) -> CoarseOutput:
    """Run the pipeline up to the coarse log matching matrix."""
    a, b = standardize(image_ref), standardize(image_src)
    if a.shape != b.shape:
        raise ValueError("both images must have the same extents")
    bb.check_extents(*a.shape[:2])
    pp = agg.sub(params, "pyr")
    (f2, f8, f32), pcache = bb.pyramid_forward(np.stack([a, b]), pp)
    f8 = f8 + coarse_encoding(cfg, a.shape[:2])
    out = agg.run_aggregation(f32[0], f32[1], f8[0], f8[1], agg.sub(params, "agg"), cfg.aggregation)
    tau = cfg.tau()
    s = coarse.similarity_matrix(out.f8_ref, out.f8_src, tau)
    log_pc, factors = coarse.dual_log_softmax(s)
    cache = (pcache, out.cache, factors, tau)
    return CoarseOutput(f2, out.f8_ref, out.f8_src, log_pc, out.log_spot, out.selections, cache)


def coarse_backward(co: CoarseOutput, d_log_pc, d_log_spot, d_f2, params: dict, cfg: ModelConfig) -> dict:
    """Parameter gradients given upstream gradients of the coarse outputs.

    ``d_f2`` has the shape of ``co.f2`` (or is ``None``); ``d_log_spot``
    mirrors ``co.log_spot``.
    """
    pcache, acache, factors, tau = co.cache
    grads: dict = {}
    c = co.f8_ref.shape[-1]
    a = co.f8_ref.reshape(-1, c)
    b = co.f8_src.reshape(-1, c)
    if d_log_pc is not None:
        ds = coarse.dual_log_softmax_backward(d_log_pc, factors) * tau
        d_ref, d_src = (ds @ b).reshape(co.f8_ref.shape), (ds.T @ a).reshape(co.f8_src.shape)
    else:
        d_ref, d_src = np.zeros_like(co.f8_ref), np.zeros_like(co.f8_src)
    d32r, d32s, d8r, d8s, g = agg.aggregation_backward(d_ref, d_src, d_log_spot, agg.sub(params, "agg"), cfg.aggregation, acache)
    grads.update({f"agg.{k}": v for k, v in g.items()})
    df2 = np.zeros_like(co.f2) if d_f2 is None else d_f2
    g = bb.pyramid_backward(df2, np.stack([d8r, d8s]), np.stack([d32r, d32s]), agg.sub(params, "pyr"), pcache)
    grads.update({f"pyr.{k}": v for k, v in g.items()})
    return grads


# ------------------------------------------------------------- inference


def ref_anchor_cells(ref_index: np.ndarray, coarse_width: int) -> np.ndarray:
    """Fine-map cell ``(row, col)`` used as the grid centre of each coarse cell."""
    ref_index = np.asarray(ref_index, dtype=np.int64)
    r, c = np.divmod(ref_index, coarse_width)
    factor = coarse.COARSE_STRIDE // coarse.FINE_STRIDE
    return np.stack([r * factor + factor // 2, c * factor + factor // 2], axis=1)


def anchor_points(ref_index: np.ndarray, coarse_width: int) -> np.ndarray:
    """Pixel ``(x, y)`` of :func:`ref_anchor_cells`."""
    cells = ref_anchor_cells(ref_index, coarse_width)
    off = (coarse.FINE_STRIDE - 1) / 2.0
    return cells[:, ::-1] * coarse.FINE_STRIDE + off


@dataclass
class MatchOutput:
    matches: coarse.MatchSet
    ref_points: np.ndarray  # (M, 2) fine anchors in the reference image
    src_points: np.ndarray  # (M, 2) refined source positions
    variance: np.ndarray
    sizes: np.ndarray
    geometry: geometry.TwoViewGeometry | None
    note: str


def estimate_grid_sizes(matches: coarse.MatchSet, K_i, K_j, cfg: ModelConfig, ransac=None):
    """Source grid sizes from an estimated pose; falls back to ``s_i`` with a note."""
    s_i = cfg.fine.s_i
    n = len(matches)
    fixed = np.full(n, s_i, dtype=np.int64)
    if K_i is None or K_j is None:
        return fixed, None, "no intrinsics: fixed grids"
    ransac = ransac or geometry.RansacConfig(threshold=coarse.COARSE_STRIDE / 2.0)
    xi, xj = matches.ref_points(), matches.src_points()
    try:
        geom = geometry.estimate_relative_pose(xi, xj, K_i, K_j, ransac)
    except geometry.PoseUnavailableError as exc:
        return fixed, None, f"pose unavailable ({exc}): fixed grids"
    if geom.degenerate:
        return fixed, geom, "degenerate pose: fixed grids"
    pair = geometry.scaled_depths(xi, xj, geom)
    return geometry.grid_sizes(pair, s_i, cfg.fine.clamp), geom, "adaptive grids"


def match(
    params: dict,
    image_ref,
    image_src,
    cfg: ModelConfig,
    K_i=None,
    K_j=None,
    adaptive: bool = True,
    sizes=None,
    ransac=None,
) -> MatchOutput:
    """Coarse MNN matches refined to sub-pixel source positions.

    Grid sizes come from ``sizes`` when given, otherwise from the estimated
    pose when ``adaptive`` and intrinsics are available, otherwise ``s_i``.
    """
    co = coarse_forward(params, image_ref, image_src, cfg)
    return match_from_coarse(params, co, cfg, K_i, K_j, adaptive, sizes, ransac)


def match_from_coarse(params, co: CoarseOutput, cfg: ModelConfig, K_i=None, K_j=None, adaptive=True, sizes=None, ransac=None):
    """Extraction and refinement given a :class:`CoarseOutput`; ``sizes`` may be
    an array or a callable ``MatchSet -> array``."""
    hc, wc = co.coarse_shape
    ms = coarse.extract_matches(np.exp(co.log_pc), cfg.threshold, (hc, wc), (hc, wc))
    n = len(ms)
    if sizes is not None:
        given = sizes(ms) if callable(sizes) else sizes
        s_j = np.broadcast_to(np.asarray(given, dtype=np.int64), (n,)).copy()
        geom, note = None, "given grids"
    elif adaptive:
        s_j, geom, note = estimate_grid_sizes(ms, K_i, K_j, cfg, ransac)
    else:
        s_j, geom, note = np.full(n, cfg.fine.s_i, dtype=np.int64), None, "fixed grids"
    ref_pts = anchor_points(ms.ref_index, wc)
    if n == 0:
        return MatchOutput(ms, ref_pts, np.zeros((0, 2)), np.zeros(0), s_j, geom, note)
    rc = ref_anchor_cells(ms.ref_index, wc)
    sc = ref_anchor_cells(ms.src_index, wc)
    res, _ = fine.refine_forward(co.f2[0], co.f2[1], rc, sc, s_j, agg.sub(params, "fine"), cfg.fine)
    return MatchOutput(ms, ref_pts, res.coords, res.variance, s_j, geom, note)
