"""Two-view geometry for adaptive fine-grid sizing.

Relative pose comes from a normalised 8-point essential matrix inside RANSAC;
depths per match are recovered up to the unknown translation scale ``alpha``
from ``d_j p_j = d_i p_i + alpha T`` by cross products, and the source grid
is sized by the depth ratio ``d_i / d_j``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class PoseUnavailableError(RuntimeError):
    """Too few matches or inliers to estimate a relative pose."""


@dataclass(frozen=True)
class RansacConfig:
    max_iters: int = 1000
    threshold: float = 1.5  # Sampson distance, pixels
    seed: int = 0
    min_inliers: int = 8
    # share of pose inliers that a single homography may explain before the
    # translation is considered unobservable (pure rotation or a plane)
    degeneracy_ratio: float = 0.9


@dataclass
class TwoViewGeometry:
    K_i: np.ndarray
    K_j: np.ndarray
    R: np.ndarray
    T: np.ndarray  # unit length; the true translation is alpha * T
    inliers: np.ndarray
    degenerate: bool = False


@dataclass
class ScaledDepthPair:
    d_i_over_alpha: np.ndarray
    d_j_over_alpha: np.ndarray
    valid: np.ndarray
    n_components: np.ndarray  # cross-product components that passed the denominator test


# ------------------------------------------------------------ primitives


def homogeneous(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)


def skew(t: np.ndarray) -> np.ndarray:
    return np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]], dtype=float)


def calibrate(points: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Pixel points ``(N, 2)`` to normalised camera rays ``(N, 3)`` with z = 1."""
    return homogeneous(points) @ np.linalg.inv(K).T


def _normalize(x: np.ndarray):
    """Isotropic normalisation of ``(..., N, 2)`` points; returns points and transforms."""
    c = x.mean(axis=-2, keepdims=True)
    d = np.sqrt(((x - c) ** 2).sum(-1)).mean(-1)
    s = np.sqrt(2.0) / np.maximum(d, 1e-12)
    t = np.zeros(x.shape[:-2] + (3, 3))
    t[..., 0, 0] = s
    t[..., 1, 1] = s
    t[..., 0, 2] = -s * c[..., 0, 0]
    t[..., 1, 2] = -s * c[..., 0, 1]
    t[..., 2, 2] = 1.0
    return (x - c) * s[..., None, None], t


def _project_essential(e: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(e)
    return u @ (np.array([1.0, 1.0, 0.0])[..., :, None] * vt)


def eight_point(xi: np.ndarray, xj: np.ndarray) -> np.ndarray:
    """Essential matrices from calibrated ``(..., N>=8, 2)`` correspondences so
    that ``[xj, 1] E [xi, 1]^T = 0``."""
    ni, ti = _normalize(xi)
    nj, tj = _normalize(xj)
    a = np.concatenate(
        [
            nj[..., 0:1] * ni,
            nj[..., 0:1],
            nj[..., 1:2] * ni,
            nj[..., 1:2],
            ni,
            np.ones(ni.shape[:-1] + (1,)),
        ],
        axis=-1,
    )
    _, _, vt = np.linalg.svd(a)
    e = vt[..., -1, :].reshape(vt.shape[:-2] + (3, 3))
    e = _project_essential(np.swapaxes(tj, -1, -2) @ e @ ti)
    return e / np.linalg.norm(e, axis=(-2, -1), keepdims=True)


def sampson_distance(F: np.ndarray, x_i: np.ndarray, x_j: np.ndarray) -> np.ndarray:
    """Sampson distance (pixels) for ``(..., 3, 3)`` fundamental matrices."""
    hi, hj = homogeneous(x_i), homogeneous(x_j)
    fx = np.einsum("...ab,nb->...na", F, hi)
    ftx = np.einsum("...ba,nb->...na", F, hj)
    num = np.einsum("na,...na->...n", hj, fx) ** 2
    den = fx[..., 0] ** 2 + fx[..., 1] ** 2 + ftx[..., 0] ** 2 + ftx[..., 1] ** 2
    return np.sqrt(num / np.maximum(den, 1e-300))


def decompose_essential(E: np.ndarray):
    """The four ``(R, t)`` candidates of an essential matrix."""
    u, _, vt = np.linalg.svd(E)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    r1 = u @ w @ vt
    r2 = u @ w.T @ vt
    t = u[:, 2]
    return [(r1, t), (r1, -t), (r2, t), (r2, -t)]


def triangulate(R: np.ndarray, t: np.ndarray, ri: np.ndarray, rj: np.ndarray) -> np.ndarray:
    """Linear triangulation from calibrated rays; returns points in camera i."""
    p_i = np.hstack([np.eye(3), np.zeros((3, 1))])
    p_j = np.hstack([R, t[:, None]])
    a = np.stack(
        [
            ri[:, 0:1] * p_i[2] - p_i[0],
            ri[:, 1:2] * p_i[2] - p_i[1],
            rj[:, 0:1] * p_j[2] - p_j[0],
            rj[:, 1:2] * p_j[2] - p_j[1],
        ],
        axis=1,
    )
    _, _, vt = np.linalg.svd(a)
    x = vt[:, -1, :]
    return x[:, :3] / x[:, 3:4]


def _cheirality(E, ri, rj):
    best = None
    for R, t in decompose_essential(E):
        X = triangulate(R, t, ri, rj)
        depth_j = X @ R[2] + t[2]
        count = int(np.count_nonzero((X[:, 2] > 0) & (depth_j > 0)))
        if best is None or count > best[0]:
            best = (count, R, t)
    return best[1], best[2]


def fit_homography(x_i: np.ndarray, x_j: np.ndarray) -> np.ndarray:
    """Normalised DLT homography(ies) for ``(..., N>=4, 2)`` point sets."""
    ni, ti = _normalize(x_i)
    nj, tj = _normalize(x_j)
    zeros = np.zeros(ni.shape[:-1] + (3,))
    hi = homogeneous(ni)
    r1 = np.concatenate([-hi, zeros, nj[..., 0:1] * hi], axis=-1)
    r2 = np.concatenate([zeros, -hi, nj[..., 1:2] * hi], axis=-1)
    a = np.concatenate([r1, r2], axis=-2)
    _, _, vt = np.linalg.svd(a)
    h = vt[..., -1, :].reshape(vt.shape[:-2] + (3, 3))
    return np.linalg.inv(tj) @ h @ ti


def transfer_error(H: np.ndarray, x_i: np.ndarray, x_j: np.ndarray) -> np.ndarray:
    y = np.einsum("...ab,nb->...na", H, homogeneous(x_i))
    z = y[..., 2:3]
    z = np.where(np.abs(z) < 1e-12, 1e-12, z)
    return np.linalg.norm(y[..., :2] / z - x_j, axis=-1)


def _sample_sets(rng, n: int, size: int, iters: int) -> np.ndarray:
    return np.argsort(rng.random((iters, n)), axis=1)[:, :size]


def homography_support(x_i, x_j, threshold: float, rng, iters: int = 300) -> np.ndarray:
    """Largest inlier mask of any homography found by 4-point RANSAC."""
    n = x_i.shape[0]
    if n < 4:
        return np.ones(n, bool)
    idx = _sample_sets(rng, n, 4, iters)
    with np.errstate(all="ignore"):
        H = fit_homography(x_i[idx], x_j[idx])
        err = transfer_error(H, x_i, x_j)
    err = np.where(np.isfinite(err), err, np.inf)
    best = np.argmax((err < threshold).sum(axis=1))
    return err[best] < threshold


# ------------------------------------------------------------------ pose


def estimate_relative_pose(x_i, x_j, K_i, K_j, cfg: RansacConfig = RansacConfig()) -> TwoViewGeometry:
    """Relative pose ``X_j = R X_i + alpha T`` from pixel correspondences."""
    x_i = np.asarray(x_i, dtype=float).reshape(-1, 2)
    x_j = np.asarray(x_j, dtype=float).reshape(-1, 2)
    n = x_i.shape[0]
    if n < 8:
        raise PoseUnavailableError(f"need at least 8 matches, got {n}")
    rng = np.random.default_rng(cfg.seed)
    ri = calibrate(x_i, K_i)
    rj = calibrate(x_j, K_j)
    ki_inv, kj_inv = np.linalg.inv(K_i), np.linalg.inv(K_j)

    idx = _sample_sets(rng, n, 8, cfg.max_iters)
    with np.errstate(all="ignore"):
        E = eight_point(ri[idx, :2], rj[idx, :2])
        F = kj_inv.T @ E @ ki_inv
        err = sampson_distance(F, x_i, x_j)
    err = np.where(np.isfinite(err), err, np.inf)
    counts = (err < cfg.threshold).sum(axis=1)
    inliers = err[np.argmax(counts)] < cfg.threshold
    # two refits on the consensus set
    for _ in range(2):
        if inliers.sum() < cfg.min_inliers:
            break
        E1 = eight_point(ri[inliers, :2], rj[inliers, :2])
        refined = sampson_distance(kj_inv.T @ E1 @ ki_inv, x_i, x_j) < cfg.threshold
        if refined.sum() < inliers.sum():
            break
        inliers = refined
    if inliers.sum() < cfg.min_inliers:
        raise PoseUnavailableError(f"only {int(inliers.sum())} inliers")
    E = eight_point(ri[inliers, :2], rj[inliers, :2])
    R, t = _cheirality(E, ri[inliers], rj[inliers])
    t = t / np.linalg.norm(t)
    hom = homography_support(x_i[inliers], x_j[inliers], cfg.threshold, rng)
    degenerate = bool(hom.mean() >= cfg.degeneracy_ratio)
    return TwoViewGeometry(np.asarray(K_i, float), np.asarray(K_j, float), R, t, inliers, degenerate)


# ------------------------------------------------------- depth and sizing


def scaled_depths(x_i, x_j, geom: TwoViewGeometry, rel_eps: float = 1e-8) -> ScaledDepthPair:
    """Depths divided by the translation scale for each match.

    ``p_i = R K_i^-1 (x_i, 1)``, ``p_j = K_j^-1 (x_j, 1)``;
    ``d_j/alpha = mean(div(T x p_i, p_j x p_i))`` and
    ``d_i/alpha = mean(div(-T x p_j, p_i x p_j))`` over the components whose
    denominator exceeds ``rel_eps * max|p_i| * max|p_j|``.
    """
    x_i = np.atleast_2d(np.asarray(x_i, dtype=float))
    x_j = np.atleast_2d(np.asarray(x_j, dtype=float))
    p_i = calibrate(x_i, geom.K_i) @ geom.R.T
    p_j = calibrate(x_j, geom.K_j)
    T = np.asarray(geom.T, dtype=float)
    num_j = np.cross(T, p_i)
    den_j = np.cross(p_j, p_i)
    num_i = -np.cross(T, p_j)
    den_i = np.cross(p_i, p_j)
    scale = np.abs(p_i).max(axis=1) * np.abs(p_j).max(axis=1)
    ok = np.abs(den_j) > rel_eps * scale[:, None]  # same mask for den_i = -den_j
    count = ok.sum(axis=1)
    safe = np.where(ok, den_j, 1.0)
    dj = np.where(ok, num_j / safe, 0.0).sum(axis=1) / np.maximum(count, 1)
    di = np.where(ok, num_i / np.where(ok, den_i, 1.0), 0.0).sum(axis=1) / np.maximum(count, 1)
    valid = (count > 0) & (di > 0) & (dj > 0) & np.isfinite(di) & np.isfinite(dj)
    return ScaledDepthPair(di, dj, valid, count)


def nearest_odd(v) -> np.ndarray:
    """Nearest odd integer, ties rounded up."""
    v = np.asarray(v, dtype=float)
    return (2 * np.floor((v - 1.0) / 2.0 + 0.5) + 1).astype(np.int64)


def grid_sizes(pair: ScaledDepthPair, s_i: int = 5, clamp=(1.0, 3.0)) -> np.ndarray:
    """Source grid size per match from the depth ratio, clamped and odd."""
    return depth_ratio_to_size(pair.d_i_over_alpha, pair.d_j_over_alpha, s_i, clamp, pair.valid)


def depth_ratio_to_size(d_i, d_j, s_i: int = 5, clamp=(1.0, 3.0), valid=None) -> np.ndarray:
    d_i = np.asarray(d_i, dtype=float)
    d_j = np.asarray(d_j, dtype=float)
    valid = np.ones(np.broadcast(d_i, d_j).shape, bool) if valid is None else np.asarray(valid)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.clip(d_i / d_j, clamp[0], clamp[1])
    ok = valid & np.isfinite(r)
    s = np.maximum(nearest_odd(np.where(ok, r, 1.0) * s_i), s_i)
    return np.where(ok, s, s_i).astype(np.int64)


# ------------------------------------------------------------- file format


def read_intrinsics(path) -> np.ndarray:
    """Nine whitespace-separated numbers, row-major ``K``."""
    vals = np.array(Path(path).read_text().split(), dtype=float)
    if vals.size != 9:
        raise ValueError(f"{path}: expected 9 numbers, found {vals.size}")
    return vals.reshape(3, 3)


def write_intrinsics(path, K: np.ndarray) -> None:
    Path(path).write_text(" ".join(f"{v:.10g}" for v in np.asarray(K, float).ravel()) + "\n")
