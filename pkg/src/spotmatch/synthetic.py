"""Synthetic image pairs with exact correspondences.

Two generators:

* :func:`synth_warp_pair` renders a procedural blob texture and its
  similarity-warped copy (scale about a pivot plus rotation).  Both images
  sample the continuous texture directly, so correspondences are exact.
* :func:`synth_two_view` ray-casts a textured plane with boxes standing on it
  from two calibrated cameras, giving depths, pose and a dense
  correspondence field.

Both expose ``correspond(points)`` and ``depth_ratio(points)`` for
supervision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# ---------------------------------------------------------------- texture


@dataclass
class BlobTexture:
    """Sum of isotropic Gaussian blobs in 2-D or 3-D, squashed into [0, 1]."""

    centers: np.ndarray  # (n, dim)
    sigmas: np.ndarray
    amps: np.ndarray
    gain: float = 1.0
    chunk: int = 1024
    cutoff: float = 6.0

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        flat = pts.reshape(-1, pts.shape[-1])
        out = np.empty(flat.shape[0])
        reach = self.cutoff * self.sigmas[:, None]
        for lo in range(0, flat.shape[0], self.chunk):
            p = flat[lo : lo + self.chunk]
            # blobs farther than `cutoff` sigmas from the chunk's box contribute < 1e-7
            near = np.all((self.centers > p.min(0) - reach) & (self.centers < p.max(0) + reach), axis=1)
            c, inv = self.centers[near], 1.0 / (2.0 * self.sigmas[near] ** 2)
            d2 = (p**2).sum(1)[:, None] + (c**2).sum(1)[None, :] - 2.0 * p @ c.T
            out[lo : lo + self.chunk] = np.exp(-np.maximum(d2, 0.0) * inv) @ self.amps[near]
        return (0.5 + 0.5 * np.tanh(self.gain * out)).reshape(pts.shape[:-1])


@dataclass(frozen=True)
class TextureParams:
    density: float = 1.0 / 30.0  # blobs per unit area (pixels^2 for 2-D)
    sigma_range: tuple[float, float] = (1.2, 4.5)
    gain: float = 0.7


def blob_texture_2d(rng, lo, hi, params: TextureParams = TextureParams()) -> BlobTexture:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    n = max(1, int(np.prod(hi - lo) * params.density))
    centers = lo + rng.random((n, 2)) * (hi - lo)
    sigmas = np.exp(rng.uniform(*np.log(params.sigma_range), n))
    amps = rng.choice([-1.0, 1.0], n) * rng.uniform(0.6, 1.4, n)
    return BlobTexture(centers, sigmas, amps, params.gain)


# ------------------------------------------------------------- warp pairs


def similarity_homography(scale: float, rotation: float, pivot, center) -> np.ndarray:
    """``x_src = center + scale * Rot(rotation) (x_ref - pivot)`` as a 3x3 matrix."""
    c, s = np.cos(rotation), np.sin(rotation)
    a = scale * np.array([[c, -s], [s, c]])
    H = np.eye(3)
    H[:2, :2] = a
    H[:2, 2] = np.asarray(center, float) - a @ np.asarray(pivot, float)
    return H


def apply_homography(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    h = pts @ H[:2, :2].T + H[:2, 2]
    w = pts @ H[2, :2] + H[2, 2]
    return h / w[..., None]


def pixel_grid(height: int, width: int) -> np.ndarray:
    """``(H, W, 2)`` array of pixel ``(x, y)`` coordinates."""
    yy, xx = np.mgrid[0:height, 0:width].astype(float)
    return np.stack([xx, yy], axis=-1)


@dataclass
class WarpPair:
    image_ref: np.ndarray
    image_src: np.ndarray
    H: np.ndarray  # reference pixel -> source pixel
    scale: float
    rotation: float
    K: np.ndarray | None = None

    @property
    def shape(self):
        return self.image_ref.shape

    def correspond(self, points):
        """Source positions of reference points and an in-image flag."""
        q = apply_homography(self.H, points)
        h, w = self.image_src.shape
        ok = (q[..., 0] >= -0.5) & (q[..., 0] <= w - 0.5) & (q[..., 1] >= -0.5) & (q[..., 1] <= h - 0.5)
        return q, ok

    def depth_ratio(self, points) -> np.ndarray:
        """Local magnification ``sqrt|det J|`` of the warp (equals ``d_i / d_j``)."""
        pts = np.asarray(points, dtype=float)
        H = self.H
        w = pts @ H[2, :2] + H[2, 2]
        det = np.linalg.det(H) / w**3
        return np.sqrt(np.abs(det))


def synth_warp_pair(
    pattern: TextureParams = TextureParams(),
    scale: float = 1.0,
    rotation: float = 0.0,
    seed: int = 0,
    size: int = 128,
    shift=(0.0, 0.0),
) -> WarpPair:
    """Texture image and its copy magnified by ``scale`` about ``centre + shift``.

    ``scale`` must lie in ``[1/3, 3]``.  The source image is the reference
    warped by the returned homography.
    """
    if not 1.0 / 3.0 - 1e-12 <= scale <= 3.0 + 1e-12:
        raise ValueError("scale must lie in [1/3, 3]")
    rng = np.random.default_rng(seed)
    c = (size - 1) / 2.0
    pivot = np.array([c, c]) + np.asarray(shift, float)
    H = similarity_homography(scale, rotation, pivot, (c, c))
    tex = blob_texture_2d(rng, (-size, -size), (2 * size, 2 * size), pattern)
    grid = pixel_grid(size, size)
    ref = tex(grid)
    src = tex(apply_homography(np.linalg.inv(H), grid))
    return WarpPair(ref, src, H, float(scale), float(rotation))


def random_warp_pair(rng: np.random.Generator, size: int = 128, scale_range=(1.0, 2.5), max_rotation=0.3, pattern=TextureParams()):
    scale = rng.uniform(*scale_range)
    rotation = rng.uniform(-max_rotation, max_rotation)
    room = size * 0.5 * (1.0 - 1.0 / scale)
    shift = rng.uniform(-room, room, 2) if room > 0 else (0.0, 0.0)
    return synth_warp_pair(pattern, scale, rotation, int(rng.integers(2**31)), size, shift)


# ------------------------------------------------------------ 3-D scenes


def rotation_from_axis_angle(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    th = np.linalg.norm(v)
    if th < 1e-15:
        return np.eye(3)
    k = v / th
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(th) * kx + (1 - np.cos(th)) * kx @ kx


@dataclass(frozen=True)
class SceneParams:
    size: int = 128
    focal: float | None = None  # defaults to 0.9 * size
    plane_depth: float = 10.0
    n_boxes: int = 4
    box_extent: tuple[float, float] = (1.5, 4.0)
    box_height: tuple[float, float] = (1.0, 4.0)
    translation: tuple[float, float, float] | None = None  # camera-j centre in camera-i frame
    rotation: tuple[float, float, float] | None = None  # axis-angle of R
    forward_range: tuple[float, float] = (0.0, 0.3)  # fraction of plane depth, used when translation is None
    lateral: float = 1.0
    max_rotation: float = 0.05
    texture: TextureParams = field(default_factory=lambda: TextureParams(density=1.0 / 30.0))


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray


def _ray_hit(origin, dirs, plane_depth, boxes):
    """Nearest positive ray parameter against the plane ``z = plane_depth`` and boxes."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (plane_depth - origin[2]) / dirs[..., 2]
        t = np.where(t > 0, t, np.inf)
        for b in boxes:
            inv = 1.0 / dirs
            t0 = (b.lo - origin) * inv
            t1 = (b.hi - origin) * inv
            tmin = np.nanmax(np.minimum(t0, t1), axis=-1)
            tmax = np.nanmin(np.maximum(t0, t1), axis=-1)
            hit = (tmax >= tmin) & (tmin > 0)
            t = np.where(hit & (tmin < t), tmin, t)
    return t


@dataclass
class SyntheticScene:
    K_i: np.ndarray
    K_j: np.ndarray
    R: np.ndarray
    T: np.ndarray  # unit direction (zero for a zero baseline)
    alpha: float
    plane_depth: float
    boxes: list
    texture: BlobTexture
    image_ref: np.ndarray
    image_src: np.ndarray
    depth_ref: np.ndarray
    depth_src: np.ndarray

    @property
    def shape(self):
        # the principal point sits at the image centre
        return int(round(2 * self.K_j[1, 2] + 1)), int(round(2 * self.K_j[0, 2] + 1))

    @property
    def K(self):
        return self.K_i

    @property
    def t_real(self) -> np.ndarray:
        return self.alpha * self.T

    def center_j(self) -> np.ndarray:
        return -self.R.T @ self.t_real

    def cast(self, points, camera: str = "i"):
        """3-D points (camera-i frame) and depths seen through pixel ``points``."""
        pts = np.asarray(points, dtype=float)
        K = self.K_i if camera == "i" else self.K_j
        rays = np.concatenate([pts, np.ones(pts.shape[:-1] + (1,))], axis=-1) @ np.linalg.inv(K).T
        if camera == "i":
            origin, dirs = np.zeros(3), rays
        else:
            origin, dirs = self.center_j(), rays @ self.R  # R^T applied to row vectors
        t = _ray_hit(origin, dirs, self.plane_depth, self.boxes)
        return origin + t[..., None] * dirs, t

    def correspond(self, points):
        """Source pixel, visibility flag for reference pixel ``points``."""
        q, _, _, ok = self.correspond_full(points)
        return q, ok

    def correspond_full(self, points):
        X, d_i = self.cast(points, "i")
        Xj = X @ self.R.T + self.t_real
        d_j = Xj[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            q = (Xj / d_j[..., None]) @ self.K_j.T
        q = q[..., :2]
        h, w = self.shape
        inside = (d_j > 0) & (q[..., 0] >= -0.5) & (q[..., 0] <= w - 0.5) & (q[..., 1] >= -0.5) & (q[..., 1] <= h - 0.5)
        q_safe = np.where(inside[..., None], q, 0.0)
        _, seen = self.cast(q_safe, "j")
        visible = inside & np.isfinite(d_i) & (np.abs(seen - d_j) <= 1e-6 * np.abs(d_j) + 1e-9)
        return q, d_i, d_j, visible

    def depth_ratio(self, points) -> np.ndarray:
        _, d_i, d_j, _ = self.correspond_full(points)
        with np.errstate(divide="ignore", invalid="ignore"):
            return d_i / d_j


def _sample_surface_blobs(rng, plane_depth, half_extent, boxes, params: SceneParams, focal):
    """Blob centres on the plane and box faces; sizes in world units scaled
    so that they look like ``sigma_range`` pixels from the reference camera."""
    px = plane_depth / focal
    dens = params.texture.density / px**2
    centers = []
    area = (2 * half_extent) ** 2
    n = int(area * dens)
    xy = rng.uniform(-half_extent, half_extent, (n, 2))
    centers.append(np.column_stack([xy, np.full(n, plane_depth)]))
    for b in boxes:
        ext = b.hi - b.lo
        faces = [
            (2, b.lo[2], (0, 1)),  # top face (towards the camera)
            (0, b.lo[0], (1, 2)),
            (0, b.hi[0], (1, 2)),
            (1, b.lo[1], (0, 2)),
            (1, b.hi[1], (0, 2)),
        ]
        for axis, value, (u, v) in faces:
            a = ext[u] * ext[v]
            m = max(1, int(a * dens))
            c = np.empty((m, 3))
            c[:, axis] = value
            c[:, u] = rng.uniform(b.lo[u], b.hi[u], m)
            c[:, v] = rng.uniform(b.lo[v], b.hi[v], m)
            centers.append(c)
    centers = np.concatenate(centers)
    n = centers.shape[0]
    sig = np.exp(rng.uniform(*np.log(params.texture.sigma_range), n)) * px
    amps = rng.choice([-1.0, 1.0], n) * rng.uniform(0.6, 1.4, n)
    return BlobTexture(centers, sig, amps, params.texture.gain)


def synth_two_view(params: SceneParams = SceneParams(), seed: int = 0, render: bool = True) -> SyntheticScene:
    """Render a plane-plus-boxes scene from two cameras with known pose.

    With ``render=False`` only the geometry is built; images and depth maps
    stay ``None``.
    """
    rng = np.random.default_rng(seed)
    size = params.size
    if not 64 <= size <= 256:
        raise ValueError("image size must lie in [64, 256]")
    f = params.focal if params.focal is not None else 0.9 * size
    c = (size - 1) / 2.0
    K = np.array([[f, 0.0, c], [0.0, f, c], [0.0, 0.0, 1.0]])
    D = params.plane_depth
    half = D * (size / 2.0) / f
    boxes = []
    for _ in range(params.n_boxes):
        ext = rng.uniform(*params.box_extent, 2)
        h = rng.uniform(*params.box_height)
        center = rng.uniform(-half * 0.8, half * 0.8, 2)
        lo = np.array([center[0] - ext[0] / 2, center[1] - ext[1] / 2, D - h])
        hi = np.array([center[0] + ext[0] / 2, center[1] + ext[1] / 2, D])
        boxes.append(Box(lo, hi))

    if params.translation is not None:
        cj = np.asarray(params.translation, dtype=float)
    else:
        fwd = rng.uniform(*params.forward_range) * D
        lat = rng.uniform(-params.lateral, params.lateral, 2)
        cj = np.array([lat[0], lat[1], fwd])
    R = rotation_from_axis_angle(
        params.rotation if params.rotation is not None else rng.uniform(-params.max_rotation, params.max_rotation, 3)
    )
    near = min([b.lo[2] for b in boxes], default=D)
    if cj[2] >= near - 0.5:
        raise ValueError("camera j is placed at or beyond the scene surface")
    for b in boxes:
        if np.all(cj >= b.lo) and np.all(cj <= b.hi):
            raise ValueError("camera j is inside a box")
    t_real = -R @ cj
    alpha = float(np.linalg.norm(t_real))
    T = t_real / alpha if alpha > 0 else np.zeros(3)
    extent = half * 2.5 + np.linalg.norm(cj[:2])
    tex = _sample_surface_blobs(rng, D, extent, boxes, params, f)

    scene = SyntheticScene(K, K.copy(), R, T, alpha, D, boxes, tex, None, None, None, None)
    if not render:
        return scene
    grid = pixel_grid(size, size)
    X_i, d_i = scene.cast(grid, "i")
    X_j, d_j = scene.cast(grid, "j")
    scene.image_ref, scene.depth_ref = tex(X_i), d_i
    scene.image_src = tex(X_j)
    # camera-j depth is the z of the camera-frame point, which equals the ray parameter
    scene.depth_src = d_j
    return scene
