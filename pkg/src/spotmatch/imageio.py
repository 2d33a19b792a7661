"""Netpbm (PGM/PPM) reading and writing plus the side-by-side match overlay."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _tokens(data: bytes, count: int, pos: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    out = []
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        out.append(data[start:pos])
    return out, pos


def read_pnm(path) -> np.ndarray:
    """Read P2/P3/P5/P6 into floats in ``[0, 1]``: ``(H, W)`` or ``(H, W, 3)``."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise ImageFormatError(f"{path}: not a PGM/PPM file")
    (w, h, maxval), pos = _tokens(data, 3, 2)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise ImageFormatError(f"{path}: malformed header") from None
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: bad dimensions or maxval")
    ch = 3 if magic in (b"P3", b"P6") else 1
    count = w * h * ch
    if magic in (b"P5", b"P6"):
        dtype = ">u2" if maxval > 255 else "u1"
        raw = data[pos + 1 :]
        need = count * np.dtype(dtype).itemsize
        if len(raw) < need:
            raise ImageFormatError(f"{path}: truncated pixel data")
        vals = np.frombuffer(raw, dtype=dtype, count=count)
    else:
        vals = np.array(data[pos:].split()[:count], dtype=np.int64)
        if vals.size < count:
            raise ImageFormatError(f"{path}: truncated pixel data")
    img = vals.astype(float).reshape(h, w, ch) / maxval
    return img[..., 0] if ch == 1 else img


def _to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=float) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    a = _to_bytes(img)
    if a.ndim != 2:
        raise ValueError("PGM needs a 2-D image")
    Path(path).write_bytes(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode() + a.tobytes())


def write_ppm(path, img: np.ndarray) -> None:
    a = _to_bytes(img)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError("PPM needs an (H, W, 3) image")
    Path(path).write_bytes(f"P6\n{a.shape[1]} {a.shape[0]}\n255\n".encode() + a.tobytes())


def to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    return img.mean(axis=-1) if img.ndim == 3 else img


# ---------------------------------------------------------------- overlay


def line_pixels(p0, p1) -> np.ndarray:
    """Integer ``(x, y)`` pixels on the segment, one per step of the major axis."""
    x0, y0 = np.round(p0).astype(int)
    x1, y1 = np.round(p1).astype(int)
    n = max(abs(x1 - x0), abs(y1 - y0)) + 1
    xs = np.round(np.linspace(x0, x1, n)).astype(int)
    ys = np.round(np.linspace(y0, y1, n)).astype(int)
    return np.stack([xs, ys], axis=1)


def match_colors(n: int) -> np.ndarray:
    """Distinct saturated RGB colours (golden-ratio hue walk)."""
    h = (np.arange(n) * 0.618033988749895) % 1.0
    k = (np.array([5.0, 3.0, 1.0])[None, :] + h[:, None] * 6.0) % 6.0
    return 1.0 - np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)


def compose_overlay(image_a, image_b, ref_xy, src_xy, colors=None) -> np.ndarray:
    """``(H, Wa + Wb, 3)`` composite with one coloured line per match."""
    a, b = to_gray(image_a), to_gray(image_b)
    h = max(a.shape[0], b.shape[0])
    canvas = np.zeros((h, a.shape[1] + b.shape[1], 3))
    canvas[: a.shape[0], : a.shape[1]] = a[..., None]
    canvas[: b.shape[0], a.shape[1] :] = b[..., None]
    ref_xy = np.asarray(ref_xy, dtype=float).reshape(-1, 2)
    src_xy = np.asarray(src_xy, dtype=float).reshape(-1, 2)
    colors = match_colors(len(ref_xy)) if colors is None else np.asarray(colors, dtype=float)
    off = np.array([a.shape[1], 0.0])
    for p, q, c in zip(ref_xy, src_xy, colors):
        px = line_pixels(p, q + off)
        ok = (px[:, 0] >= 0) & (px[:, 0] < canvas.shape[1]) & (px[:, 1] >= 0) & (px[:, 1] < h)
        canvas[px[ok, 1], px[ok, 0]] = c
    return canvas


def render_overlay(path, image_a, image_b, ref_xy, src_xy, colors=None) -> np.ndarray:
    """Write the composite as binary PPM and return it."""
    canvas = compose_overlay(image_a, image_b, ref_xy, src_xy, colors)
    write_ppm(path, canvas)
    return canvas
