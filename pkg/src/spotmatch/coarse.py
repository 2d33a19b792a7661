"""Coarse matching on 1/8-resolution features: similarity, dual-softmax, MNN."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import check_finite, log_softmax

COARSE_STRIDE = 8
FINE_STRIDE = 2


def similarity_matrix(f_ref: np.ndarray, f_src: np.ndarray, temperature: float) -> np.ndarray:
    """``S(i, j) = temperature * <f_ref[i], f_src[j]>`` over flattened cells."""
    a = f_ref.reshape(-1, f_ref.shape[-1])
    b = f_src.reshape(-1, f_src.shape[-1])
    if a.shape[1] != b.shape[1]:
        raise ValueError("feature channel counts differ")
    return temperature * (a @ b.T)


def dual_softmax(s: np.ndarray) -> np.ndarray:
    """Row softmax times column softmax, elementwise."""
    return np.exp(dual_log_softmax(s)[0])


def dual_log_softmax(s: np.ndarray):
    """``log P_c`` computed in the log domain; returns ``(log_p, (row, col))``
    where ``row``/``col`` are the two softmax factors (kept for the adjoint)."""
    s = np.asarray(s, dtype=float)
    check_finite(s, "similarity matrix")
    lr = log_softmax(s, axis=1)
    lc = log_softmax(s, axis=0)
    return lr + lc, (np.exp(lr), np.exp(lc))


def dual_log_softmax_backward(dlogp: np.ndarray, factors) -> np.ndarray:
    row, col = factors
    return 2.0 * dlogp - row * dlogp.sum(axis=1, keepdims=True) - col * dlogp.sum(axis=0, keepdims=True)


def row_log_softmax(s: np.ndarray):
    """Row-softmax-only alternative for the spot matching matrix."""
    lr = log_softmax(np.asarray(s, dtype=float), axis=1)
    return lr, (np.exp(lr),)


def row_log_softmax_backward(dlogp, factors):
    (row,) = factors
    return dlogp - row * dlogp.sum(axis=1, keepdims=True)


@dataclass
class MatchSet:
    ref_index: np.ndarray  # flattened ref cell indices
    src_index: np.ndarray
    confidence: np.ndarray
    ref_shape: tuple[int, int]  # coarse grid (rows, cols)
    src_shape: tuple[int, int]
    stride: int = COARSE_STRIDE

    def __len__(self) -> int:
        return int(self.ref_index.size)

    def ref_cells(self) -> np.ndarray:
        return np.stack(np.unravel_index(self.ref_index, self.ref_shape), axis=1)

    def src_cells(self) -> np.ndarray:
        return np.stack(np.unravel_index(self.src_index, self.src_shape), axis=1)

    def ref_points(self) -> np.ndarray:
        return cell_centers(self.ref_cells(), self.stride)

    def src_points(self) -> np.ndarray:
        return cell_centers(self.src_cells(), self.stride)


def cell_centers(cells: np.ndarray, stride: int = COARSE_STRIDE) -> np.ndarray:
    """Pixel ``(x, y)`` centres of ``(row, col)`` cells; pixel centres sit on
    integer coordinates."""
    cells = np.asarray(cells, dtype=float).reshape(-1, 2)
    off = (stride - 1) / 2.0
    return np.stack([cells[:, 1] * stride + off, cells[:, 0] * stride + off], axis=1)


def extract_matches(p: np.ndarray, threshold: float = 0.2, ref_shape=None, src_shape=None) -> MatchSet:
    """Mutual nearest neighbours of ``p`` with ``p >= threshold``.

    ``argmax`` returns the first maximal index, which gives the lowest-index
    tie rule.
    """
    p = np.asarray(p, dtype=float)
    n, m = p.shape
    row_best = np.argmax(p, axis=1)
    col_best = np.argmax(p, axis=0)
    i = np.arange(n)
    keep = (col_best[row_best] == i) & (p[i, row_best] >= threshold)
    i = i[keep]
    j = row_best[keep]
    return MatchSet(
        ref_index=i,
        src_index=j,
        confidence=p[i, j],
        ref_shape=tuple(ref_shape) if ref_shape is not None else (n, 1),
        src_shape=tuple(src_shape) if src_shape is not None else (m, 1),
    )


# ------------------------------------------------------------ match export


def write_matches(path, ref_xy: np.ndarray, src_xy: np.ndarray, conf: np.ndarray) -> None:
    """One ``x_ref y_ref x_src y_src conf`` line per match."""
    rows = np.column_stack([ref_xy, src_xy, conf])
    with Path(path).open("w") as fh:
        for r in rows:
            fh.write(f"{r[0]:.4f} {r[1]:.4f} {r[2]:.4f} {r[3]:.4f} {r[4]:.6f}\n")


def read_matches(path):
    """Inverse of :func:`write_matches`; ``#`` lines are comments."""
    rows = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not rows:
        return np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0)
    data = np.loadtxt(rows, ndmin=2)
    return data[:, 0:2], data[:, 2:4], data[:, 4]
