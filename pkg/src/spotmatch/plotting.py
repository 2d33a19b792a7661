"""Report figures for the command-line tools, rendered off-screen to files."""

from __future__ import annotations

import matplotlib
import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .imageio import to_gray


def _figure(ncols: int = 1, width: float = 5.0, height: float = 3.6):
    fig = Figure(figsize=(width * ncols, height), layout="constrained")
    FigureCanvasAgg(fig)
    axes = fig.subplots(1, ncols)
    return fig, np.atleast_1d(axes)


def _save(fig, path) -> None:
    fig.savefig(path, dpi=110)


def plot_bench(rows, path) -> None:
    """Median time against plan length, with a line through the first point."""
    fig, (ax, ax2) = _figure(2)
    n = np.array([r.length for r in rows], dtype=float)
    t = np.array([r.seconds for r in rows]) * 1e3
    ax.loglog(n, t, "o-", label="measured")
    ax.loglog(n, t[0] * n / n[0], "k--", lw=1, label="linear in L")
    ax.set_xlabel("plan length L")
    ax.set_ylabel("median forward time [ms]")
    ax.legend()
    ax2.loglog(n, [r.aux_elements for r in rows], "s-")
    ax2.set_xlabel("plan length L")
    ax2.set_ylabel("auxiliary elements")
    _save(fig, path)


def plot_geometry(report, path) -> None:
    fig, (ax, ax2) = _figure(2)
    e = np.maximum(report.per_trial_max, 1e-17)
    ax.semilogy(np.arange(len(e)), e, ".")
    ax.axhline(1e-6, color="r", lw=1)
    ax.set_xlabel("scene")
    ax.set_ylabel("max relative depth error (exact)")
    ax2.hist(np.clip(report.noisy_errors, 0, 0.5), bins=50)
    ax2.axvline(report.noisy_median, color="r", lw=1, label=f"median {report.noisy_median:.3f}")
    ax2.set_xlabel("relative depth error with noise (clipped at 0.5)")
    ax2.legend()
    _save(fig, path)


def plot_training(history, path, epoch_metrics=None) -> None:
    """Loss terms per step; held-out metrics per epoch when given."""
    h = np.asarray(history, dtype=float).reshape(-1, 6)
    ncols = 2 if epoch_metrics else 1
    fig, axes = _figure(ncols)
    ax = axes[0]
    for col, name in ((1, "total"), (2, "spot"), (3, "coarse"), (4, "fine")):
        ax.semilogy(h[:, 0], np.maximum(h[:, col], 1e-12), lw=0.8, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    if epoch_metrics:
        ax2 = axes[1]
        ep = np.arange(1, len(epoch_metrics) + 1)
        ax2.plot(ep, [m.get("recall", np.nan) for m in epoch_metrics], "o-", label="recall@1 cell")
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("recall")
        ax3 = ax2.twinx()
        ax3.plot(ep, [m.get("epe_median", np.nan) for m in epoch_metrics], "s--", color="C1", label="EPE median")
        ax3.set_ylabel("EPE [px]")
        ax2.legend(loc="center right")
    _save(fig, path)


def plot_matches(image_a, image_b, ref_xy, src_xy, path, confidence=None) -> None:
    """Side-by-side view with match lines coloured by confidence."""
    a, b = to_gray(image_a), to_gray(image_b)
    fig, (ax,) = _figure(1, width=8.0, height=8.0 * max(a.shape[0], b.shape[0]) / (a.shape[1] + b.shape[1]) + 0.6)
    h = max(a.shape[0], b.shape[0])
    canvas = np.zeros((h, a.shape[1] + b.shape[1]))
    canvas[: a.shape[0], : a.shape[1]] = a
    canvas[: b.shape[0], a.shape[1] :] = b
    ax.imshow(canvas, cmap="gray", vmin=0, vmax=1)
    ref_xy = np.asarray(ref_xy, dtype=float).reshape(-1, 2)
    src_xy = np.asarray(src_xy, dtype=float).reshape(-1, 2)
    conf = np.ones(len(ref_xy)) if confidence is None else np.asarray(confidence, dtype=float)
    cmap = matplotlib.colormaps["viridis"]
    for p, q, c in zip(ref_xy, src_xy, conf):
        ax.plot([p[0], q[0] + a.shape[1]], [p[1], q[1]], color=cmap(float(np.clip(c, 0, 1))), lw=0.7)
    ax.set_title(f"{len(ref_xy)} matches")
    ax.set_axis_off()
    _save(fig, path)
