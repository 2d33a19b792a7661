"""Central finite-difference checks for the hand-written adjoints."""

from __future__ import annotations

import numpy as np


def numerical_gradient(f, x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Element-wise central differences of scalar ``f()`` w.r.t. ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


def directional_check(f, arrays: dict, grads: dict, rng, eps: float = 1e-4, n_dirs: int = 1) -> dict:
    """Compare ``<grad, u>`` against ``(f(x+eps u) - f(x-eps u)) / 2 eps`` for random ``u``.

    One random unit direction per array; arrays are perturbed in place and
    restored.  Returns ``{name: relative error}``.
    """
    out = {}
    for name, x in arrays.items():
        worst = 0.0
        for _ in range(n_dirs):
            u = rng.standard_normal(x.shape)
            u /= np.linalg.norm(u)
            base = x.copy()
            x[...] = base + eps * u
            fp = f()
            x[...] = base - eps * u
            fm = f()
            x[...] = base
            num = (fp - fm) / (2 * eps)
            ana = float(np.sum(grads.get(name, np.zeros_like(x)) * u))
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-7))
        out[name] = worst
    return out
