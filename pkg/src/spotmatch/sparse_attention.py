"""Gather / grouped-softmax / scatter attention over an explicit pair list.

Only the ``L_m`` query-key products named by a :class:`SparseAttentionPlan`
are ever formed.  Entries are kept sorted by ``(query, key)`` so that every
query owns one contiguous group; reductions run with ``np.*.reduceat`` in
ascending plan order, which keeps results bit-reproducible.

Tensors use the ``(tokens, heads, dims)`` layout at the interface.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import check_finite

#: pairs processed per gather chunk; bounds the ``(chunk, heads, dims)`` workspace
CHUNK = 1024


@dataclass(frozen=True, eq=False)
class SparseAttentionPlan:
    query_index: np.ndarray  # M_q, int64, sorted
    key_index: np.ndarray  # M_k, int64, sorted within each query group
    n_queries: int
    n_keys: int
    group_start: np.ndarray  # CSR offsets, length n_queries + 1
    key_order: np.ndarray = field(repr=False)  # stable permutation sorting by key
    key_start: np.ndarray = field(repr=False)  # CSR offsets over key_order

    @property
    def length(self) -> int:
        return int(self.query_index.size)

    def group_sizes(self) -> np.ndarray:
        return np.diff(self.group_start)

    def empty_queries(self) -> np.ndarray:
        return np.flatnonzero(self.group_sizes() == 0)

    def pairs(self) -> np.ndarray:
        return np.stack([self.query_index, self.key_index], axis=1)

    def __eq__(self, other):
        if not isinstance(other, SparseAttentionPlan):
            return NotImplemented
        return (
            self.n_queries == other.n_queries
            and self.n_keys == other.n_keys
            and np.array_equal(self.query_index, other.query_index)
            and np.array_equal(self.key_index, other.key_index)
        )


def plan_from_arrays(queries, keys, n_queries: int, n_keys: int) -> SparseAttentionPlan:
    """Build a plan from parallel index arrays (duplicates and order are irrelevant)."""
    q = np.asarray(queries, dtype=np.int64).ravel()
    k = np.asarray(keys, dtype=np.int64).ravel()
    if q.shape != k.shape:
        raise ValueError("query and key index arrays differ in length")
    if q.size and (q.min() < 0 or q.max() >= n_queries or k.min() < 0 or k.max() >= n_keys):
        raise IndexError("plan index out of range")
    codes = np.unique(q * n_keys + k)
    q, k = codes // n_keys, codes % n_keys
    group_start = np.searchsorted(q, np.arange(n_queries + 1)).astype(np.int64)
    key_order = np.argsort(k, kind="stable")
    key_start = np.searchsorted(k[key_order], np.arange(n_keys + 1)).astype(np.int64)
    return SparseAttentionPlan(q, k, int(n_queries), int(n_keys), group_start, key_order, key_start)


def build_plan(pairs, n_queries: int, n_keys: int) -> SparseAttentionPlan:
    """Sorted, de-duplicated plan from an iterable of ``(query, key)`` pairs."""
    arr = np.asarray(list(pairs) if not isinstance(pairs, np.ndarray) else pairs, dtype=np.int64)
    arr = arr.reshape(-1, 2)
    return plan_from_arrays(arr[:, 0], arr[:, 1], n_queries, n_keys)


def dense_plan(n_queries: int, n_keys: int) -> SparseAttentionPlan:
    q = np.repeat(np.arange(n_queries), n_keys)
    k = np.tile(np.arange(n_keys), n_queries)
    return plan_from_arrays(q, k, n_queries, n_keys)


# ------------------------------------------------------------ reductions
#
# Internally every per-pair quantity is stored feature-major, ``(features, L_m)``,
# so that segment reductions run along the contiguous last axis.


def _segments(starts: np.ndarray):
    """Offsets and lengths of the non-empty groups of a CSR boundary array."""
    sizes = np.diff(starts)
    nonempty = sizes > 0
    return starts[:-1][nonempty], sizes[nonempty], nonempty


def _softmax_last(v: np.ndarray, starts: np.ndarray) -> np.ndarray:
    offs, sizes, _ = _segments(starts)
    gmax = np.maximum.reduceat(v, offs, axis=-1)
    e = np.exp(v - np.repeat(gmax, sizes, axis=-1))
    gsum = np.add.reduceat(e, offs, axis=-1)
    return e / np.repeat(gsum, sizes, axis=-1)


def grouped_softmax(values, boundaries) -> np.ndarray:
    """Softmax within each contiguous group ``values[b[g]:b[g+1]]``.

    Extra trailing axes of ``values`` (e.g. heads) are handled independently.
    """
    v = np.asarray(values, dtype=float)
    b = np.asarray(boundaries, dtype=np.int64)
    if v.shape[0] == 0:
        return v.copy()
    flat = np.ascontiguousarray(v.reshape(v.shape[0], -1).T)
    return _softmax_last(flat, b).T.reshape(v.shape)


def _segment_sum(x: np.ndarray, starts: np.ndarray, lo: int, hi: int, out: np.ndarray) -> None:
    """Write the sums of ``x`` (features, hi - lo) over the groups starting in
    ``[lo, hi)`` into the matching columns of ``out``."""
    head = starts[:-1]
    sel = (head >= lo) & (head < hi) & (np.diff(starts) > 0)
    if np.any(sel):
        out[:, sel] = np.add.reduceat(x, head[sel] - lo, axis=-1)


def _chunk_bounds(starts: np.ndarray, total: int, size: int):
    """Chunk edges aligned to group boundaries, about ``size`` entries apart."""
    if total == 0:
        return []
    targets = np.arange(size, total, size)
    cuts = np.unique(starts[np.searchsorted(starts, targets)]) if targets.size else np.empty(0, int)
    cuts = cuts[(cuts > 0) & (cuts < total)]
    edges = np.concatenate([[0], cuts, [total]])
    return list(zip(edges[:-1], edges[1:]))


def _feature_major(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(x.shape[0], -1).T)


def _token_major(xt: np.ndarray, heads: int) -> np.ndarray:
    return xt.T.reshape(xt.shape[1], heads, -1)


def _head_dot(a: np.ndarray, b: np.ndarray, heads: int) -> np.ndarray:
    """Per-head inner products of two ``(heads * dims, n)`` arrays -> ``(heads, n)``."""
    n = a.shape[-1]
    return np.einsum("hdn,hdn->hn", a.reshape(heads, -1, n), b.reshape(heads, -1, n))


def _scale_heads(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Multiply each head's rows of ``x (heads * dims, n)`` by ``w (heads, n)``."""
    n = x.shape[-1]
    return (x.reshape(w.shape[0], -1, n) * w[:, None, :]).reshape(x.shape)


# --------------------------------------------------------------- operator


@dataclass
class SparseAttentionResult:
    output: np.ndarray  # (N_q, heads, dims)
    weights: np.ndarray  # (L_m, heads) grouped-softmax probabilities
    empty_queries: np.ndarray
    aux_elements: int  # plan-proportional buffer elements (logits + weights)
    workspace_elements: int  # largest per-chunk gather buffer


def _check_layout(q, k, v, plan):
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ValueError("expected (tokens, heads, dims) tensors")
    if k.shape[:2] != v.shape[:2] or q.shape[1:] != k.shape[1:]:
        raise ValueError(f"layout mismatch: Q{q.shape} K{k.shape} V{v.shape}")
    if q.shape[0] != plan.n_queries or k.shape[0] != plan.n_keys:
        raise ValueError("token counts disagree with the plan")


def _logits_fm(qt, kt, plan, heads, scale, chunk):
    logits = np.empty((heads, plan.length))
    workspace = 0
    for lo in range(0, plan.length, chunk):
        hi = min(lo + chunk, plan.length)
        qi, ki = qt[:, plan.query_index[lo:hi]], kt[:, plan.key_index[lo:hi]]
        workspace = max(workspace, qi.size + ki.size)
        logits[:, lo:hi] = _head_dot(qi, ki, heads) * scale
    return logits, workspace


def sparse_logits(q, k, plan: SparseAttentionPlan, scale: float, chunk: int = CHUNK):
    """Step 1: ``attn[i] = scale * <Q[M_q[i]], K[M_k[i]]>`` per head, ``(L_m, heads)``."""
    logits, workspace = _logits_fm(_feature_major(q), _feature_major(k), plan, q.shape[1], scale, chunk)
    return logits.T, workspace


def sparse_forward(q, k, v, plan: SparseAttentionPlan, scale: float | None = None, chunk: int = CHUNK):
    """``O[q] = sum_{M_q[i]=q} softmax_group(attn)[i] * V[M_k[i]]``.

    Queries without plan entries receive zeros and are listed in
    ``empty_queries``.  ``scale`` defaults to ``1/sqrt(dims)``.
    """
    q, k, v = (np.asarray(a, dtype=float) for a in (q, k, v))
    _check_layout(q, k, v, plan)
    heads, dims = q.shape[1], q.shape[2]
    scale = 1.0 / np.sqrt(dims) if scale is None else scale
    logits, workspace = _logits_fm(_feature_major(q), _feature_major(k), plan, heads, scale, chunk)
    check_finite(logits, "attention logits")
    weights = _softmax_last(logits, plan.group_start) if plan.length else logits.copy()
    vt = _feature_major(v)
    out = np.zeros((heads * dims, plan.n_queries))
    for lo, hi in _chunk_bounds(plan.group_start, plan.length, chunk):
        contrib = _scale_heads(vt[:, plan.key_index[lo:hi]], weights[:, lo:hi])
        workspace = max(workspace, contrib.size)
        _segment_sum(contrib, plan.group_start, lo, hi, out)
    return SparseAttentionResult(
        output=_token_major(out, heads),
        weights=weights.T,
        empty_queries=plan.empty_queries(),
        aux_elements=logits.size + weights.size,
        workspace_elements=workspace,
    )


def sparse_backward(q, k, v, plan: SparseAttentionPlan, scale: float | None, upstream, weights=None, chunk: int = CHUNK):
    """Adjoint of :func:`sparse_forward`; returns ``(dQ, dK, dV)``."""
    q, k, v = (np.asarray(a, dtype=float) for a in (q, k, v))
    _check_layout(q, k, v, plan)
    heads, dims = q.shape[1], q.shape[2]
    scale = 1.0 / np.sqrt(dims) if scale is None else scale
    qt, kt, vt = _feature_major(q), _feature_major(k), _feature_major(v)
    gt = _feature_major(np.asarray(upstream, dtype=float))
    if weights is None:
        w = _softmax_last(_logits_fm(qt, kt, plan, heads, scale, chunk)[0], plan.group_start)
    else:
        w = np.ascontiguousarray(np.asarray(weights).T)
    dw = np.empty((heads, plan.length))
    for lo in range(0, plan.length, chunk):
        hi = min(lo + chunk, plan.length)
        dw[:, lo:hi] = _head_dot(gt[:, plan.query_index[lo:hi]], vt[:, plan.key_index[lo:hi]], heads)
    # softmax adjoint within each query group
    inner = np.zeros((heads, plan.n_queries))
    _segment_sum(w * dw, plan.group_start, 0, plan.length, inner)
    dlogit = w * (dw - inner[:, plan.query_index]) * scale

    dq = np.zeros_like(qt)
    for lo, hi in _chunk_bounds(plan.group_start, plan.length, chunk):
        contrib = _scale_heads(kt[:, plan.key_index[lo:hi]], dlogit[:, lo:hi])
        _segment_sum(contrib, plan.group_start, lo, hi, dq)

    dk = np.zeros_like(kt)
    dv = np.zeros_like(vt)
    order = plan.key_order
    for lo, hi in _chunk_bounds(plan.key_start, plan.length, chunk):
        idx = order[lo:hi]
        qi = plan.query_index[idx]
        _segment_sum(_scale_heads(qt[:, qi], dlogit[:, idx]), plan.key_start, lo, hi, dk)
        _segment_sum(_scale_heads(gt[:, qi], w[:, idx]), plan.key_start, lo, hi, dv)
    return _token_major(dq, heads), _token_major(dk, heads), _token_major(dv, heads)


# ------------------------------------------------------------ debug dumps


def dump_plan(plan: SparseAttentionPlan, path) -> None:
    lines = [f"{plan.n_queries} {plan.n_keys} {plan.length}"]
    lines += [f"{a} {b}" for a, b in zip(plan.query_index.tolist(), plan.key_index.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def load_plan(path) -> SparseAttentionPlan:
    rows = Path(path).read_text().split("\n")
    n_q, n_k, length = (int(t) for t in rows[0].split())
    body = [r.split() for r in rows[1 : 1 + length]]
    arr = np.array(body, dtype=np.int64).reshape(-1, 2)
    if arr.shape[0] != length:
        raise ValueError(f"plan file declares {length} pairs, found {arr.shape[0]}")
    return plan_from_arrays(arr[:, 0], arr[:, 1], n_q, n_k)
