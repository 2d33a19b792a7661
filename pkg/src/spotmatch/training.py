"""Losses, supervision sampling, the optimizer loop and checkpoint files."""

from __future__ import annotations

import math
import os
import struct
import sys
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import aggregation as agg
from . import coarse, fine, geometry
from . import model as mdl
from .numerics import NonFiniteError

# ------------------------------------------------------------ ground truth


@dataclass
class GroundTruth:
    ref_index: np.ndarray  # coarse reference cells with a unique source cell
    src_index: np.ndarray
    fine_target: np.ndarray  # (n, 2) source pixel of each reference fine anchor
    fine_valid: np.ndarray  # (n,) anchor visible in the source image
    depth_ratio: np.ndarray  # (n,) d_i / d_j at the anchor
    coarse_shape: tuple[int, int]

    def __len__(self) -> int:
        return int(self.ref_index.size)

    def subset(self, idx) -> "GroundTruth":
        idx = np.asarray(idx, dtype=np.int64)
        return GroundTruth(
            self.ref_index[idx],
            self.src_index[idx],
            self.fine_target[idx],
            self.fine_valid[idx],
            self.depth_ratio[idx],
            self.coarse_shape,
        )


def derive_ground_truth(pair, coarse_shape) -> GroundTruth:
    """Warp every coarse cell centre, bin it into a source cell and drop collisions.

    ``pair`` provides ``correspond(points) -> (points, ok)`` and
    ``depth_ratio(points)``.
    """
    hc, wc = coarse_shape
    stride = coarse.COARSE_STRIDE
    cells = np.arange(hc * wc)
    q, ok = pair.correspond(coarse.cell_centers(np.stack(np.divmod(cells, wc), axis=1), stride))
    col = np.floor((q[:, 0] + 0.5) / stride)
    row = np.floor((q[:, 1] + 0.5) / stride)
    ok &= (col >= 0) & (col < wc) & (row >= 0) & (row < hc)
    src = np.where(ok, row * wc + col, -1).astype(np.int64)
    uniq, counts = np.unique(src[ok], return_counts=True)
    ok &= np.isin(src, uniq[counts == 1])
    ref = cells[ok]
    anchors = mdl.anchor_points(ref, wc)
    target, vis = pair.correspond(anchors)
    ratio = np.asarray(pair.depth_ratio(anchors), dtype=float)
    vis = vis & np.isfinite(ratio) & (ratio > 0)
    ratio = np.where(vis, ratio, 1.0)
    target = np.where(vis[:, None], target, 0.0)
    return GroundTruth(ref, src[ok], target, vis, ratio, (hc, wc))


# ----------------------------------------------------------------- losses


def _nll(log_p, ref_index, src_index):
    if len(ref_index) == 0:
        warnings.warn("empty ground truth: loss set to zero", RuntimeWarning, stacklevel=3)
        return 0.0, np.zeros_like(log_p)
    n = len(ref_index)
    grad = np.zeros_like(log_p)
    np.add.at(grad, (ref_index, src_index), -1.0 / n)
    return float(-np.mean(log_p[ref_index, src_index])), grad


def coarse_loss(log_pc, ref_index, src_index) -> float:
    """``-mean log P_c`` over ground-truth pairs."""
    return _nll(log_pc, ref_index, src_index)[0]


def coarse_loss_grad(log_pc, ref_index, src_index):
    return _nll(log_pc, ref_index, src_index)


def spot_loss(log_spot, ref_index, src_index) -> float:
    """Mean over blocks and both directions of ``-mean log P_s`` on ground truth.

    ``log_spot`` is a list of ``(log P_s ref->src, log P_s src->ref)``.
    """
    return spot_loss_grad(log_spot, ref_index, src_index)[0]


def spot_loss_grad(log_spot, ref_index, src_index):
    if not log_spot:
        return 0.0, []
    n = 2 * len(log_spot)
    total, grads = 0.0, []
    for lp_ref, lp_src in log_spot:
        a, ga = _nll(lp_ref, ref_index, src_index)
        b, gb = _nll(lp_src, src_index, ref_index)
        total += a + b
        grads.append((ga / n, gb / n))
    return total / n, grads


SIGMA2_FLOOR = 1e-6


def fine_loss(pred, target, variance) -> float:
    """``mean (1/sigma^2) |pred - target|^2`` with the variance floored."""
    return fine_loss_grad(pred, target, variance)[0]


def fine_loss_grad(pred, target, variance):
    pred = np.asarray(pred, dtype=float).reshape(-1, 2)
    if pred.shape[0] == 0:
        return 0.0, np.zeros_like(pred)
    w = 1.0 / np.maximum(np.asarray(variance, dtype=float), SIGMA2_FLOOR)
    diff = pred - np.asarray(target, dtype=float).reshape(-1, 2)
    n = pred.shape[0]
    return float(np.mean(w * (diff**2).sum(1))), 2.0 * w[:, None] * diff / n


def total_loss(l_s: float, l_c: float, l_f: float) -> float:
    return l_s + l_c + l_f


# --------------------------------------------------------------- sampling


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    warmup_steps: int = 200
    epochs: int = 10
    batch_size: int = 1
    coarse_ratio: float = 0.5
    fine_ratio: float = 0.2
    fine_budget: int | None = None  # maximum fine matches; defaults to the coarse cell count
    decay_every: int = 3
    decay: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = 10.0
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.coarse_ratio <= 1 and 0 < self.fine_ratio <= 1):
            raise ValueError("sampling ratios must lie in (0, 1]")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 0 or self.warmup_steps < 0:
            raise ValueError("batch size, epochs and warm-up must be non-negative")


@dataclass
class Supervision:
    coarse: GroundTruth
    fine: GroundTruth
    sizes: np.ndarray  # teacher-forced source grid size per fine match


def reachable(gt: GroundTruth, sizes: np.ndarray) -> np.ndarray:
    """Fine targets inside the span of the source grid's cell centres."""
    wc = gt.coarse_shape[1]
    centre = mdl.anchor_points(gt.src_index, wc)
    half = (sizes // 2) * coarse.FINE_STRIDE
    return gt.fine_valid & np.all(np.abs(gt.fine_target - centre) <= half[:, None], axis=1)


def sample_supervision(gt: GroundTruth, cfg: TrainConfig, seed, s_i: int = 5, clamp=(1.0, 3.0)) -> Supervision:
    """Uniformly sample ``ceil(coarse_ratio * n)`` coarse pairs and up to
    ``ceil(fine_ratio * budget)`` of them with reachable fine targets."""
    rng = np.random.default_rng(seed)
    n = len(gt)
    m = math.ceil(cfg.coarse_ratio * n)
    pick = np.sort(rng.choice(n, size=m, replace=False)) if m < n else np.arange(n)
    cgt = gt.subset(pick)
    sizes = geometry.depth_ratio_to_size(cgt.depth_ratio, np.ones(len(cgt)), s_i, clamp, cgt.fine_valid)
    ok = np.flatnonzero(reachable(cgt, sizes))
    budget = cfg.fine_budget if cfg.fine_budget is not None else gt.coarse_shape[0] * gt.coarse_shape[1]
    cap = math.ceil(cfg.fine_ratio * budget)
    if ok.size > cap:
        ok = np.sort(rng.choice(ok, size=cap, replace=False))
    return Supervision(cgt, cgt.subset(ok), sizes[ok])


# ---------------------------------------------------------- loss and grad


@dataclass
class LossBreakdown:
    total: float
    l_s: float
    l_c: float
    l_f: float


def loss_and_grad(params: dict, image_ref, image_src, sup: Supervision, cfg: mdl.ModelConfig, need_grad: bool = True):
    """Forward the whole model on one pair; returns ``(LossBreakdown, grads)``."""
    co = mdl.coarse_forward(params, image_ref, image_src, cfg)
    c = sup.coarse
    l_c, d_pc = coarse_loss_grad(co.log_pc, c.ref_index, c.src_index)
    l_s, d_spot = spot_loss_grad(co.log_spot, c.ref_index, c.src_index)
    f = sup.fine
    wc = co.coarse_shape[1]
    fp = agg.sub(params, "fine")
    l_f, d_f2 = 0.0, None
    if len(f):
        res, fcache = fine.refine_forward(
            co.f2[0], co.f2[1], mdl.ref_anchor_cells(f.ref_index, wc), mdl.ref_anchor_cells(f.src_index, wc),
            sup.sizes, fp, cfg.fine,
        )
        l_f, dmu = fine_loss_grad(res.coords, f.fine_target, res.variance)
    losses = LossBreakdown(total_loss(l_s, l_c, l_f), l_s, l_c, l_f)
    if not need_grad:
        return losses, None
    grads = {}
    if len(f):
        d_ref2, d_src2, g = fine.refine_backward(dmu, fp, cfg.fine, fcache)
        grads.update({f"fine.{k}": v for k, v in g.items()})
        d_f2 = np.stack([d_ref2, d_src2])
    grads.update(mdl.coarse_backward(co, d_pc, d_spot, d_f2, params, cfg))
    for k, v in params.items():
        if k not in grads:
            grads[k] = np.zeros_like(v)
    return losses, grads


# -------------------------------------------------------------- optimizer


class Adam:
    """First/second-moment adaptive steps with bias correction."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in sorted(params):
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            if lr:
                params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def learning_rate(cfg: TrainConfig, step: int, epoch: int) -> float:
    """Linear warm-up over ``warmup_steps`` then ``decay`` every ``decay_every`` epochs."""
    warm = min(1.0, (step + 1) / cfg.warmup_steps) if cfg.warmup_steps else 1.0
    return cfg.lr * warm * cfg.decay ** (epoch // cfg.decay_every)


def clip_gradients(grads: dict, max_norm: float | None) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss; carries the path of the diagnostic dump."""


@dataclass
class TrainingSample:
    image_ref: np.ndarray
    image_src: np.ndarray
    gt: GroundTruth
    pair: object = None


@dataclass
class TrainResult:
    params: dict
    history: list = field(default_factory=list)  # (step, total, l_s, l_c, l_f, lr)
    epoch_metrics: list = field(default_factory=list)


def _dump(path, params, sample, losses, step):
    arrays = {f"param/{k}": v for k, v in params.items()}
    arrays.update(image_ref=sample.image_ref, image_src=sample.image_src, step=np.array(step))
    arrays["losses"] = np.array([losses.total, losses.l_s, losses.l_c, losses.l_f])
    np.savez(path, **arrays)


def train_loop(
    dataset,
    params: dict,
    model_cfg: mdl.ModelConfig,
    cfg: TrainConfig,
    log=None,
    evaluate=None,
    checkpoint: str | os.PathLike | None = None,
    dump_path: str | os.PathLike = "nonfinite_dump.npz",
) -> TrainResult:
    """Adam on the total loss, one log line per step.

    ``evaluate(params) -> dict`` runs after every epoch when given.  The
    sample order and supervision subsets derive from ``cfg.seed`` only.
    """
    log = log if log is not None else (lambda line: None)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    result = TrainResult(params)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            acc, parts = None, np.zeros(4)
            for i in batch:
                s = dataset[i]
                sup = sample_supervision(s.gt, cfg, rng.integers(2**63), model_cfg.fine.s_i, model_cfg.fine.clamp)
                try:
                    losses, grads = loss_and_grad(params, s.image_ref, s.image_src, sup, model_cfg)
                except NonFiniteError:
                    losses, grads = LossBreakdown(math.nan, math.nan, math.nan, math.nan), None
                if not math.isfinite(losses.total):
                    _dump(dump_path, params, s, losses, step)
                    raise TrainingAborted(f"non-finite loss at step {step}; diagnostics written to {dump_path}")
                parts += [losses.total, losses.l_s, losses.l_c, losses.l_f]
                acc = grads if acc is None else {k: acc[k] + grads[k] for k in acc}
            nb = len(batch)
            acc = {k: v / nb for k, v in acc.items()}
            parts /= nb
            clip_gradients(acc, cfg.grad_clip)
            lr = learning_rate(cfg, step, epoch)
            opt.step(params, acc, lr)
            result.history.append((step, *parts.tolist(), lr))
            log(f"{step} {parts[0]:.6f} {parts[1]:.6f} {parts[2]:.6f} {parts[3]:.6f} {lr:.6g}")
            step += 1
        if evaluate is not None:
            metrics = dict(epoch=epoch, mean_loss=float(np.mean([h[1] for h in result.history[-len(order):]])))
            metrics.update(evaluate(params))
            result.epoch_metrics.append(metrics)
            log("# epoch " + " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in metrics.items()))
        if checkpoint is not None:
            save_checkpoint(checkpoint, params, model_cfg.digest())
    return result


# ------------------------------------------------------------- checkpoint

MAGIC = b"ASTRCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict, digest: str) -> None:
    """Write the parameter blocks atomically (temp file + rename)."""
    path = Path(path)
    d = digest.encode("ascii")
    chunks = [MAGIC, struct.pack("<IH", VERSION, len(d)), d, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(chunks))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, expected_digest: str | None = None):
    """Returns ``(params, digest)``; raises :class:`CheckpointError` on a bad
    file or when ``expected_digest`` does not match."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        version, dl = struct.unpack_from("<IH", data, 8)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 14
        digest = data[pos : pos + dl].decode("ascii")
        pos += dl
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (nl,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + nl].decode("utf-8")
            pos += nl
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            n = int(np.prod(shape)) if rank else 1
            params[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(float)
            pos += 8 * n
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(data):
        raise CheckpointError("trailing bytes in checkpoint")
    if expected_digest is not None and digest != expected_digest:
        raise CheckpointError("checkpoint was written for a different model configuration")
    return params, digest


def stderr_log(line: str) -> None:
    print(line, file=sys.stderr)
