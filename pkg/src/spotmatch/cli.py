"""``spotmatch`` command line.

Exit codes: 0 success, 1 usage error or unreadable input (message on
stderr), 2 verification failure.  Reports are tab-separated on stdout;
``--plot`` additionally renders a figure to the given file.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import coarse, geometry, imageio, oracles
from . import config as cfgmod
from . import evaluation as ev
from . import model as mdl
from . import training as tr

EXIT_OK, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _sizes(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spotmatch", description="Spot-guided sparse attention matcher on a desk budget.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    m = sub.add_parser("match", help="match two PGM/PPM images")
    m.add_argument("image_a")
    m.add_argument("image_b")
    m.add_argument("--intrinsics", nargs=2, metavar=("FILE_A", "FILE_B"))
    m.add_argument("--ckpt", help="checkpoint; untrained weights when omitted")
    m.add_argument("--config", help="key = value run configuration")
    m.add_argument("--out", help="write matches here instead of stdout")
    m.add_argument("--viz", help="side-by-side PPM overlay")
    m.add_argument("--plot", help="matplotlib figure of the matches")
    m.add_argument("--fixed-grids", action="store_true", help="disable adaptive source grid sizes")

    t = sub.add_parser("train-toy", help="train on synthetic warp pairs")
    t.add_argument("--config")
    t.add_argument("--out", help="checkpoint path (default: io.checkpoint or toy.ckpt)")
    t.add_argument("--plot", help="training curves figure")
    t.add_argument("--no-eval", action="store_true", help="skip the per-epoch held-out evaluation")

    g = sub.add_parser("verify-geometry", help="depth recovery and grid sizing on exact scenes")
    g.add_argument("--trials", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", type=float, default=0.5, help="coordinate noise sigma in pixels")
    g.add_argument("--plot")

    b = sub.add_parser("bench-sparse", help="sparse attention time against plan length")
    b.add_argument("--sizes", type=_sizes, default=[16384, 32768, 65536])
    b.add_argument("--tokens", type=int, default=1024)
    b.add_argument("--heads", type=int, default=4)
    b.add_argument("--dims", type=int, default=16)
    b.add_argument("--repeats", type=int, default=20)
    b.add_argument("--plot")

    s = sub.add_parser("selftest", help="run the reference checks")
    s.add_argument("--seed", type=int, default=0)
    return p


# ---------------------------------------------------------------- helpers


def _out(line: str = "") -> None:
    print(line, flush=True)


def _err(line: str) -> None:
    print(line, file=sys.stderr, flush=True)


def _load_config(path) -> cfgmod.RunConfig:
    if path is None:
        return cfgmod.RunConfig()
    try:
        return cfgmod.load_config(path)
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    except cfgmod.ConfigError as exc:
        raise UsageError(str(exc)) from None


def _read_image(path) -> np.ndarray:
    try:
        return imageio.read_pnm(path)
    except OSError as exc:
        raise UsageError(f"cannot read image: {exc}") from None
    except imageio.ImageFormatError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------- commands


def cmd_match(a) -> int:
    run = _load_config(a.config)
    img_a, img_b = _read_image(a.image_a), _read_image(a.image_b)
    if img_a.shape[:2] != img_b.shape[:2]:
        raise UsageError(f"image extents differ: {img_a.shape[:2]} vs {img_b.shape[:2]}")
    K_i = K_j = None
    if a.intrinsics:
        try:
            K_i, K_j = (geometry.read_intrinsics(f) for f in a.intrinsics)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read intrinsics: {exc}") from None
    ckpt = a.ckpt or run.checkpoint or None
    if ckpt:
        try:
            params, _ = tr.load_checkpoint(ckpt, run.model.digest())
        except (OSError, tr.CheckpointError) as exc:
            raise UsageError(f"cannot load checkpoint: {exc}") from None
    else:
        _err("note: no checkpoint given, using untrained weights")
        params = mdl.init_model(run.model, run.seed)
    try:
        out = mdl.match(params, img_a, img_b, run.model, K_i, K_j, adaptive=not a.fixed_grids, ransac=run.ransac)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    conf = out.matches.confidence
    _err(f"note: {len(conf)} matches, {out.note}")
    if a.out:
        coarse.write_matches(a.out, out.ref_points, out.src_points, conf)
    else:
        _out("# x_ref\ty_ref\tx_src\ty_src\tconfidence\tgrid")
        for p, q, c, s in zip(out.ref_points, out.src_points, conf, out.sizes):
            _out(f"{p[0]:.4f}\t{p[1]:.4f}\t{q[0]:.4f}\t{q[1]:.4f}\t{c:.6f}\t{s}")
    if a.viz:
        imageio.render_overlay(a.viz, img_a, img_b, out.ref_points, out.src_points)
    if a.plot:
        from .plotting import plot_matches

        plot_matches(img_a, img_b, out.ref_points, out.src_points, a.plot, conf)
    return EXIT_OK


def cmd_train(a) -> int:
    run = _load_config(a.config)
    d = run.data
    path = a.out or run.checkpoint or "toy.ckpt"
    _err(f"note: generating {d.pairs} training and {d.held_out} held-out pairs")
    scale = (d.scale_min, d.scale_max)
    train = ev.warp_dataset(d.pairs, d.seed, d.size, scale, d.max_rotation)
    held = ev.warp_dataset(d.held_out, d.held_out_seed, d.size, scale, d.max_rotation) if d.held_out else []
    params = mdl.init_model(run.model, run.seed)
    log_fh = open(run.log, "w") if run.log else None

    def log(line):
        _out(line)
        if log_fh:
            log_fh.write(line + "\n")

    evaluate = None if (a.no_eval or not held) else (lambda p: ev.evaluate(p, held, run.model))
    _out("# step\ttotal\tspot\tcoarse\tfine\tlr")
    try:
        res = tr.train_loop(
            train, params, run.model, run.train, log=lambda s: log(s.replace(" ", "\t")), evaluate=evaluate, checkpoint=path
        )
    except tr.TrainingAborted as exc:
        _err(str(exc))
        return EXIT_VERIFY
    finally:
        if log_fh:
            log_fh.close()
    if res.epoch_metrics:
        last = res.epoch_metrics[-1]
        _out(f"recall\t{last['recall']:.6f}")
        _out(f"epe_median\t{last['epe_median']:.6f}")
    _out(f"checkpoint\t{path}")
    if a.plot:
        from .plotting import plot_training

        plot_training(res.history, a.plot, res.epoch_metrics)
    return EXIT_OK


def cmd_verify_geometry(a) -> int:
    if a.trials < 1:
        raise UsageError("--trials must be positive")
    rep = oracles.geometry_suite(a.trials, a.seed, a.noise)
    _out("# trial\tmax_rel_depth_error")
    for i, e in enumerate(rep.per_trial_max):
        _out(f"{i}\t{e:.3e}")
    _out(f"matches\t{rep.matches}")
    _out(f"max_rel_depth_error\t{rep.max_rel_error:.3e}")
    _out(f"share_below_1e-6\t{rep.share_within:.6f}")
    _out(f"noisy_median_rel_error\t{rep.noisy_median:.6f}")
    _out(f"grid_sizes_consistent\t{rep.sizes_ok}")
    _out(f"status\t{'PASS' if rep.passed else 'FAIL'}")
    if a.plot:
        from .plotting import plot_geometry

        plot_geometry(rep, a.plot)
    return EXIT_OK if rep.passed else EXIT_VERIFY


def cmd_bench(a) -> int:
    need = max(a.sizes)
    if need > a.tokens * a.tokens:
        raise UsageError(f"plan length {need} exceeds tokens^2 = {a.tokens * a.tokens}")
    rows = oracles.bench_sparse(a.sizes, a.tokens, a.heads, a.dims, a.repeats)
    _out("# plan_length\tmedian_seconds\taux_elements")
    for r in rows:
        _out(f"{r.length}\t{r.seconds:.6e}\t{r.aux_elements}")
    ok = True
    _out("# from\tto\ttime_ratio\taux_ratio")
    for x, y in zip(rows, rows[1:]):
        ratio = y.seconds / x.seconds
        _out(f"{x.length}\t{y.length}\t{ratio:.3f}\t{y.aux_elements / x.aux_elements:.3f}")
        if y.length == 2 * x.length:
            ok &= 1.5 <= ratio <= 2.5 and y.aux_elements == 2 * x.aux_elements
    _out(f"status\t{'PASS' if ok else 'FAIL'}")
    if a.plot:
        from .plotting import plot_bench

        plot_bench(rows, a.plot)
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_selftest(a) -> int:
    results = oracles.run_checks(a.seed)
    for r in results:
        _out(r.line())
    failed = sum(not r.passed for r in results)
    _out(f"status\t{'PASS' if not failed else 'FAIL'}\t{len(results) - failed}/{len(results)}")
    return EXIT_OK if not failed else EXIT_VERIFY


COMMANDS = {
    "match": cmd_match,
    "train-toy": cmd_train,
    "verify-geometry": cmd_verify_geometry,
    "bench-sparse": cmd_bench,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        _err(str(exc))
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
