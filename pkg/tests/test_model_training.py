import math

import numpy as np
import pytest

from spotmatch import aggregation as agg
from spotmatch import backbone as bb
from spotmatch import evaluation as ev
from spotmatch import fine
from spotmatch import model as mdl
from spotmatch import spot
from spotmatch import training as tr
from spotmatch.gradcheck import directional_check

TINY = mdl.ModelConfig(
    pyramid=bb.PyramidConfig(channels=(8, 8, 16, 16, 16), coarse_dim=16, fine_dim=8),
    aggregation=agg.AggregationConfig(channels=16, n_heads=2, n_blocks=1),
    fine=fine.FineConfig(channels=8, n_heads=2),
)


@pytest.fixture(scope="module")
def sample():
    return ev.warp_dataset(1, 5, size=64)[0]


class TestConfig:
    def test_digest_tracks_fields(self):
        assert TINY.digest() == mdl.ModelConfig(**{f: getattr(TINY, f) for f in ("pyramid", "aggregation", "fine")}).digest()
        assert TINY.digest() != mdl.ModelConfig(pyramid=TINY.pyramid, aggregation=TINY.aggregation, fine=TINY.fine, threshold=0.3).digest()

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            mdl.ModelConfig(pyramid=TINY.pyramid)

    def test_default_tau(self):
        assert TINY.tau() == 0.25

    def test_standardize(self, rng):
        x = mdl.standardize(rng.random((8, 8, 3)))
        assert x.shape == (8, 8, 1)
        np.testing.assert_allclose([x.mean(), x.std()], [0.0, 1.0], atol=1e-12)
        np.testing.assert_array_equal(mdl.standardize(np.full((4, 4), 3.0)), 0.0)


class TestAnchors:
    def test_anchor_cell_and_point(self):
        np.testing.assert_array_equal(mdl.ref_anchor_cells(np.array([0, 9]), 8), [[2, 2], [6, 6]])
        np.testing.assert_array_equal(mdl.anchor_points(np.array([9]), 8), [[12.5, 12.5]])


class TestGroundTruth:
    def test_identity_warp(self):
        pair = ev.syn.synth_warp_pair(scale=1.0, size=64)
        gt = tr.derive_ground_truth(pair, (8, 8))
        np.testing.assert_array_equal(gt.ref_index, np.arange(64))
        np.testing.assert_array_equal(gt.src_index, np.arange(64))
        np.testing.assert_allclose(gt.depth_ratio, 1.0)
        assert gt.fine_valid.all()

    def test_source_cells_unique(self, sample):
        assert len(np.unique(sample.gt.src_index)) == len(sample.gt)

    def test_supervision_counts(self, sample):
        cfg = tr.TrainConfig(coarse_ratio=0.5, fine_ratio=0.1)
        sup = tr.sample_supervision(sample.gt, cfg, 3)
        assert len(sup.coarse) == math.ceil(0.5 * len(sample.gt))
        assert len(sup.fine) <= math.ceil(0.1 * 64)
        assert tr.reachable(sup.fine, sup.sizes).all()
        assert set(sup.fine.ref_index) <= set(sup.coarse.ref_index)


class TestLosses:
    def test_log_identity(self):
        lp = np.full((3, 3), -1.0)
        assert tr.spot_loss([(lp, lp)], np.array([0, 2]), np.array([1, 0])) == pytest.approx(1.0, abs=1e-15)

    def test_direct_sums(self, rng):
        lp = [tuple(np.log(rng.random((5, 5))) for _ in range(2)) for _ in range(3)]
        r, s = np.array([0, 1, 4]), np.array([2, 2, 3])
        ref = np.mean([-np.mean(a[r, s]) - np.mean(b[s, r]) for a, b in lp]) / 2
        assert tr.spot_loss(lp, r, s) == pytest.approx(ref, abs=1e-12)
        assert tr.coarse_loss(lp[0][0], r, s) == pytest.approx(-np.mean(lp[0][0][r, s]), abs=1e-12)

    def test_fine_loss_direct(self, rng):
        p, t, v = rng.normal(size=(4, 2)), rng.normal(size=(4, 2)), rng.random(4)
        ref = sum(np.sum((p[i] - t[i]) ** 2) / v[i] for i in range(4)) / 4
        assert tr.fine_loss(p, t, v) == pytest.approx(ref, abs=1e-12)
        assert tr.fine_loss(np.zeros((1, 2)), np.ones((1, 2)), [0.0]) == pytest.approx(2e6)

    def test_empty_ground_truth_warns(self):
        with pytest.warns(RuntimeWarning):
            assert tr.coarse_loss(np.zeros((2, 2)), np.zeros(0, int), np.zeros(0, int)) == 0.0

    def test_full_gradient(self, rng, sample, monkeypatch):
        # the fine weight 1/sigma^2 and the spot plans are stop-gradient terms:
        # record them on the base pass and replay them under perturbation
        params = mdl.init_model(TINY, 1)
        sup = tr.sample_supervision(sample.gt, tr.TrainConfig(coarse_ratio=0.3, fine_ratio=0.1), 0)
        seen = {"plans": [], "var": None}
        loss_grad, build = tr.fine_loss_grad, spot.build_spot_plan

        def record_var(pred, target, variance):
            seen["var"] = np.array(variance)
            return loss_grad(pred, target, variance)

        def record_plan(*a, **k):
            seen["plans"].append(build(*a, **k))
            return seen["plans"][-1]

        monkeypatch.setattr(tr, "fine_loss_grad", record_var)
        monkeypatch.setattr(spot, "build_spot_plan", record_plan)
        _, grads = tr.loss_and_grad(params, sample.image_ref, sample.image_src, sup, TINY)
        monkeypatch.setattr(tr, "fine_loss_grad", lambda p, t, v: loss_grad(p, t, seen["var"]))

        def f():
            it = iter(seen["plans"])
            monkeypatch.setattr(spot, "build_spot_plan", lambda *a, **k: next(it))
            return tr.loss_and_grad(params, sample.image_ref, sample.image_src, sup, TINY, need_grad=False)[0].total

        assert seen["var"] is not None and seen["plans"]
        errs = directional_check(f, params, grads, rng, n_dirs=1)
        assert max(errs.values()) < 1e-4, {k: v for k, v in errs.items() if v > 1e-5}


class TestOptimizer:
    def test_schedule(self):
        cfg = tr.TrainConfig(lr=1.0, warmup_steps=4, decay_every=2, decay=0.5)
        assert [tr.learning_rate(cfg, s, 0) for s in range(5)] == [0.25, 0.5, 0.75, 1.0, 1.0]
        assert tr.learning_rate(cfg, 100, 3) == 0.5 and tr.learning_rate(cfg, 100, 4) == 0.25

    def test_clip(self):
        g = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert tr.clip_gradients(g, 1.0) == 5.0
        np.testing.assert_allclose([g["a"][0], g["b"][0]], [0.6, 0.8])

    def test_adam_first_step_is_sign(self):
        p = {"w": np.array([1.0, -2.0, 0.5])}
        tr.Adam(p).step(p, {"w": np.array([0.3, -7.0, 1e-3])}, 0.1)
        np.testing.assert_allclose(p["w"], [0.9, -1.9, 0.4], atol=1e-6)

    @pytest.mark.parametrize("kwargs", [dict(coarse_ratio=0.0), dict(lr=-1.0), dict(batch_size=0)])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            tr.TrainConfig(**kwargs)


class TestLoop:
    def test_overfit_one_sample(self, sample):
        params = mdl.init_model(TINY, 0)
        res = tr.train_loop([sample], params, TINY, tr.TrainConfig(epochs=200, warmup_steps=10, decay_every=1000, lr=3e-3))
        loss = np.array([h[1] for h in res.history])
        below = np.flatnonzero(loss < 0.1 * loss[0])
        assert below.size, "loss never fell below 10% of its initial value"
        assert all(loss[i + 50] < loss[i] for i in range(max(0, below[0] - 50)))

    def test_deterministic(self, sample):
        runs = []
        for _ in range(2):
            params = mdl.init_model(TINY, 0)
            runs.append((tr.train_loop([sample, sample], params, TINY, tr.TrainConfig(epochs=2, seed=4)), params))
        assert runs[0][0].history == runs[1][0].history
        for k in runs[0][1]:
            np.testing.assert_array_equal(runs[0][1][k], runs[1][1][k])

    def test_nonfinite_aborts(self, tmp_path, sample):
        params = mdl.init_model(TINY, 0)
        params["pyr.s0.a.b"] = params["pyr.s0.a.b"] * np.nan
        with pytest.raises(tr.TrainingAborted):
            tr.train_loop([sample], params, TINY, tr.TrainConfig(epochs=1), dump_path=tmp_path / "d.npz")
        assert (tmp_path / "d.npz").exists()

    def test_zero_rate_keeps_parameters(self, sample):
        params = mdl.init_model(TINY, 0)
        before = {k: v.copy() for k, v in params.items()}
        tr.train_loop([sample, sample], params, TINY, tr.TrainConfig(epochs=1, lr=0.0))
        assert all(params[k].tobytes() == before[k].tobytes() for k in params)

    def test_log_and_evaluate_hooks(self, sample):
        lines = []
        res = tr.train_loop([sample], mdl.init_model(TINY, 0), TINY, tr.TrainConfig(epochs=1), log=lines.append, evaluate=lambda p: {"x": 1.5})
        assert len(lines) == 2 and lines[1].startswith("# epoch epoch=0") and "x=1.5" in lines[1]
        assert res.epoch_metrics[0]["x"] == 1.5


class TestCheckpoint:
    def test_bit_identical_round_trip(self, tmp_path):
        params = mdl.init_model(TINY, 2)
        tr.save_checkpoint(tmp_path / "a.ckpt", params, TINY.digest())
        back, digest = tr.load_checkpoint(tmp_path / "a.ckpt", TINY.digest())
        assert digest == TINY.digest() and back.keys() == params.keys()
        for k in params:
            assert back[k].tobytes() == params[k].tobytes()
        tr.save_checkpoint(tmp_path / "b.ckpt", back, digest)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_errors(self, tmp_path):
        tr.save_checkpoint(tmp_path / "a.ckpt", {"w": np.ones(3)}, "abc")
        data = (tmp_path / "a.ckpt").read_bytes()
        with pytest.raises(tr.CheckpointError):
            tr.load_checkpoint(tmp_path / "a.ckpt", "xyz")
        (tmp_path / "t.ckpt").write_bytes(data[:-5])
        with pytest.raises(tr.CheckpointError):
            tr.load_checkpoint(tmp_path / "t.ckpt")
        (tmp_path / "m.ckpt").write_bytes(b"NOTACKPT" + data[8:])
        with pytest.raises(tr.CheckpointError):
            tr.load_checkpoint(tmp_path / "m.ckpt")
        (tmp_path / "x.ckpt").write_bytes(data + b"\0")
        with pytest.raises(tr.CheckpointError):
            tr.load_checkpoint(tmp_path / "x.ckpt")


class TestInference:
    def test_grid_modes(self, sample):
        params = mdl.init_model(TINY, 0)
        a = mdl.match(params, sample.image_ref, sample.image_src, TINY)
        assert a.note == "no intrinsics: fixed grids" and np.all(a.sizes == 5)
        b = mdl.match(params, sample.image_ref, sample.image_src, TINY, adaptive=False)
        assert b.note == "fixed grids"
        c = mdl.match(params, sample.image_ref, sample.image_src, TINY, sizes=7)
        assert c.note == "given grids" and np.all(c.sizes == 7)
        np.testing.assert_array_equal(a.src_points, b.src_points)

    def test_extent_checks(self):
        params = mdl.init_model(TINY, 0)
        with pytest.raises(ValueError):
            mdl.match(params, np.zeros((64, 64)), np.zeros((64, 96)), TINY)
        with pytest.raises(ValueError):
            mdl.match(params, np.zeros((48, 64)), np.zeros((48, 64)), TINY)

    def test_evaluate_rejects_mode(self, sample):
        with pytest.raises(ValueError):
            ev.evaluate_pair(mdl.init_model(TINY, 0), sample, TINY, "magic")
