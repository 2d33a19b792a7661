import numpy as np
import pytest

from spotmatch import cli
from spotmatch import config as cfgmod
from spotmatch import imageio, synthetic
from spotmatch.coarse import read_matches

TINY_TEXT = """\
# a small model for fast runs
model.channels = 8, 8, 16, 16, 16
model.coarse_dim = 16
model.fine_dim = 8
model.heads = 2
model.blocks = 1
model.fine_heads = 2
model.train_size = 64, 64
train.epochs = 1
train.warmup_steps = 2
data.pairs = 2
data.held_out = 1
data.size = 64
"""


class TestConfig:
    def test_empty_is_default(self):
        assert cfgmod.parse_config("# nothing\n\n") == cfgmod.RunConfig()

    def test_sections(self):
        run = cfgmod.parse_config(TINY_TEXT + "spot.top_k = 2\nransac.threshold = 3.0\nseed = 7\nmodel.temperature = none\n")
        assert run.model.pyramid.channels == (8, 8, 16, 16, 16)
        assert run.model.aggregation.channels == 16 and run.model.aggregation.spot.top_k == 2
        assert run.model.fine.channels == 8 and run.model.temperature is None
        assert run.train.epochs == 1 and run.ransac.threshold == 3.0 and run.data.size == 64 and run.seed == 7

    def test_train_keys_follow_dataclass(self):
        assert {"train.lr", "train.grad_clip", "train.fine_budget", "data.held_out_seed"} <= set(cfgmod.KEYS)
        assert cfgmod.parse_config("train.grad_clip = none\n").train.grad_clip is None

    @pytest.mark.parametrize(
        "text,needle",
        [
            ("seed = 1\nbogus = 2\n", ":2: unknown key"),
            ("seed = 1\nseed = 2\n", ":2: repeated key"),
            ("train.epochs = many\n", ":1: bad value"),
            ("just words\n", ":1: expected"),
            ("model.layer_norm = maybe\n", ":1: bad value"),
            ("model.s_i = 4\n", "odd"),
            ("model.clamp = 3, 1\n", "increasing"),
            ("spot.matrix = triple\n", "x.cfg"),
            ("train.coarse_ratio = 2\n", "ratios"),
        ],
    )
    def test_errors(self, text, needle):
        with pytest.raises(cfgmod.ConfigError, match=needle):
            cfgmod.parse_config(text, "x.cfg")

    def test_load_file(self, tmp_path):
        (tmp_path / "a.cfg").write_text(TINY_TEXT)
        assert cfgmod.load_config(tmp_path / "a.cfg").model.pyramid.coarse_dim == 16


@pytest.fixture()
def images(tmp_path):
    pair = synthetic.synth_warp_pair(scale=1.3, seed=2, size=64)
    a, b = tmp_path / "a.pgm", tmp_path / "b.pgm"
    imageio.write_pgm(a, pair.image_ref)
    imageio.write_pgm(b, pair.image_src)
    (tmp_path / "tiny.cfg").write_text(TINY_TEXT)
    return a, b, tmp_path / "tiny.cfg"


class TestUsage:
    def test_help(self, capsys):
        assert cli.main(["--help"]) == 0
        assert "selftest" in capsys.readouterr().out

    @pytest.mark.parametrize(
        "argv",
        [["frobnicate"], [], ["match", "missing.pgm", "other.pgm"], ["bench-sparse", "--sizes", "10,x"], ["verify-geometry", "--trials", "0"]],
    )
    def test_usage_errors_exit_one(self, argv, capsys):
        assert cli.main(argv) == 1

    def test_extent_mismatch(self, images, tmp_path):
        imageio.write_pgm(tmp_path / "c.pgm", np.zeros((64, 96)))
        assert cli.main(["match", str(images[0]), str(tmp_path / "c.pgm")]) == 1

    def test_bad_config(self, images, tmp_path):
        (tmp_path / "bad.cfg").write_text("nope = 1\n")
        assert cli.main(["match", str(images[0]), str(images[1]), "--config", str(tmp_path / "bad.cfg")]) == 1


class TestMatch:
    def test_stdout_table(self, images, capsys):
        a, b, cfg = images
        assert cli.main(["match", str(a), str(b), "--config", str(cfg)]) == 0
        out, err = capsys.readouterr()
        lines = out.splitlines()
        assert lines[0] == "# x_ref\ty_ref\tx_src\ty_src\tconfidence\tgrid"
        assert all(len(line.split("\t")) == 6 for line in lines[1:])
        assert "untrained" in err

    def test_outputs(self, images, tmp_path, capsys):
        a, b, cfg = images
        k = tmp_path / "k.txt"
        k.write_text("57.6 0 31.5 0 57.6 31.5 0 0 1\n")
        argv = ["match", str(a), str(b), "--config", str(cfg), "--out", str(tmp_path / "m.txt")]
        argv += ["--viz", str(tmp_path / "v.ppm"), "--plot", str(tmp_path / "m.png"), "--intrinsics", str(k), str(k)]
        assert cli.main(argv) == 0
        ref, src, conf = read_matches(tmp_path / "m.txt")
        assert ref.shape == src.shape and conf.shape == (ref.shape[0],)
        assert imageio.read_pnm(tmp_path / "v.ppm").shape == (64, 128, 3)
        assert (tmp_path / "m.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


class TestTrainAndReload:
    def test_round_trip(self, images, tmp_path, capsys):
        a, b, cfg = images
        ckpt = tmp_path / "t.ckpt"
        argv = ["train-toy", "--config", str(cfg), "--out", str(ckpt), "--plot", str(tmp_path / "t.png")]
        assert cli.main(argv) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0].startswith("# step") and out[-1] == f"checkpoint\t{ckpt}"
        assert any(line.startswith("recall\t") for line in out)
        assert ckpt.exists() and (tmp_path / "t.png").exists()
        assert cli.main(["match", str(a), str(b), "--config", str(cfg), "--ckpt", str(ckpt)]) == 0
        assert "untrained" not in capsys.readouterr().err
        # a checkpoint from another configuration is refused
        assert cli.main(["match", str(a), str(b), "--ckpt", str(ckpt)]) == 1


class TestVerifyCommands:
    def test_verify_geometry(self, tmp_path, capsys):
        assert cli.main(["verify-geometry", "--trials", "3", "--plot", str(tmp_path / "g.png")]) == 0
        out = capsys.readouterr().out
        assert "status\tPASS" in out and (tmp_path / "g.png").exists()
        err = float(next(l for l in out.splitlines() if l.startswith("max_rel_depth_error")).split("\t")[1])
        assert err < 1e-6

    def test_bench_table(self, tmp_path, capsys):
        code = cli.main(["bench-sparse", "--sizes", "256,512", "--tokens", "64", "--repeats", "3", "--plot", str(tmp_path / "b.png")])
        out = capsys.readouterr().out.splitlines()
        assert code in (0, 2) and (tmp_path / "b.png").exists()
        rows = [l.split("\t") for l in out if l[:1].isdigit()]
        assert [r[0] for r in rows[:2]] == ["256", "512"] and int(rows[1][2]) == 2 * int(rows[0][2])

    def test_bench_rejects_oversized_plan(self):
        assert cli.main(["bench-sparse", "--sizes", "5000", "--tokens", "64"]) == 1
