import numpy as np
import pytest

from gridsr import cli
from gridsr import fields as F
from gridsr import models as M
from gridsr import tensor as T
from gridsr.evaluation import parse_report_csv

TINY = [
    "--set", "model.patch=2",
    "--set", "model.window=2",
    "--set", "model.dim=12",
    "--set", "model.heads=2",
    "--set", "model.blocks=1",
]


def run(*argv):
    return cli.main(list(argv))


def synth_dir(tmp_path, name="data", n=3, size=16, seed=7):
    d = tmp_path / name
    code = run("synth", "--out", str(d), "--seed", str(seed),
               "--set", f"synth.n={n}", "--set", f"synth.ny={size}",
               "--set", f"synth.nx={size}", *TINY)
    assert code == 0
    return d


def train_dir(tmp_path, data, name="run", epochs=2, seed=1, extra=()):
    d = tmp_path / name
    code = run("train", "--out", str(d), "--seed", str(seed),
               "--set", f"train.data_dir={data}", "--set", f"train.epochs={epochs}",
               "--set", "train.batch_size=2", *TINY, *extra)
    assert code == 0
    return d


class TestSynth:
    def test_writes_files_and_rerun_is_bit_identical(self, tmp_path):
        a = synth_dir(tmp_path, "a", n=2)
        b = synth_dir(tmp_path, "b", n=2)
        files_a = sorted(p.name for p in a.glob("*.grd"))
        assert files_a == ["sample_0000.grd", "sample_0001.grd"]
        for name in files_a:
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_indivisible_grid_refused(self, tmp_path):
        code = run("synth", "--out", str(tmp_path / "x"),
                   "--set", "synth.nx=50", "--set", "synth.ny=64")
        assert code == 1

    def test_manifest_is_human_readable(self, tmp_path):
        d = synth_dir(tmp_path, seed=123)
        text = (d / "manifest.txt").read_text()
        assert "seed=123" in text
        assert "profile=default" in text
        assert "var.T2M=" in text


class TestTrain:
    def test_artifacts_and_loss_rows(self, tmp_path):
        data = synth_dir(tmp_path)
        rd = train_dir(tmp_path, data, epochs=2)
        assert (rd / "checkpoint.ckpt").exists()
        lines = (rd / "loss_log.csv").read_text().strip().splitlines()
        assert len(lines) == 3  # header + one row per epoch
        assert (rd / "loss_curve.png").exists()
        assert (rd / "config.used.txt").exists()
        assert "wall_seconds=" in (rd / "run_meta.txt").read_text()

    def test_unknown_key_rejected_and_named(self, tmp_path, capsys):
        code = run("train", "--out", str(tmp_path / "r"), "--set", "train.bogus=1")
        assert code == 1
        assert "train.bogus" in capsys.readouterr().err

    def test_mass_convention_recorded_in_checkpoint(self, tmp_path):
        data = synth_dir(tmp_path)
        rd = train_dir(tmp_path, data, epochs=1,
                       extra=("--set", "loss.mass_convention=raw_sum"))
        ck = M.load_checkpoint(rd / "checkpoint.ckpt")
        assert ck.meta["mass_convention"] == "raw_sum"

    def test_deterministic_artifacts(self, tmp_path):
        data = synth_dir(tmp_path)
        r1 = train_dir(tmp_path, data, name="r1", seed=5)
        r2 = train_dir(tmp_path, data, name="r2", seed=5)
        assert (r1 / "checkpoint.ckpt").read_bytes() == (r2 / "checkpoint.ckpt").read_bytes()
        assert (r1 / "loss_log.csv").read_bytes() == (r2 / "loss_log.csv").read_bytes()

    def test_rerun_from_echoed_config(self, tmp_path):
        data = synth_dir(tmp_path)
        r1 = train_dir(tmp_path, data, name="r1", seed=5)
        r3 = tmp_path / "r3"
        code = run("train", "--config", str(r1 / "config.used.txt"), "--out", str(r3))
        assert code == 0
        assert (r1 / "checkpoint.ckpt").read_bytes() == (r3 / "checkpoint.ckpt").read_bytes()


class TestEval:
    def test_bilinear_only_runs_without_checkpoint(self, tmp_path):
        data = synth_dir(tmp_path)
        out = tmp_path / "ev"
        code = run("eval", "--out", str(out), "--set", f"eval.data_dir={data}")
        assert code == 0
        rep = parse_report_csv((out / "report.csv").read_text())
        assert {r.model for r in rep.rows} == {"bilinear"}
        assert len(rep.rows) == 19

    def test_adding_model_adds_variable_rows(self, tmp_path):
        data = synth_dir(tmp_path)
        rd = train_dir(tmp_path, data, epochs=1)
        out = tmp_path / "ev2"
        code = run("eval", "--out", str(out), "--set", f"eval.data_dir={data}",
                   "--set", f"eval.checkpoints={rd / 'checkpoint.ckpt'}")
        assert code == 0
        rep = parse_report_csv((out / "report.csv").read_text())
        assert len(rep.rows) == 2 * 19

    def test_triptych_files_per_sample(self, tmp_path):
        data = synth_dir(tmp_path)
        out = tmp_path / "ev3"
        code = run("eval", "--out", str(out), "--set", f"eval.data_dir={data}",
                   "--set", "eval.sample=1", "--set", "eval.variable=T2M")
        assert code == 0
        ppms = sorted(p.name for p in out.glob("triptych_s1_T2M_*.ppm"))
        assert len(ppms) == 3  # coarse, truth, pred per requested sample
        assert (out / "rmse_bars.png").exists()
        assert len(list(out.glob("triptych_s1_T2M_*.png"))) == 1

    def test_missing_data_dir_is_config_error(self, tmp_path):
        assert run("eval", "--out", str(tmp_path / "x")) == 1


class TestTransfer:
    def test_zero_shot_larger_grid(self, tmp_path):
        data = synth_dir(tmp_path, "train_data", size=16)
        big = synth_dir(tmp_path, "big_data", size=32, seed=99)
        rd = train_dir(tmp_path, data, epochs=1)
        out = tmp_path / "tr"
        code = run("transfer", "--out", str(out), "--set", f"eval.data_dir={big}",
                   "--set", f"eval.checkpoints={rd / 'checkpoint.ckpt'}")
        assert code == 0
        rep = parse_report_csv((out / "report.csv").read_text())
        assert len(rep.rows) == 2 * 19
        text = (out / "report.txt").read_text()
        assert "transfer = true" in text

    def test_transfer_needs_checkpoint(self, tmp_path):
        data = synth_dir(tmp_path)
        assert run("transfer", "--out", str(tmp_path / "t"),
                   "--set", f"eval.data_dir={data}") == 1

    def test_transfer_to_same_size_refused(self, tmp_path):
        data = synth_dir(tmp_path)
        rd = train_dir(tmp_path, data, epochs=1)
        code = run("transfer", "--out", str(tmp_path / "t"),
                   "--set", f"eval.data_dir={data}",
                   "--set", f"eval.checkpoints={rd / 'checkpoint.ckpt'}")
        assert code == 1

    def test_resnet_checkpoint_transfers_too(self, tmp_path):
        data = synth_dir(tmp_path, "rdata", size=16)
        big = synth_dir(tmp_path, "rbig", size=32, seed=31)
        rd = tmp_path / "rrun"
        code = run("train", "--out", str(rd), "--set", f"train.data_dir={data}",
                   "--set", "train.epochs=1", "--set", "train.batch_size=2",
                   "--set", "model.kind=resnet", "--set", "model.channels=6",
                   "--set", "model.blocks=1", "--set", "train.channels=surface")
        assert code == 0
        out = tmp_path / "rtr"
        code = run("transfer", "--out", str(out), "--set", f"eval.data_dir={big}",
                   "--set", f"eval.checkpoints={rd / 'checkpoint.ckpt'}")
        assert code == 0
        rep = parse_report_csv((out / "report.csv").read_text())
        assert len(rep.rows) == 2 * 4  # surface-only checkpoint

    def test_indivisible_grid_clean_error(self, tmp_path):
        # hand-build a 50x50 test stack (synth would refuse it)
        data = synth_dir(tmp_path, "t16", size=16)
        rd = train_dir(tmp_path, data, epochs=1)
        odd = tmp_path / "odd"
        odd.mkdir()
        rng = np.random.default_rng(0)
        stack = F.FieldStack(
            [F.GridField(v, rng.normal(size=(50, 50)) + 10.0, 0.5) for v in F.ALL_VARS]
        )
        F.save_grid(odd / "s.grd", stack)
        code = run("transfer", "--out", str(tmp_path / "to"),
                   "--set", f"eval.data_dir={odd}",
                   "--set", f"eval.checkpoints={rd / 'checkpoint.ckpt'}")
        assert code == 1


class TestGradcheckCommand:
    def test_fresh_build_exits_zero(self, capsys):
        assert run("gradcheck") == 0
        out = capsys.readouterr().out
        for name in sorted(T.DIFFERENTIABLE_OPS):
            assert name in out

    def test_injected_sign_flip_fails(self):
        T.FAULT_NEGATE_OPS.add("gelu")
        try:
            assert run("gradcheck") == 2
        finally:
            T.FAULT_NEGATE_OPS.discard("gelu")


class TestConfig:
    def test_bad_value_type(self, tmp_path, capsys):
        assert run("synth", "--out", str(tmp_path / "x"), "--set", "synth.n=lots") == 1
        assert "synth.n" in capsys.readouterr().err

    def test_config_file_applied_and_overridden(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("# comment\nsynth.n=2\nsynth.ny=16\nsynth.nx=16\n"
                       "model.patch=2\nmodel.window=2\n")
        d = tmp_path / "d"
        assert run("synth", "--config", str(cfg), "--out", str(d),
                   "--set", "synth.n=1") == 0
        assert len(list(d.glob("*.grd"))) == 1

    def test_unknown_command_usage_error(self):
        assert run("explode") == 1
