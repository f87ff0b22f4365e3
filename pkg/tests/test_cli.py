import csv
import io
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from varprune.checkpoint import load_checkpoint
from varprune.cli import main
from varprune.data import write_idx
from varprune.hyperprior import ClipBounds, Flattening, pi_star, reg_term

SMALL = ["--data", "blobs", "--blob-classes", "3", "--blob-dim", "5", "--blob-train-per-class", "20",
         "--blob-test-per-class", "10", "--arch", "5-6-4-3", "--epochs", "3", "--ft-epochs", "1",
         "--batch-size", "8", "--lam", "0.1", "--log-gamma", "-1.0"]


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def in_tmp(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


class TestTrain:
    def test_outputs(self, in_tmp, capsys):
        code, out, _ = run(["train", *SMALL, "--out", "r", "--checkpoint-every", "2"], capsys)
        assert code == 0
        r = in_tmp / "r"
        for name in ("effective_config.json", "trained.ckpt", "finalized.ckpt", "fine_tuned.ckpt",
                     "epoch0002.ckpt", "metrics.csv", "theta_trajectory.csv", "summary.json"):
            assert (r / name).exists(), name
        summary = json.loads(out.strip().splitlines()[-1])
        assert summary == json.loads((r / "summary.json").read_text())
        assert summary["epochs"] == 4 and summary["initial_widths"] == [6, 4]
        with open(r / "metrics.csv") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 5 and [x[0] for x in rows[1:]] == ["train"] * 3 + ["fine_tune"]
        with open(r / "theta_trajectory.csv") as fh:
            traj = list(csv.reader(fh))
        assert len(traj) == 1 + 4 and all(float(v) == float(v) for v in traj[1][1:])

    def test_rerun_is_byte_identical(self, in_tmp, capsys):
        assert run(["train", *SMALL, "--out", "r"], capsys)[0] == 0
        first = {p.name: p.read_bytes() for p in (in_tmp / "r").iterdir()}
        assert run(["train", *SMALL, "--out", "r"], capsys)[0] == 0
        second = {p.name: p.read_bytes() for p in (in_tmp / "r").iterdir()}
        assert first == second

    def test_precedence(self, in_tmp, capsys):
        (in_tmp / "c.json").write_text(json.dumps({"epochs": 2, "lr": 0.01, "seed": 5}))
        i = SMALL.index("--epochs")
        code, _, _ = run(["train", *SMALL[:i], *SMALL[i + 2:], "--config", "c.json",
                          "--lr", "0.002", "--out", "r"], capsys)
        assert code == 0
        eff = json.loads((in_tmp / "r" / "effective_config.json").read_text())
        assert eff["lr"] == 0.002 and eff["epochs"] == 2 and eff["seed"] == 5
        assert eff["ft_lr"] == 1e-4 and eff["blob_classes"] == 3
        assert json.loads((in_tmp / "r" / "summary.json").read_text())["epochs"] == 3

    def test_resume_matches(self, in_tmp, capsys):
        assert run(["train", *SMALL, "--out", "a", "--checkpoint-every", "1"], capsys)[0] == 0
        assert run(["train", *SMALL, "--out", "b", "--resume", "a/epoch0001.ckpt"], capsys)[0] == 0
        for name in ("metrics.csv", "theta_trajectory.csv", "summary.json", "fine_tuned.ckpt"):
            assert (in_tmp / "a" / name).read_bytes() == (in_tmp / "b" / name).read_bytes(), name

    @pytest.mark.parametrize("extra", [
        ["--lam", "-1"], ["--estimator", "magic"], ["--arch", "5-x-3"], ["--arch", "7-4-3"],
        ["--data", "cifar"], ["--batch-size", "1000"], ["--prior", "beta", "--alpha", "2.0"],
    ])
    def test_config_errors(self, in_tmp, capsys, extra):
        code, _, err = run(["train", *SMALL, *extra, "--out", "r"], capsys)
        assert code == 2 and "config error" in err
        assert not (in_tmp / "r" / "trained.ckpt").exists()

    def test_bad_config_file(self, in_tmp, capsys):
        (in_tmp / "c.json").write_text("{not json")
        assert run(["train", "--config", "c.json"], capsys)[0] == 2
        (in_tmp / "c.json").write_text(json.dumps({"learning_rate": 1.0}))
        assert run(["train", "--config", "c.json"], capsys)[0] == 2
        (in_tmp / "c.json").write_text(json.dumps({"epochs": 2.5}))
        assert run(["train", "--config", "c.json"], capsys)[0] == 2
        assert run(["train", "--config", "missing.json"], capsys)[0] == 2

    def test_data_errors(self, in_tmp, capsys, monkeypatch):
        monkeypatch.delenv("VARPRUNE_DATA", raising=False)
        assert run(["train", "--data", "mnist", "--out", "r"], capsys)[0] == 3
        (in_tmp / "junk.ckpt").write_bytes(b"junk")
        assert run(["train", *SMALL, "--resume", "junk.ckpt", "--out", "r"], capsys)[0] == 3

    def test_mnist_root_from_env(self, in_tmp, capsys, monkeypatch):
        rng = np.random.default_rng(0)
        for split, n in (("train", 40), ("t10k", 20)):
            write_idx(in_tmp / f"{split}-images-idx3-ubyte.gz", rng.integers(0, 256, (n, 28, 28), dtype=np.uint8))
            write_idx(in_tmp / f"{split}-labels-idx1-ubyte.gz", rng.integers(0, 10, n, dtype=np.uint8))
        monkeypatch.setenv("VARPRUNE_DATA", str(in_tmp))
        code, out, _ = run(["train", "--data", "mnist", "--arch", "784-5-10", "--epochs", "1", "--ft-epochs", "1",
                            "--batch-size", "10", "--out", "m"], capsys)
        assert code == 0 and json.loads(out.strip().splitlines()[-1])["epochs"] == 2

    def test_numeric_failure(self, in_tmp, capsys):
        code, _, err = run(["train", *SMALL, "--optimizer", "sgd", "--lr", "1e30", "--out", "r"], capsys)
        assert code == 4 and "numeric" in err


class TestEval:
    def test_eval(self, in_tmp, capsys):
        assert run(["train", *SMALL, "--out", "r"], capsys)[0] == 0
        data = SMALL[:10]
        code, out, _ = run(["eval", "r/fine_tuned.ckpt", *data], capsys)
        res = json.loads(out)
        assert code == 0 and 0 <= res["accuracy"] <= 1 and res["phase"] == "fine_tune"
        st = load_checkpoint(in_tmp / "r" / "fine_tuned.ckpt")
        assert res["accuracy"] == st.history[-1].test_accuracy
        code, out, _ = run(["eval", "r/trained.ckpt", *data], capsys)
        assert code == 0 and json.loads(out)["phase"] == "train"

    def test_missing_checkpoint(self, in_tmp, capsys):
        assert run(["eval", "nope.ckpt"], capsys)[0] == 3


class TestPriorCurve:
    def test_stdout_matches_library(self, capsys):
        code, out, _ = run(["prior-curve", "--gamma", "0.01", "--points", "5", "--theta-min", "0.1",
                            "--theta-max", "0.9"], capsys)
        rows = list(csv.reader(io.StringIO(out)))
        assert code == 0 and rows[0] == ["theta", "pi_star", "reg_term"] and len(rows) == 6
        cb, hp = ClipBounds(1e-4, 1e-4), Flattening.from_log(math.log(0.01))
        for r in rows[1:]:
            t, p, g = map(float, r)
            assert p == pi_star(hp, cb, t) and g == reg_term(hp, cb, t)
        assert math.isclose(float(rows[3][2]), -math.log(0.01))

    def test_file_and_beta(self, tmp_path, capsys):
        out = tmp_path / "c.csv"
        assert run(["prior-curve", "--prior", "beta", "--points", "50", "--out", str(out)], capsys)[0] == 0
        assert len(out.read_text().splitlines()) == 51

    @pytest.mark.parametrize("argv", [["--gamma", "0"], ["--gamma", "2"], ["--eps1", "0"],
                                      ["--theta-min", "0.8", "--theta-max", "0.2"], ["--points", "0"]])
    def test_errors(self, capsys, argv):
        assert run(["prior-curve", *argv], capsys)[0] == 2


class TestOdeLab:
    def test_stable_run(self, in_tmp, capsys):
        code, out, _ = run(["ode-lab", "--starts", "5", "--T", "30", "--every", "100", "--out", "o"], capsys)
        s = json.loads(out)
        assert code == 0 and s["stability_condition"] and s["converged"] == 5
        assert s["max_V_increase"] <= 0.0
        with open(in_tmp / "o" / "trajectories.csv") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 1 + 5 * 31

    def test_blow_up(self, in_tmp, capsys):
        code, _, err = run(["ode-lab", "--eta", "1e4", "--kappa", "0", "--lam", "0.01", "--eps1", "0.3",
                            "--starts", "2", "--T", "10", "--dt", "1e-4", "--out", "o"], capsys)
        assert code == 4 and "blew up" in err

    @pytest.mark.parametrize("argv", [["--lam", "0"], ["--eps1", "1e-7"], ["--q", "0"], ["--prior", "nope"]])
    def test_errors(self, in_tmp, capsys, argv):
        assert run(["ode-lab", *argv, "--out", "o"], capsys)[0] == 2


class TestEstimatorBench:
    def test_table(self, capsys):
        code, out, _ = run(["estimator-bench", "--draws", "50"], capsys)
        rows = list(csv.reader(io.StringIO(out)))
        assert code == 0 and rows[0] == ["unit", "taylor", "concrete", "sampling", "brute_force"]
        assert [r[0] for r in rows[1:]] == ["0:0", "0:1", "0:2"]
        assert all(math.isfinite(float(v)) for r in rows[1:] for v in r[1:])

    @pytest.mark.parametrize("argv", [["--draws", "0"], ["--arch", "2-a-2"], ["--arch", "2-30-2"]])
    def test_errors(self, capsys, argv):
        assert run(["estimator-bench", *argv], capsys)[0] == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "varprune.cli", "prior-curve", "--points", "2"],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 0 and proc.stdout.startswith("theta,pi_star,reg_term")
    proc = subprocess.run([sys.executable, "-m", "varprune.cli", "train", "--lam", "-1", "--out", "x"],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 2
