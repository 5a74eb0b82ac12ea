import csv
import io
import json
import math
import subprocess
import sys

import pytest

from elslab import cli


def _run(tmp_path, name, *args):
    out = tmp_path / name
    code = cli.run([*args, "--out", str(out)])
    return code, out


def _rows(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


def test_oracle_degenerate_gamma(tmp_path):
    code, out = _run(tmp_path, "o", "oracle", "--gamma", "0.5")
    assert code == cli.EXIT_OK
    (row,) = _rows(out / "oracle.csv")
    assert row["mode"] == "two_sided"
    assert float(row["objective"]) == pytest.approx(-2 * math.log(2), abs=1e-9)


def test_oracle_gamma_list_and_modes(tmp_path):
    code, out = _run(tmp_path, "o", "oracle", "--gamma", "0.8,1.0", "--mode", "one_sided")
    assert code == 0
    rows = _rows(out / "oracle.csv")
    assert [float(r["gamma"]) for r in rows] == [0.8, 1.0]
    assert all(float(r["residual"]) < 1e-6 for r in rows)
    code, out = _run(tmp_path, "m", "oracle", "--mode", "multi", "--mus", "0,1,2", "--gamma", "0.7")
    assert code == 0 and _rows(out / "oracle.csv")[0]["mode"] == "multi"


def test_converge_threshold(tmp_path, capsys):
    code, out = _run(tmp_path, "c", "converge", "--xs", "1", "--xt", "-1", "--nd", "1", "--ne", "1", "--gamma", "1")
    assert code == 0
    doc = json.loads((out / "eigen.json").read_text())
    assert doc["eta_threshold"] == 2
    assert not doc["diverged"]
    assert (out / "trajectory.csv").read_text().startswith("step,theta_e,theta_d,distance\n")


def test_converge_divergence_exit_code(tmp_path):
    code, out = _run(tmp_path, "c", "converge", "--init-e", "2e6")
    assert code == cli.EXIT_DIVERGED
    assert json.loads((out / "eigen.json").read_text())["diverged"] is True


def test_gen_writes_header(tmp_path):
    code, out = _run(tmp_path, "g", "gen", "--dataset", "disjoint", "--n-per-domain", "5")
    assert code == 0
    lines = (out / "data.csv").read_text().splitlines()
    assert lines[0] == "x0,class,env_true,env_observed" and len(lines) == 11
    code, out = _run(tmp_path, "c", "gen")
    assert (out / "data.csv").read_text().splitlines()[0] == "x0,x1,class,env_true,env_observed"


def test_train_is_reproducible(tmp_path):
    args = ["train", "--dataset", "circle", "--gamma", "anneal", "--steps", "5000", "--seed", "7"]
    code_a, a = _run(tmp_path, "a", *args)
    code_b, b = _run(tmp_path, "b", *args)
    assert code_a == code_b == 0
    for name in ("metrics.jsonl", "series.csv", "model.ckpt", "summary.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    first = json.loads((a / "metrics.jsonl").read_text().splitlines()[0])
    assert first["step"] == 0 and first["gamma"] == 1.0


def test_resolved_config_reruns(tmp_path):
    code, a = _run(tmp_path, "a", "train", "--dataset", "gaussians", "--steps", "40", "--eval-every", "20", "--lam", "0.5")
    assert code == 0
    resolved = (a / cli.RESOLVED).read_text()
    assert resolved.startswith("# elslab train\n") and "lam=0.5" in resolved
    code, b = _run(tmp_path, "b", "train", "--config", str(a / cli.RESOLVED))
    assert code == 0
    assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()


def test_flags_override_config(tmp_path):
    conf = tmp_path / "c.txt"
    conf.write_text("# comment\ngamma = 0.9\nmode=one_sided\n")
    code, out = _run(tmp_path, "o", "oracle", "--config", str(conf), "--gamma", "0.8")
    assert code == 0
    (row,) = _rows(out / "oracle.csv")
    assert float(row["gamma"]) == 0.8 and row["mode"] == "one_sided"


@pytest.mark.parametrize(
    "argv",
    [
        ["nonsense"],
        [],
        ["oracle", "--temperature", "3"],
        ["train", "--steps", "many"],
        ["train", "--gamma", "0.01"],
        ["oracle", "--mode", "two_sided", "--mus", "0,1,2"],
    ],
)
def test_invalid_input_exits_one(tmp_path, argv, capsys):
    assert cli.run(argv + ["--out", str(tmp_path / "x")] if argv else argv) == cli.EXIT_INVALID
    assert capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    conf = tmp_path / "c.txt"
    conf.write_text("gamma=0.9\ntemperature=2\n")
    assert cli.run(["oracle", "--config", str(conf), "--out", str(tmp_path / "o")]) == 1
    assert "temperature" in capsys.readouterr().err


def test_help_exits_zero(capsys):
    assert cli.run(["--help"]) == 0
    assert "bound-check" in capsys.readouterr().out


def test_gradcheck_command(tmp_path):
    code, out = _run(tmp_path, "g", "gradcheck", "--trials", "5")
    assert code == 0
    rows = _rows(out / "gradcheck.csv")
    assert len(rows) == 10 and {r["kind"] for r in rows} == {"mlp", "els_loss"}


def test_small_experiment_commands(tmp_path):
    code, out = _run(tmp_path, "n", "noise-sweep", "--e-grid", "0,0.4", "--seeds", "0", "--steps", "20", "--n-per-domain", "50")
    assert code == 0
    assert len(_rows(out / "noise_sweep.csv")) == 6
    code, out = _run(tmp_path, "b", "bound-check", "--gammas", "0.9", "--budget", "20", "--n-probe", "5", "--n-per-domain", "20")
    assert code == 0 and len(_rows(out / "bound_check.csv")) == 1
    code, out = _run(
        tmp_path, "p", "partial-labels", "--n-domains", "4", "--n-source", "2", "--points-per-domain", "10",
        "--steps", "5", "--seeds", "0", "--fractions", "1",
    )
    assert code == 0
    assert [r["setting"] for r in _rows(out / "partial_labels.csv")] == ["fraction=1", "fraction=1", "partition=2", "partition=2"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "elslab.cli", "oracle", "--gamma", "1", "--out", str(tmp_path)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0 and proc.stdout.startswith("gamma,mode")
