import csv
import json
import subprocess
import sys

import numpy as np
import pytest

import smppca.cli as cli
import smppca.io as sio
from smppca.cli import main
from smppca.matrix_core import ConvergenceError


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _gen(tmp_path, name, *extra):
    out = tmp_path / name
    assert main(["gen", "--out", str(out), *extra]) == 0
    return out


def test_gen_is_deterministic(tmp_path):
    a = _gen(tmp_path, "a", "--kind", "gd", "--d", "40", "--n", "12", "--seed", "3", "--format", "csv")
    b = _gen(tmp_path, "b", "--kind", "gd", "--d", "40", "--n", "12", "--seed", "3", "--format", "csv")
    for f in ("A.csv", "B.csv"):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    assert json.loads((a / "manifest.json").read_text())["files"] == ["A.csv", "B.csv"]


def test_approx_then_eval_on_exact_rank(tmp_path):
    data = _gen(tmp_path, "data", "--kind", "exactrank", "--d", "64", "--n1", "80", "--n2", "70",
                "--r", "3", "--seed", "1")
    ab = ["--a", str(data / "A.npy"), "--b", str(data / "B.npy")]
    # SRHT with k = d (a power of two) is an orthogonal sketch, so the estimates are exact
    assert main(["approx", *ab, "--r", "3", "--k", "64", "--sketch", "srht",
                 "--out", str(tmp_path / "run")]) == 0
    assert main(["eval", *ab, "--factors", str(tmp_path / "run" / "factors"),
                 "--out", str(tmp_path / "ev")]) == 0
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert report["spectral_err_rel"] <= 0.01
    assert {"sketch", "sample_estimate", "waltmin", "total"} <= {
        row["stage"] for row in _rows(tmp_path / "run" / "timings.csv")}


@pytest.mark.parametrize("command", ["lela", "sketch-svd", "exact"])
def test_baseline_commands(tmp_path, command):
    data = _gen(tmp_path, "data", "--kind", "gd", "--d", "60", "--n", "30", "--seed", "2")
    ab = ["--a", str(data / "A.npy"), "--b", str(data / "B.npy")]
    extra = ["--k", "30"] if command == "sketch-svd" else []
    assert main([command, *ab, "--r", "3", *extra, "--factor-format", "npy",
                 "--out", str(tmp_path / "run")]) == 0
    assert (tmp_path / "run" / "factors_U.npy").exists()
    assert main(["eval", *ab, "--factors", str(tmp_path / "run" / "factors"),
                 "--out", str(tmp_path / "ev")]) == 0
    row = _rows(tmp_path / "ev" / "results.csv")[0]
    assert float(row["spectral_err_rel"]) >= float(row["optimal_spectral_err_rel"]) - 1e-9


def test_summary_then_approx_matches_direct(tmp_path):
    data = _gen(tmp_path, "data", "--kind", "gd", "--d", "50", "--n", "25", "--seed", "4")
    ab = ["--a", str(data / "A.npy"), "--b", str(data / "B.npy")]
    common = ["--r", "2", "--k", "20", "--seed", "9", "--factor-format", "npy"]
    assert main(["approx", *ab, *common, "--out", str(tmp_path / "direct")]) == 0
    assert main(["sketch", *ab, "--k", "20", "--seed", "9", "--out", str(tmp_path / "sk")]) == 0
    assert main(["approx", "--summary", str(tmp_path / "sk" / "summary.smpk"), *common,
                 "--out", str(tmp_path / "via")]) == 0
    for f in ("factors_U.npy", "factors_V.npy"):
        assert np.array_equal(np.load(tmp_path / "direct" / f), np.load(tmp_path / "via" / f))


def test_approx_from_stream_reads_file_once(tmp_path, monkeypatch):
    data = _gen(tmp_path, "data", "--kind", "gd", "--d", "40", "--n", "20", "--seed", "5",
                "--format", "stream", "--order", "shuffled")
    opened = []
    real_open = open

    def counting_open(*args, **kwargs):
        opened.append(args[0])
        return real_open(*args, **kwargs)

    monkeypatch.setattr(sio, "open", counting_open, raising=False)
    assert main(["approx", "--stream", str(data / "stream.smps"), "--r", "2", "--k", "16",
                 "--out", str(tmp_path / "run")]) == 0
    assert len(opened) == 1


def test_sweep_theta_and_manifest_replay(tmp_path):
    args = ["sweep-theta", "--d", "300", "--n", "60", "--r", "3", "--k", "50", "--seeds", "2"]
    assert main([*args, "--out", str(tmp_path / "s1")]) == 0
    rows = _rows(tmp_path / "s1" / "results.csv")
    assert [float(r["theta_deg"]) for r in rows] == [10, 30, 60, 90, 150]
    ratios = [float(r["median_ratio"]) for r in rows]
    assert ratios == sorted(ratios, reverse=True) and ratios[3] > 1.0
    assert main(["sweep-theta", "--manifest", str(tmp_path / "s1" / "manifest.json"),
                 "--out", str(tmp_path / "s2")]) == 0
    for f in ("results.csv", "points.csv", "manifest.json"):
        assert (tmp_path / "s1" / f).read_bytes() == (tmp_path / "s2" / f).read_bytes()


def test_sweep_m_and_k(tmp_path):
    assert main(["sweep-m", "--kind", "exactrank", "--d", "80", "--n", "60", "--r", "2", "--k", "40",
                 "--seeds", "1", "--m-factors", "1", "4", "--out", str(tmp_path / "m")]) == 0
    assert len(_rows(tmp_path / "m" / "results.csv")) == 2
    assert main(["sweep-k", "--kind", "gd", "--d", "80", "--n", "40", "--r", "2", "--seeds", "1",
                 "--ks", "20", "40", "--out", str(tmp_path / "k")]) == 0
    assert "median_sketch_svd_err" in _rows(tmp_path / "k" / "results.csv")[0]


def test_exit_codes(tmp_path, monkeypatch, capsys):
    assert main(["approx", "--a", str(tmp_path / "missing.npy"), "--b", str(tmp_path / "missing.npy"),
                 "--out", str(tmp_path / "o")]) == cli.EXIT_IO
    data = _gen(tmp_path, "data", "--kind", "gd", "--d", "30", "--n", "10")
    ab = ["--a", str(data / "A.npy"), "--b", str(data / "B.npy")]
    assert main(["approx", *ab, "--r", "50", "--out", str(tmp_path / "o")]) == cli.EXIT_VALIDATION
    assert main(["approx", "--a", str(data / "A.npy"), "--out", str(tmp_path / "o")]) == cli.EXIT_VALIDATION
    with pytest.raises(SystemExit) as exc:
        main(["approx", "--sketch", "nope"])
    assert exc.value.code == cli.EXIT_VALIDATION

    def no_convergence(*args, **kwargs):
        raise ConvergenceError("forced")

    monkeypatch.setattr(cli, "smp_pca_from_summary", no_convergence)
    assert main(["approx", *ab, "--r", "2", "--k", "10", "--out", str(tmp_path / "o")]) == cli.EXIT_NUMERICAL
    assert "numerical error" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "smppca.cli", "gen", "--kind", "cone", "--theta", "20",
                           "--d", "20", "--n", "5", "--out", str(tmp_path)], capture_output=True)
    assert proc.returncode == 0
    assert (tmp_path / "A.npy").exists()
