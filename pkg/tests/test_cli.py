import csv
import filecmp
import json
from pathlib import Path

import numpy as np
import pytest

from efdd.cli import main
from efdd.linalg import expm
from efdd.models import lab_operators
from efdd.models.langevin import LangevinRotatingParams

GOLDEN = Path(__file__).parent / "golden"


def run(tmp_path, *argv, name="out"):
    out = tmp_path / name
    code = main([*argv, "--out", str(out)])
    return code, out


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float)


def same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors


class TestConverge:
    def test_single_row(self, tmp_path):
        code, out = run(tmp_path, "converge", "--model", "ltv", "--schemes", "em", "--dt", "1e-3")
        assert code == 0
        header, rows = read_csv(out / "converge_em.csv")
        assert header == ["dt", "rel_err_mean", "rel_err_cov", "stable"]
        assert rows.shape == (1, 4)
        summary = json.loads((out / "converge_summary.json").read_text())
        assert summary["schemes"]["em"]["slope_mean"] is None

    def test_golden(self, tmp_path):
        argv = ["converge", "--model", "ltv", "--schemes", "em,magnus1,magnus2", "--dt", "0.078125,0.0390625,0.01953125"]
        code, out = run(tmp_path, *argv)
        assert code == 0
        for name in ("converge_em.csv", "converge_magnus1.csv", "converge_magnus2.csv"):
            got_h, got = read_csv(out / name)
            want_h, want = read_csv(GOLDEN / name)
            assert got_h == want_h
            np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-15)
        summary = json.loads((out / "converge_summary.json").read_text())
        golden = json.loads((GOLDEN / "converge_summary.json").read_text())
        assert summary.keys() == golden.keys()
        assert summary["schemes"].keys() == golden["schemes"].keys()

    def test_seventeen_digits(self, tmp_path):
        _, out = run(tmp_path, "converge", "--model", "ltv", "--schemes", "magnus1", "--dt", "0.3125")
        line = (out / "converge_magnus1.csv").read_text().splitlines()[1]
        field = line.split(",")[1]
        assert float(field) == float("%.17g" % float(field))
        assert len(field.replace(".", "").replace("-", "").split("e")[0].lstrip("0")) >= 15


class TestExitCodes:
    @pytest.mark.parametrize(
        "argv",
        [
            ["converge", "--model", "ltv", "--dt", "0.3"],
            ["converge", "--model", "ltv", "--dt", "-1"],
            ["converge", "--model", "ltv", "--schemes", "exp"],
            ["converge", "--model", "ltv", "--schemes", "rk4"],
            ["simulate", "--model", "ltv", "--n-traj", "1000"],
            ["converge"],
        ],
    )
    def test_config_errors(self, tmp_path, argv):
        assert run(tmp_path, *argv)[0] == 2

    def test_bad_params_file(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"params": {"gamma": -2}}))
        assert run(tmp_path, "converge", "--model", "ltv", "--config", str(cfg))[0] == 2
        cfg.write_text(json.dumps({"params": {"nonsense": 1}}))
        assert run(tmp_path, "converge", "--model", "ltv", "--config", str(cfg))[0] == 2
        cfg.write_text("{not json")
        assert run(tmp_path, "converge", "--model", "ltv", "--config", str(cfg))[0] == 2

    def test_unknown_model_rejected_by_parser(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["converge", "--model", "heat"])
        assert info.value.code == 2

    def test_infeasible(self, tmp_path, capsys):
        code, _ = run(tmp_path, "converge", "--model", "ltv", "--schemes", "magnus2", "--dt", "2.5")
        assert code == 3
        assert "step 1" in capsys.readouterr().err


class TestStability:
    def test_ltv(self, tmp_path):
        code, out = run(tmp_path, "stability", "--model", "ltv")
        assert code == 0
        rep = json.loads((out / "stability.json").read_text())
        lo, hi = rep["schemes"]["em"]["bracket"]
        assert lo <= 0.2 <= hi
        assert rep["schemes"]["magnus1"]["status"] == "stable-through-grid"
        assert rep["em_tau"] == pytest.approx(0.2, abs=0.005)


class TestFdBalance:
    def test_ltv_frozen(self, tmp_path):
        code, out = run(tmp_path, "fdbalance", "--model", "ltv")
        assert code == 0
        rep = json.loads((out / "fdbalance.json").read_text())
        for lab in ("exp", "expc", "magnus1", "magnus2"):
            assert all(e["residual"] <= 1e-10 for e in rep["schemes"][lab])
        assert all(e["residual"] <= 1e-10 for e in rep["schemes"]["emfd"])
        em = rep["schemes"]["em"][0]
        assert em["residual"] > 0 and em["stationary_residual"] > 0

    def test_spde_modes(self, tmp_path):
        code, out = run(tmp_path, "fdbalance", "--model", "spde", "--dt", "0.01,1")
        assert code == 0
        rep = json.loads((out / "fdbalance.json").read_text())
        assert all(e["residual"] <= 1e-10 for e in rep["schemes"]["magnus2"])


class TestSimulate:
    def test_langevin_noise_free_lab_frame(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"params": {"rotating": False}, "noise_scale": 0.0}))
        code, out = run(tmp_path, "simulate", "--model", "langevin", "--config", str(cfg), "--n-traj", "2")
        assert code == 0
        header, rows = read_csv(out / "traj_000.csv")
        assert header == ["t", "z1", "z2", "z3", "z4"]
        L = lab_operators(LangevinRotatingParams())[0]
        z0 = np.array([1.0, -0.1, 1.0, -0.1])
        for row in rows[::32]:
            np.testing.assert_allclose(row[1:], expm(row[0] * L) @ z0, atol=1e-12)

    def test_spde_snapshots(self, tmp_path):
        code, out = run(tmp_path, "simulate", "--model", "spde", "--n-traj", "2", "--seed", "3")
        assert code == 0
        meta = json.loads((out / "simulate.json").read_text())
        assert meta["snapshot_times"] == [0.0, 2.0, 4.0]
        for name in meta["files"]:
            grid = np.loadtxt(out / name, delimiter=",")
            assert grid.shape == (15, 15)
            # the k = 0 mode carries the spatial mean and has no dynamics
            assert grid.mean() == pytest.approx(1.0, abs=1e-12)

    def test_same_seed_same_files(self, tmp_path):
        argv = ["simulate", "--model", "langevin", "--n-traj", "3", "--seed", "12"]
        _, a = run(tmp_path, *argv, name="a")
        _, b = run(tmp_path, *argv, name="b")
        assert same_tree(a, b)
        _, c = run(tmp_path, "simulate", "--model", "langevin", "--n-traj", "3", "--seed", "13", name="c")
        assert not filecmp.cmp(a / "traj_000.csv", c / "traj_000.csv", shallow=False)

    @pytest.mark.parametrize("model", ["ltv", "spde"])
    def test_worker_counts(self, tmp_path, monkeypatch, model):
        outs = []
        for w in (1, 4, 8):
            monkeypatch.setenv("EFDD_THREADS", str(w))
            code, out = run(tmp_path, "simulate", "--model", model, "--n-traj", "7", "--seed", "5", name=f"w{w}")
            assert code == 0
            outs.append(out)
        assert same_tree(outs[0], outs[1]) and same_tree(outs[0], outs[2])
