import csv

import numpy as np
import pytest

from gridsplit.cli import main

from conftest import TWO_BUS

GOLDEN_HEADER = (["t", "iter"] + [f"V_mag_bus{k}" for k in range(1, 10)]
                 + [f"V_ang_bus{k}" for k in range(1, 10)] + ["delta_g2", "delta_g3"]
                 + ["omega_g2", "omega_g3"] + [f"gfm_x{k}" for k in range(1, 14)]
                 + [f"bench_V_mag_bus{k}" for k in range(1, 10)])


@pytest.fixture(scope="module")
def fault_csv(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["run", "--case", "case9", "--scenario", "fault_bus2", "--benchmark",
                 "--out", str(out)]) == 0
    return out / "fault_bus2.csv"


def read(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestRun:
    def test_golden_header(self, fault_csv):
        assert read(fault_csv)[0] == GOLDEN_HEADER

    def test_summary_written(self, fault_csv):
        assert (fault_csv.parent / "fault_bus2.summary.json").exists()

    def test_no_benchmark(self, tmp_path):
        assert main(["run", "--scenario", "line6_change", "--no-benchmark", "--out",
                     str(tmp_path)]) == 0
        head = read(tmp_path / "line6_change.csv")[0]
        assert not any(h.startswith("bench_") for h in head)

    def test_missing_scenario(self, tmp_path, capsys):
        path = tmp_path / "nope.txt"
        assert main(["run", "--scenario", str(path), "--out", str(tmp_path)]) == 3
        assert str(path) in capsys.readouterr().err

    def test_bad_workers(self, tmp_path):
        assert main(["run", "--scenario", "fault_bus2", "--workers", "0",
                     "--out", str(tmp_path)]) == 3

    def test_divergence(self, tmp_path, capsys):
        assert main(["run", "--scenario", "fault_bus2", "--sigma", "1e-30",
                     "--out", str(tmp_path)]) == 2
        assert "at t = " in capsys.readouterr().err

    def test_workers_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("GRIDSPLIT_WORKERS", "3")
        from gridsplit.cli import build_parser
        assert build_parser().parse_args(["run", "--scenario", "x"]).workers == 3


class TestEig:
    def test_table_params(self, capsys):
        assert main(["eig", "--case", "case9"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0].startswith("[gfm gfm1] stable = ")
        assert len([l for l in out[1:] if l.strip()]) == 13

    def test_sweep(self, tmp_path):
        path = tmp_path / "map.csv"
        assert main(["eig", "--sweep", "Rv_over_Xv=0.05:0.05:1.0", "--out", str(path)]) == 0
        rows = read(path)
        assert rows[0] == ["Rv_over_Xv", "max_real", "stable", "max_real_active"]
        assert len(rows) == 21
        np.testing.assert_allclose([float(r[0]) for r in rows[1:]], 0.05 * np.arange(1, 21))

    def test_two_axis_sweep(self, tmp_path):
        path = tmp_path / "grid.csv"
        assert main(["eig", "--sweep", "Kp_id=1:1:3", "--sweep", "w_lpf=100:100:200",
                     "--out", str(path)]) == 0
        assert len(read(path)) == 1 + 3 * 2

    def test_no_gfm(self, tmp_path):
        case = tmp_path / "two.txt"
        case.write_text(TWO_BUS)
        assert main(["eig", "--case", str(case)]) == 3

    @pytest.mark.parametrize("sweep", ["Rv_over_Xv=1:0.1", "bogus=1:1:2", "L_v=2:1:1"])
    def test_bad_sweep(self, sweep, tmp_path):
        assert main(["eig", "--sweep", sweep, "--out", str(tmp_path / "m.csv")]) == 3


class TestCompare:
    def test_identical(self, fault_csv, capsys):
        assert main(["compare", str(fault_csv), str(fault_csv)]) == 0
        assert "max deviation 0.000000e+00" in capsys.readouterr().out

    def test_against_benchmark_columns(self, fault_csv):
        assert main(["compare", str(fault_csv), "--tol", "1e-6"]) == 0

    def test_offset(self, fault_csv, tmp_path):
        rows = read(fault_csv)
        k = rows[0].index("V_mag_bus4")
        for r in rows[1:]:
            r[k] = repr(float(r[k]) + 0.1)
        other = tmp_path / "shifted.csv"
        with open(other, "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
        assert main(["compare", str(fault_csv), str(other), "--tol", "1e-6"]) == 1

    def test_time_axes_differ(self, fault_csv, tmp_path):
        rows = read(fault_csv)[:-1]
        other = tmp_path / "short.csv"
        with open(other, "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
        assert main(["compare", str(fault_csv), str(other)]) == 3

    def test_missing_file(self, tmp_path):
        assert main(["compare", str(tmp_path / "a.csv"), str(tmp_path / "b.csv")]) == 3
