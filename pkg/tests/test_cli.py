import csv
import io
import math
import subprocess
import sys

import pytest

from femtolb import analytic as an
from femtolb import cli
from femtolb.model import NetworkConfig


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr().out
    return code, out


def rows_of(text):
    return [{k: cli._parse_cell(v) for k, v in r.items()} for r in csv.DictReader(io.StringIO(text))]


def test_analyze_row(capsys):
    code, out = run(capsys, "analyze", "--set", "rho=0.5", "--set", "d_f=40")
    assert code == cli.EXIT_OK
    (row,) = rows_of(out)
    assert row["schema_version"] == cli.SCHEMA_VERSION
    assert row["tput_fms"] >= 0 and isinstance(row["slack_fms"], float) and isinstance(row["slack_oms"], float)
    assert list(rows_of(out)[0]) == list(cli.RESULT_COLUMNS)


def test_analyze_full_femto_share(capsys):
    code, out = run(capsys, "analyze", "-s", "rho=1", "-s", "d_f=40")
    assert code == 0 and rows_of(out)[0]["tput_mms"] == 0.0


def test_analyze_grid_of_points(capsys):
    code, out = run(capsys, "analyze", "-s", "rho=0.2,0.4", "-s", "d_f=30,50,70")
    assert code == 0 and len(rows_of(out)) == 6


def test_analyze_radius_below_home_is_infeasible(capsys):
    code, _ = run(capsys, "analyze", "-s", "rho=0.5", "-s", "d_f=10")
    assert code == cli.EXIT_INFEASIBLE


@pytest.mark.parametrize("argv", [["analyze", "-s", "bogus=1"], ["analyze", "-s", "rho=0.5"],
                                  ["analyze", "-s", "rho=x", "-s", "d_f=30"],
                                  ["simulate", "--drops", "0", "-s", "rho=0.3", "-s", "d_f=30"],
                                  ["sweep", "--axis", "M", "--values", "nan"]])
def test_configuration_errors(capsys, argv):
    assert run(capsys, *argv)[0] == cli.EXIT_CONFIG


def test_config_file(tmp_path, capsys):
    path = tmp_path / "scenario.cfg"
    path.write_text("N_f = 10\nrho = 0.4\nd_f = 50\n", encoding="utf-8")
    code, out = run(capsys, "analyze", "-c", str(path))
    assert code == 0
    row = rows_of(out)[0]
    assert row["d_max"] == pytest.approx(an.find_dmax(NetworkConfig(fbs_mean=10)))
    bad = tmp_path / "bad.cfg"
    bad.write_text("walls = 3\n", encoding="utf-8")
    assert run(capsys, "analyze", "-c", str(bad))[0] == cli.EXIT_CONFIG


def test_optimize_open_access_uses_dmax(capsys):
    code, out = run(capsys, "optimize", "--mode", "OA")
    row = rows_of(out)[0]
    assert code == 0
    assert row["d_f"] == pytest.approx(row["d_max"], abs=1e-3)
    assert row["fms_limited"] is True and row["prop4_condition"] is True


def test_optimize_hybrid_binding(capsys):
    code, out = run(capsys, "optimize", "--mode", "HA")
    row = rows_of(out)[0]
    assert row["binding"] == "fms+oms"
    assert row["tput_oms"] == pytest.approx(row["tput_mms"], rel=1e-8)


def test_optimize_thin_large_m(capsys):
    code, out = run(capsys, "optimize", "--mode", "OA-Thin", "-s", "M=200", "--thetas", "0.5,0.75,1")
    assert rows_of(out)[0]["theta"] == 1.0


def test_optimize_infeasible_exit(capsys):
    code, out = run(capsys, "optimize", "-s", "O_max=1e-6")
    assert code == cli.EXIT_INFEASIBLE
    assert rows_of(out)[0]["feasible"] is False


def test_csv_round_trip(tmp_path, capsys):
    path = tmp_path / "out.csv"
    code, _ = run(capsys, "analyze", "-s", "rho=0.3", "-s", "d_f=33.3", "-o", str(path))
    assert code == 0
    row = cli.read_rows(path)[0]
    rep = an.analyze(__import__("femtolb").ControlParams(rho=0.3, d_f=33.3), NetworkConfig())
    for key, value in rep.as_dict().items():
        assert row[key] == value          # exact, floats are written with repr


def test_deterministic_output(capsys):
    args = ("simulate", "--drops", "20", "--seed", "3", "-s", "rho=0.3", "-s", "d_f=40")
    _, a = run(capsys, *args)
    _, b = run(capsys, *args)
    strip = lambda t: [{k: v for k, v in r.items() if k != "runtime_s"} for r in rows_of(t)]
    assert strip(a) == strip(b)


def test_simulate_stream(tmp_path, capsys):
    stream = tmp_path / "drops.jsonl"
    code, out = run(capsys, "simulate", "--scheme", "CoRSSI", "--drops", "6", "--stream", str(stream))
    assert code == 0
    assert len(stream.read_text().splitlines()) == 6
    assert rows_of(out)[0]["drops"] == 6


def test_validate_without_femtocells(capsys):
    code, out = run(capsys, "validate", "-s", "N_f=0", "--drops", "200", "--d-f", "40", "--threshold", "0.05")
    assert code == 0
    rows = {r["metric"]: r for r in rows_of(out)}
    m = rows["se_mms"]
    assert abs(m["simulated"] - m["analytic"]) <= 3 * m["std_error"]
    assert rows["se_fms"]["within"] is None


def test_validate_threshold_exit(capsys):
    code, _ = run(capsys, "validate", "--drops", "10", "--d-f", "40", "--threshold", "1e-9")
    assert code == cli.EXIT_VALIDATION


def test_sweep_series(tmp_path, capsys):
    series = tmp_path / "series"
    code, out = run(capsys, "sweep", "--axis", "M", "--values", "2,10", "--series-dir", str(series),
                    "--thetas", "1")
    assert code == 0
    rows = rows_of(out)
    assert [r["sweep_value"] for r in rows] == [2.0, 10.0]
    lines = (series / "M_rho.dat").read_text().splitlines()
    assert lines[0].startswith("#")
    vals = [tuple(map(float, ln.split())) for ln in lines[1:]]
    assert vals == [(2.0, rows[0]["rho"]), (10.0, rows[1]["rho"])]


def test_sweep_radius(capsys):
    code, out = run(capsys, "sweep", "--axis", "d_f", "--values", "20,60", "-s", "rho=0.3")
    rows = rows_of(out)
    assert code == 0 and rows[0]["tput_oms"] > rows[1]["tput_oms"]


def test_report_conditions(capsys):
    code, out = run(capsys, "report-conditions")
    assert code == 0
    assert "x* = X_max" in out and "requires operator input" in out
    _, out = run(capsys, "report-conditions", "-s", "M=1e6")
    assert "<= 1" in out
    _, out = run(capsys, "report-conditions", "-s", "K=0")
    assert "fms-limited                            true" in out


def test_workers_from_environment(monkeypatch):
    monkeypatch.setenv("FEMTOLB_WORKERS", "3")
    assert cli.build_parser().parse_args(["simulate"]).workers == 3


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "femtolb", "analyze", "-s", "rho=0.5", "-s", "d_f=40"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert proc.stdout.startswith("schema_version,")
    assert proc.stderr == ""
