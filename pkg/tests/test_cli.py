import csv
import io
import os

import numpy as np
import pytest

from cscn.cli import (EXIT_OK, EXIT_VALIDATION, SweepSpec, chart_from_summary, main,
                      run_convergence_demo, run_sweep, svg_line_chart, svg_points)
from cscn.scenario import ConfigError, load_scenario, preset_config


@pytest.fixture
def short_config(tmp_path):
    path = tmp_path / "short.cfg"
    path.write_text(preset_config("desk", frames_per_block=4))
    return str(path)


def test_sweep_spec_rejects_empty_policies():
    with pytest.raises(ConfigError):
        SweepSpec("mu", [0.5], policies=[]).validate()


@pytest.mark.parametrize("param,values", [("mu", ["1.5"]), ("num_patterns", ["2.5"]),
                                          ("fronthaul_bandwidth", ["-1"]), ("alpha", ["1"])])
def test_sweep_spec_rejects_bad_values(param, values):
    with pytest.raises(ConfigError):
        SweepSpec(param, values).validate()


def test_sweep_spec_converts_values():
    spec = SweepSpec("num_patterns", ["2", "3"]).validate()
    assert spec.values == [2, 3]


def test_cli_validation_exit_codes(tmp_path, capsys):
    out = str(tmp_path / "o")
    assert main(["--out", out, "simulate", "--policy", "FIFO"]) == EXIT_VALIDATION
    assert main(["--out", out, "sweep", "--param", "mu", "--values", "2"]) == EXIT_VALIDATION
    assert main(["--out", out, "simulate", "--config", str(tmp_path / "missing.cfg")]) \
        == EXIT_VALIDATION
    assert "error" in capsys.readouterr().err


def test_cli_rejects_bad_thread_env(tmp_path, monkeypatch):
    monkeypatch.setenv("CSCN_THREADS", "many")
    assert main(["--out", str(tmp_path), "convergence", "--trials", "0"]) == EXIT_VALIDATION


def test_svg_round_trip():
    series = {"UC": [(0.1, 3.5), (0.5, 2.25)], "PCUD": [(0.1, 3.0), (0.5, 1.0 / 3.0)]}
    svg = svg_line_chart(series, "t", "x", "y")
    assert svg.startswith("<svg") or svg.startswith("<?xml")
    assert svg_points(svg) == series


def test_chart_from_summary_is_lossless():
    text = ("sweep_param,sweep_value,policy,seeds,mean_power_w,min_power_w,max_power_w\n"
            "mu,0.1,UC,5,2.5,2.0,3.0\nmu,0.3,UC,5,1.75,1.5,2.0\n")
    assert svg_points(chart_from_summary(text)) == {"UC": [(0.1, 2.5), (0.3, 1.75)]}


def test_convergence_zero_trials_warns(desk):
    with pytest.warns(RuntimeWarning):
        text, svg, finals = run_convergence_demo(desk, 0)
    assert finals == [] and len(text.splitlines()) == 1


def test_convergence_single_trial_descends_at_fixed_lambda(desk):
    text, _, finals = run_convergence_demo(desk, 1)
    rows = list(csv.DictReader(io.StringIO(text)))
    assert len(finals) == 1 and rows
    lam = [float(r["lambda"]) for r in rows]
    obj = [float(r["objective_w"]) for r in rows]
    for i in range(1, len(rows)):
        if lam[i] == lam[i - 1]:
            assert obj[i] <= obj[i - 1] * (1 + 1e-6) + 1e-12


def test_convergence_cli(tmp_path, capsys):
    out = tmp_path / "conv"
    assert main(["--out", str(out), "convergence", "--trials", "2"]) == EXIT_OK
    assert (out / "convergence.csv").exists() and (out / "convergence.svg").exists()
    assert len(svg_points((out / "convergence.svg").read_text())) == 2


def test_small_sweep_outputs(tmp_path, short_config):
    spec = SweepSpec("mu", ["0.2", "1.0"], policies=["UC", "GAC"], seeds=[0],
                     out_dir=str(tmp_path))
    metrics, summary = run_sweep(spec, open(short_config).read())
    assert len(metrics) == 4
    names = sorted(os.listdir(tmp_path))
    assert {"metrics.csv", "summary.csv", "sweep.svg"} <= set(names)
    assert sum(n.startswith("point_mu_") for n in names) == 2
    pts = svg_points((tmp_path / "sweep.svg").read_text())
    assert set(pts) == {"UC", "GAC"}
    rows = list(csv.DictReader(io.StringIO(summary)))
    for r in rows:
        assert float(r["mean_power_w"]) == dict(pts[r["policy"]])[float(r["sweep_value"])]


def test_simulate_cli_writes_metrics(tmp_path, short_config, capsys):
    out = tmp_path / "sim"
    code = main(["--out", str(out), "simulate", "--config", short_config, "--seed", "1",
                 "--policy", "UC", "--policy", "LRU"])
    assert code == EXIT_OK
    text = (out / "simulate_seed1.csv").read_text()
    assert text.startswith("# cscn block metrics v1")
    assert "UC" in capsys.readouterr().out
