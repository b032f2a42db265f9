"""End-to-end command runs over temp config files."""
import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from bdenv.cli import main

JUMP_CFG = """
[model]
name = "mm1"
[model.params]
lam = "env"
mu = 1.0

[environment]
kind = "jump"
states = [0.3, 0.5]
T = [[-1.0, 1.0], [2.0, -2.0]]
beta = "geometric:0.4"

[sim]
horizon = 800.0
seed = 7

[analysis]
n_max = 64
"""

DIFFUSIVE_CFG = """
[model]
name = "mminf"
[model.params]
lam = "env"
mu = 2.0
beta = "geometric:0.25"

[environment]
kind = "diffusive"
example = "rbm_halfline"
[environment.params]
c = 1.0
sigma = 1.4142135623730951

[sim]
horizon = 20.0
dt = 1e-3
burn_in = 2.0
seed = 11
replicas = 4
n_rows = 4
n_bins = 8
"""

POLY_CFG = """
[model]
name = "mm1"
[model.params]
lam = 1.0
mu = 2.0

[environment]
kind = "none"
z = 0.0

[sim]
seed = 3

[analysis]
kind = "polynomial"
n_max = 128
starts = [1, 2]
hitting_replicas = 300

[analysis.decay]
t_lo = 2.0
t_hi = 20.0
points = 5
replicas = 800
start_n = 6
"""

EXPO_CFG = """
[model]
name = "mm1"
[model.params]
lam = 0.3
mu = 1.0

[environment]
kind = "jump"
states = ["A", "B"]
T = [[-1.5, 1.5], [1.5, -1.5]]
beta = "geometric:0.3"

[sim]
seed = 5

[analysis]
kind = "exponential"
n_max = 128
coupling = true
coupling_samples = 600
coupling_horizon = 200.0
coupling_start = 4
"""


def run_cli(args):
    return main([str(a) for a in args])


def write_cfg(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_invariant_jump_writes_tables(tmp_path, capsys):
    cfg = write_cfg(tmp_path, JUMP_CFG)
    out = tmp_path / "out"
    rc = run_cli(["invariant", "--config", cfg, "--out", out])
    assert rc == 0
    assert (out / "invariant.csv").exists()
    assert (out / "assumptions.txt").exists()
    text = (out / "assumptions.txt").read_text()
    assert "PASS" in text and "FAIL" not in text
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["log_Xi"] > 0
    assert manifest["tail_bound"] < 1e-9


def test_invariant_mmk0_truncates_at_k(tmp_path):
    cfg_text = """
[model]
name = "mmk0"
[model.params]
lam = "env"
mu = 1.0
K = 3

[environment]
kind = "jump"
states = [0.5, 1.0]
T = [[-1.0, 1.0], [2.0, -2.0]]

[analysis]
n_max = 64
"""
    cfg = write_cfg(tmp_path, cfg_text)
    out = tmp_path / "out"
    assert run_cli(["invariant", "--config", cfg, "--out", out]) == 0
    with open(out / "levels.csv") as fh:
        levels = [int(row["n"]) for row in csv.DictReader(fh)]
    assert levels == [0, 1, 2, 3]


def test_environment_kind_conflict_rejected(tmp_path, capsys):
    bad = JUMP_CFG.replace('kind = "jump"', 'kind = "jump"\nexample = "rbm_halfline"')
    cfg = write_cfg(tmp_path, bad)
    rc = run_cli(["invariant", "--config", cfg, "--out", tmp_path / "o"])
    assert rc == 2
    err = capsys.readouterr().err
    assert "jump" in err and "diffusive" in err


def test_simulate_jump_round_trip(tmp_path, capsys):
    cfg = write_cfg(tmp_path, JUMP_CFG)
    out = tmp_path / "out"
    rc = run_cli(["simulate", "--config", cfg, "--out", out])
    assert rc == 0
    assert (out / "occupancy.csv").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 7
    assert "config_sha256" in manifest


def test_simulate_diffusive_prints_tv_line(tmp_path, capsys):
    cfg = write_cfg(tmp_path, DIFFUSIVE_CFG)
    out = tmp_path / "out"
    rc = run_cli(["simulate", "--config", cfg, "--out", out])
    assert rc == 0
    stdout = capsys.readouterr().out
    assert "TV vs analytic product form" in stdout
    manifest = json.loads((out / "manifest.json").read_text())
    assert 0.0 < manifest["tv_vs_analytic"] < 1.0


def test_simulate_rejects_burn_in_past_horizon(tmp_path, capsys):
    cfg = write_cfg(tmp_path, DIFFUSIVE_CFG.replace("burn_in = 2.0", "burn_in = 30.0"))
    rc = run_cli(["simulate", "--config", cfg, "--out", tmp_path / "o"])
    assert rc == 2
    assert "burn" in capsys.readouterr().err


def test_simulate_requires_seed_for_replicas(tmp_path, capsys):
    cfg = write_cfg(tmp_path, DIFFUSIVE_CFG.replace("seed = 11\n", ""))
    rc = run_cli(["simulate", "--config", cfg, "--out", tmp_path / "o"])
    assert rc == 2
    assert "seed" in capsys.readouterr().err


def test_simulate_reruns_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path, DIFFUSIVE_CFG)
    out1 = tmp_path / "a"
    out2 = tmp_path / "b"
    assert run_cli(["simulate", "--config", cfg, "--out", out1]) == 0
    assert run_cli(["simulate", "--config", cfg, "--out", out2]) == 0
    assert (out1 / "occupancy.csv").read_bytes() == (out2 / "occupancy.csv").read_bytes()


def test_rates_polynomial_route(tmp_path, capsys):
    cfg = write_cfg(tmp_path, POLY_CFG)
    out = tmp_path / "out"
    rc = run_cli(["rates", "--config", cfg, "--out", out])
    assert rc == 0
    stdout = capsys.readouterr().out
    assert "polynomial" in stdout
    assert (out / "bound_table.csv").exists()
    assert (out / "decay_curve.csv").exists()
    cert = json.loads((out / "rate_certificate.json").read_text())
    assert cert["C_V"] == pytest.approx(1.0)
    with open(out / "bound_table.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["n"]) for r in rows] == [1, 2]
    assert all(r["ok"] == "True" for r in rows)


def test_rates_exponential_route_with_coupling(tmp_path, capsys):
    cfg = write_cfg(tmp_path, EXPO_CFG)
    out = tmp_path / "out"
    rc = run_cli(["rates", "--config", cfg, "--out", out])
    assert rc == 0
    stdout = capsys.readouterr().out
    assert "probe-certified" in stdout  # alpha, gamma were fitted, not given
    assert "coupling tail" in stdout
    assert (out / "coupling_tail.csv").exists()
    cert = json.loads((out / "rate_certificate.json").read_text())
    assert cert["valid"] and cert["kappa"] > 0


def test_rates_refuses_scenario_one_in_heavy_traffic(tmp_path, capsys):
    heavy = EXPO_CFG.replace("lam = 0.3", "lam = 1.4").replace(
        "coupling = true", "coupling = false"
    ).replace('kind = "exponential"', 'kind = "exponential"\nmu_bar = 2.0')
    cfg = write_cfg(tmp_path, heavy)
    out = tmp_path / "out"
    run_cli(["rates", "--config", cfg, "--out", out])
    stdout = capsys.readouterr().out
    assert "scenario 1 refused" in stdout
    assert "s2" in stdout or "scenario 2" in stdout


def test_verify_subcommand_smoke(tmp_path, capsys):
    cfg = write_cfg(tmp_path, JUMP_CFG)
    out = tmp_path / "out"
    rc = run_cli(["verify", "--config", cfg, "--out", out])
    assert rc == 0
    assert "residual" in capsys.readouterr().out


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "bdenv.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "invariant" in proc.stdout
