import json
import subprocess
import sys

import pytest

from conftest import CONFIGS, load_config
from singbsde import cli
from singbsde.errors import ConfigError, InvariantViolation, NumericalError

SMALL = {"grid": {"nt": 100, "nx": 51}}


def small(name="arctan"):
    return load_config(name, **SMALL)


@pytest.mark.parametrize("raw, fragment", [
    ({"model": {"family": "arctan", "q": 2, "typo": 1}}, "typo"),
    ({"model": {"family": "arctan", "q": 2}, "grid": {"nt": 0}}, "grid/nt"),
    ({"model": {"family": "arctan", "q": 2}, "extra": {}}, "extra"),
    ({"model": {"family": "arctan", "q": 2, "g0": 0.5}}, "g0"),
    ({"model": {"family": "arctan"}}, "p or q"),
    ({"model": {"family": "arctan", "p": 2, "q": 3}}, "conjugate"),
    ({"model": {"family": "arctan", "q": 2}, "solver": {"ell": 5, "rho": 4}}, "ell"),
    ({"model": {"family": "arctan", "q": 2}, "solver": {"levels": [16, 4]}}, "increasing"),
    ({"model": {"family": "nope", "q": 2}}, "family"),
])
def test_config_errors(raw, fragment):
    with pytest.raises(ConfigError, match=fragment):
        cli.resolve_config(raw)


def test_defaults_fill_missing_blocks():
    cfg = cli.resolve_config({"model": {"family": "constant", "q": 2}})
    assert cfg["grid"]["nt"] == cli.DEFAULTS["grid"]["nt"]
    assert cfg["mc"]["seed"] == 0


def test_shipped_configs_are_valid():
    for path in sorted(CONFIGS.glob("*.json")):
        cfg = cli.load_config(path)
        cli.build_model(cfg)
        cli.build_grid(cfg)


def test_invalid_model_parameters_are_config_errors():
    with pytest.raises(ConfigError):
        cli.build_model(cli.resolve_config({"model": {"family": "umi", "q": 2, "wave": 2.0}}))


def test_exit_code_for_config_error(tmp_path):
    code, run = cli.run("picard", {"model": {"family": "arctan", "q": 2, "bad": 1}}, tmp_path)
    assert code == cli.EXIT_CONFIG and run is None


@pytest.mark.parametrize("exc, expected", [
    (NumericalError("boom"), cli.EXIT_NUMERICAL),
    (InvariantViolation("broken"), cli.EXIT_INVARIANT),
])
def test_exit_codes_for_failures(tmp_path, monkeypatch, exc, expected):
    def fail(run, spec, grid):
        raise exc
    monkeypatch.setitem(cli.COMMANDS, "picard", fail)
    code, run = cli.run("picard", small(), tmp_path)
    assert code == expected
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["pass"] is False


def test_failed_check_gives_invariant_exit(tmp_path, monkeypatch):
    def fail(run, spec, grid):
        run.check("always", False, 1.0, 0.0)
    monkeypatch.setitem(cli.COMMANDS, "picard", fail)
    code, _ = cli.run("picard", small(), tmp_path)
    assert code == cli.EXIT_INVARIANT


def test_run_writes_artifacts(tmp_path):
    code, run = cli.run("picard", small(), tmp_path, seed=5)
    assert code == 0
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["mc"]["seed"] == 5
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["subcommand"] == "picard" and summary["pass"]
    assert (tmp_path / "picard_report.csv").read_text().startswith("iteration,")


def test_json_only_output_skips_csv(tmp_path):
    cfg = small()
    cfg["outputs"] = {"formats": ["json"]}
    cli.run("picard", cfg, tmp_path)
    assert not list(tmp_path.glob("*.csv"))


def test_seed_range(tmp_path):
    code, _ = cli.run("picard", small(), tmp_path, seed=-1)
    assert code == cli.EXIT_CONFIG


def test_verify_oracle_constant(tmp_path):
    code, run = cli.run("verify-oracle", small("constant"), tmp_path)
    assert code == 0
    names = {c["name"] for c in run.checks}
    assert {"truncated_vs_closed_form", "H_zero_for_constant_case"} <= names


def test_main_entry_point(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(small()))
    proc = subprocess.run([sys.executable, "-m", "singbsde", "verify-oracle", "--config",
                           str(path), "--out", str(tmp_path / "out")],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "PASS  kernel_vs_integral_representation" in proc.stdout
    bad = subprocess.run([sys.executable, "-m", "singbsde", "picard", "--config",
                          str(tmp_path / "missing.json")], capture_output=True, text=True)
    assert bad.returncode == cli.EXIT_CONFIG
    assert cli.main(["picard", "--config", str(path), "--threads", "0"]) == cli.EXIT_CONFIG
