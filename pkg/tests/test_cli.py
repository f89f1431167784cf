import json
import subprocess
import sys
from pathlib import Path

import pytest

from conelq.cli import main, parse_overrides
from conelq.errors import UnknownConfigKey, ValidationError

from conftest import GOLDEN

DATA = Path(__file__).resolve().parent.parent / "data"


def run(tmp_path, *args):
    out = tmp_path / "out"
    code = main([*args, "--out", str(out)])
    return code, out


def read(path):
    return json.loads(path.read_text())


def test_solve_golden(tmp_path):
    code, out = run(tmp_path, "solve", "--input", str(DATA / "golden.json"))
    assert code == 0
    meta = read(out / "solution.json")
    assert meta["P1_0"][0] == pytest.approx(GOLDEN, abs=1e-8)
    assert (out / "solution.csv").read_text().startswith("t,regime,P1,P2\n")


def test_error_buckets(tmp_path):
    code, out = run(tmp_path, "solve", "--input", str(tmp_path / "missing.json"))
    assert code == 1 and read(out / "error.json")["code"] == "IO"
    code, out = run(tmp_path, "solve", "--input", str(DATA / "unstable.json"))
    assert code == 2 and read(out / "error.json")["code"] == "STABILITY_VIOLATED"
    code, out = run(tmp_path, "solve", "--input", str(DATA / "golden.json"), "--set", "solver.stepsize=1")
    assert code == 2 and read(out / "error.json")["code"] == "UNKNOWN_CONFIG_KEY"
    code, out = run(tmp_path, "solve", "--input", str(DATA / "golden.json"), "--set", "solver.step=2.5")
    assert code == 4 and read(out / "error.json")["code"] == "STEP_TOO_LARGE"


def test_overrides_parse():
    solver, sim = parse_overrides(["solver.step=0.1", "sim.antithetic=true", "sim.paths=10",
                                   "solver.horizon0=5"])
    assert solver == {"step": 0.1, "horizon0": 5.0}
    assert sim == {"antithetic": True, "paths": 10}
    with pytest.raises(UnknownConfigKey):
        parse_overrides(["mc.paths=3"])
    with pytest.raises(ValidationError):
        parse_overrides(["sim.paths"])
    with pytest.raises(ValidationError):
        parse_overrides(["sim.paths=many"])


def test_simulate(tmp_path):
    code, out = run(tmp_path, "simulate", "--input", str(DATA / "golden_noisy.json"), "--paths", "200",
                    "--dt", "0.01", "--horizon", "5", "--seed", "9", "--dump-paths")
    assert code == 0
    rep = read(out / "simulation.json")
    assert rep["paths"] == 200 and rep["seed"] == 9 and rep["T"] == 5.0
    assert rep["value_function"] == pytest.approx(GOLDEN, abs=1e-8)
    assert len((out / "paths.csv").read_text().splitlines()) == 201


def test_verify_passes_and_is_reproducible(tmp_path):
    reports = []
    for k in range(2):
        out = tmp_path / f"v{k}"
        assert main(["verify", "--input", str(DATA / "golden_noisy.json"), "--out", str(out)]) == 0
        reports.append((out / "verify.json").read_bytes())
    assert reports[0] == reports[1]
    rep = json.loads(reports[0])
    assert rep["passed"] and all(c["status"] == "pass" for c in rep["checks"])
    assert all(c["margin"] >= 0 for c in rep["checks"])


def test_verify_coarse_step_fails_monotonicity(tmp_path):
    code, out = run(tmp_path, "verify", "--input", str(DATA / "golden.json"), "--set", "solver.step=1.35")
    assert code == 3
    assert read(out / "error.json")["code"] == "MONOTONICITY_VIOLATED"
    rep = read(out / "verify.json")
    assert not rep["passed"]
    mono = next(c for c in rep["checks"] if c["name"] == "monotonicity")
    assert mono["status"] == "fail" and mono["margin"] < 0


def test_verify_skips_positivity_without_state_weight(tmp_path):
    code, out = run(tmp_path, "verify", "--input", str(DATA / "zero_weight.json"))
    assert code == 0
    status = {c["name"]: c["status"] for c in read(out / "verify.json")["checks"]}
    assert status["positivity"] == "skipped"


def test_verify_one_sided_cone(tmp_path):
    code, out = run(tmp_path, "verify", "--input", str(DATA / "two_regime_orthant.json"), "--paths", "400")
    assert code == 0
    status = {c["name"]: c["status"] for c in read(out / "verify.json")["checks"]}
    assert status["symmetric_collapse"] == "skipped"
    assert status["algebraic_consistency"] == "skipped"
    assert status["hamiltonian_oracle"] == "pass"


def test_portfolio(tmp_path):
    code, out = run(tmp_path, "portfolio", "--input", str(DATA / "market_single.json"))
    assert code == 0
    rep = read(out / "portfolio.json")
    assert rep["P2_per_regime"][0] == pytest.approx(0.42918454935622, abs=1e-6)
    assert rep["closed_form_checks"][0]["abs_err"] < 1e-6
    code, out = run(tmp_path, "portfolio", "--input", str(DATA / "market_two_regime.json"))
    assert code == 0
    assert all(c["abs_err"] < 1e-6 for c in read(out / "portfolio.json")["closed_form_checks"])
    code, out = run(tmp_path, "portfolio", "--input", str(DATA / "market_ill_posed.json"))
    assert code == 2 and read(out / "error.json")["code"] == "ILL_POSED"


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("CONELQ_OUT", str(tmp_path / "env"))
    assert main(["solve", "--input", str(DATA / "golden.json")]) == 0
    assert (tmp_path / "env" / "solution.json").exists()


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "conelq.cli", "solve", "--input", str(DATA / "unstable.json"),
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "STABILITY_VIOLATED" in proc.stderr


def test_verify_deterministic_golden_budgets_euler_bias(tmp_path):
    code, out = run(tmp_path, "verify", "--input", str(DATA / "golden.json"))
    assert code == 0
    mc = next(c for c in read(out / "verify.json")["checks"] if c["name"] == "mc_value")
    # no noise: the only gap is time-discretization bias
    assert mc["stderr"] < 1e-12
    assert 0 < abs(mc["mean"] - mc["value"]) <= mc["discretization_allowance"]
