import io

import pytest
import yaml

from mvnash.cli import SEED_ENV, run

BASE = """\
market:
  horizon: 1.0
  r: 0.03
agents:
  - {{theta: {t}, gamma: 2.0, x0: 1.0, mu: 0.07, sigma: 0.2}}
  - {{theta: {t}, gamma: 4.0, x0: 2.0, mu: 0.07, sigma: 0.2}}
driver:
  steps: 10
  mode: recombining
"""


@pytest.fixture
def cfg(tmp_path):
    def write(theta=0.5, name="game.yaml", text=None):
        p = tmp_path / name
        p.write_text(text if text is not None else BASE.format(t=theta))
        return str(p)

    return write


def call(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = run(list(argv), stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


def test_classify_unique(cfg):
    code, out, _ = call("classify", cfg())
    assert code == 0
    doc = yaml.safe_load(out)
    assert doc["classification"] == "Unique" and doc["psi"] == pytest.approx(2 / 3)
    assert len(doc["strategies_t0"]) == 2 and doc["provenance"]["steps"] == 10
    assert "# Unique" in out


def test_classify_marginal_none_prints_xi_witness(cfg):
    code, out, _ = call("classify", cfg(theta=1.0))
    doc = yaml.safe_load(out)
    assert code == 0 and doc["classification"] == "None"
    assert doc["witness"]["xi_norm"] > 0 and "xi_norm" in out.splitlines()[-1]


def test_round_trip_profile_and_verify(cfg, tmp_path):
    prof = str(tmp_path / "p.csv")
    assert call("classify", cfg(), "--out", prof)[0] == 0
    code, out, _ = call("verify", cfg(), "--profile", prof)
    assert code == 0 and yaml.safe_load(out)["passed"] is True


def test_verify_failure_exit_code(cfg, tmp_path):
    prof = tmp_path / "p.csv"
    call("classify", cfg(), "--out", str(prof))
    lines = prof.read_text().splitlines()
    bad = [lines[0]] + [",".join(r.split(",")[:2] + [repr(1.5 * float(r.split(",")[2])), r.split(",")[3]]) for r in lines[1:]]
    prof.write_text("\n".join(bad) + "\n")
    code, _, err = call("verify", cfg(), "--profile", str(prof))
    assert code == 3 and "agent 1" in err


def test_missing_gamma_exit_one(cfg):
    code, _, err = call("classify", cfg(text=BASE.format(t=0.5).replace("gamma: 4.0, ", "")))
    assert code == 1 and "agents[2]" in err and "gamma" in err


def test_io_error_exit_four(tmp_path):
    code, _, err = call("classify", str(tmp_path / "missing.yaml"))
    assert code == 4 and "i/o error" in err


def test_solver_error_exit_two(cfg):
    # every theta = 1 and no equilibrium: nothing to simulate
    code, _, err = call("simulate", cfg(theta=1.0), "--paths", "100")
    assert code == 2 and "--profile" in err


def test_solve_agent_and_frontier(cfg):
    code, out, _ = call("solve-agent", cfg(), "--agent", "1")
    doc = yaml.safe_load(out)
    assert code == 0 and doc["agent"] == 1 and doc["variance"] > 0
    code, out, _ = call("frontier", cfg(), "--agent", "2", "--d-grid", "0:0.1:5")
    lines = out.strip().splitlines()
    assert code == 0 and lines[0] == "d,variance,lambda" and len(lines) == 6
    assert call("frontier", cfg(), "--agent", "3", "--d-grid", "0:1:2")[0] == 1
    assert call("frontier", cfg(), "--agent", "1", "--d-grid", "oops")[0] == 1


def test_simulate_seed_precedence_and_stability(cfg, tmp_path, monkeypatch):
    base = ("simulate", cfg(), "--paths", "3000", "--format", "columnar")
    a = call(*base, "--seed", "5")[1]
    assert a == call(*base, "--seed", "5", "--workers", "8")[1]
    monkeypatch.setenv(SEED_ENV, "5")
    assert call(*base)[1] == a
    assert call(*base, "--seed", "6")[1] != a
    monkeypatch.setenv(SEED_ENV, "x")
    assert call(*base)[0] == 1


def test_simulate_writes_per_path_table(cfg, tmp_path):
    out = tmp_path / "paths.csv"
    code, _, _ = call("simulate", cfg(), "--paths", "50", "--out", str(out))
    rows = out.read_text().splitlines()
    assert code == 0 and rows[0] == "path,z_1,z_2" and len(rows) == 51
    code, _, _ = call("simulate", cfg(), "--scheme", "tree", "--mode", "fullbinary", "--steps", "4", "--out", str(out))
    assert code == 0 and len(out.read_text().splitlines()) == 17


def test_overrides_and_bad_arguments(cfg):
    code, out, _ = call("classify", cfg(), "--steps", "4", "--mode", "fullbinary")
    doc = yaml.safe_load(out)
    assert doc["provenance"] == {"config": "game.yaml", "steps": 4, "mode": "fullbinary", "horizon": 1.0, "tol": 1e-8}
    assert call("classify")[0] == 1
