import json
import socket
import threading

import numpy as np
import pytest
from click.testing import CliRunner

from conftest import FIXTURES
from synthverify.cli import main, parse_periods, split_intervals
from synthverify.dp import BudgetLedger, KeyedRandom
from synthverify.sandbox import simulate_wage_panel, simulate_workforce
from synthverify.server import VerificationService, make_server

FORMULA = str(FIXTURES / "wage_formula.toml")
SCHEMA = str(FIXTURES / "wage_schema.toml")


@pytest.fixture(scope="module")
def panel_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "panel.csv"
    simulate_wage_panel(300, np.full(6, -0.05), rng=3).to_csv(path)
    return str(path)


@pytest.fixture
def server(panel_csv):
    from synthverify.panel import load_csv, load_schema

    data = load_csv(panel_csv, load_schema(SCHEMA))
    svc = VerificationService(data, BudgetLedger(1.0), KeyedRandom("k"), {"a1": "t1"})
    srv = make_server(svc, port=0)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    host, port = srv.server_address[:2]
    yield svc, ["--url", f"http://{host}:{port}", "--token", "t1", "--analysis-id", "a1"]
    srv.shutdown()
    srv.server_close()


def run(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


def test_verify_coef_success_then_budget_refusal(server):
    svc, conn = server
    args = [*conn, "verify-coef", "--formula", FORMULA, "--coefficient", "race[black]",
            "--gamma0", -0.01, "--M", 10, "--epsilon", 0.5, "--gamma1", 0.5]
    first = run(*args)
    assert first.exit_code == 0, first.output
    assert "S_noisy" in first.output and "theta[" in first.output
    assert run(*args).exit_code == 0
    third = run(*args)
    assert third.exit_code == 3 and "budget" in third.output
    assert svc.ledger.spent("a1") == 1.0


def test_json_output_and_budget_command(server):
    _, conn = server
    out = run("--format", "json", *conn, "verify-trend", "--formula", FORMULA, "--coefficient", "race[black]",
              "--periods", "1-3,3-6", "--intervals", "neg,(-1,0)", "--M", 10, "--epsilon", 0.25)
    assert out.exit_code == 0, out.output
    doc = json.loads(out.output)
    assert len(doc["releases"]) == 2 and doc["epsilon_spent"] == 0.5
    status = run(*conn, "budget")
    assert status.exit_code == 0 and "spent 0.5 of 1" in status.output


def test_default_epsilon_is_announced(server):
    _, conn = server
    out = run(*conn, "verify-coef", "--formula", FORMULA, "--coefficient", "race[black]", "--interval", "neg",
              "--M", 10)
    assert out.exit_code == 0 and "default epsilon 1" in out.output


@pytest.mark.parametrize("extra", [
    ["--coefficient", "race[black]"],  # no interval
    ["--coefficient", "race[black]", "--gamma0", -0.01, "--interval", "neg"],
    ["--coefficient", "race[purple]", "--gamma0", -0.01],
    ["--coefficient", "race[black]", "--gamma0", -0.01, "--M", 1],
])
def test_validation_exit_code(server, extra):
    svc, conn = server
    out = run(*conn, "verify-coef", "--formula", FORMULA, "--M", 10, *extra)
    assert out.exit_code == 2, out.output
    assert svc.ledger.spent("a1") == 0


def test_missing_token_is_validation():
    out = run("--analysis-id", "a1", "verify-coef", "--formula", FORMULA, "--coefficient", "x", "--gamma0", 0)
    assert out.exit_code == 2


def test_transport_exit_code():
    out = run("--url", "http://127.0.0.1:9", "--token", "t", "--analysis-id", "a1", "verify-coef",
              "--formula", FORMULA, "--coefficient", "race[black]", "--gamma0", -0.01)
    assert out.exit_code == 4


def test_calibrate_m_is_offline_and_deterministic(panel_csv, monkeypatch):
    def no_socket(*a, **k):
        raise AssertionError("calibrate-m opened a socket")

    monkeypatch.setattr(socket, "socket", no_socket)
    args = ["--format", "json", "calibrate-m", "--data", panel_csv, "--schema", SCHEMA, "--formula", FORMULA,
            "--coefficient", "race[black]", "--gamma0", -0.01, "--candidates", "5,20", "--replications", 3,
            "--seed", 9]
    a, b = run(*args), run(*args)
    assert a.exit_code == 0, a.output
    assert a.output == b.output
    rows = json.loads(a.output)["rows"]
    assert [r["M"] for r in rows] == [5, 20]


def test_analyze(panel_csv):
    out = run("analyze", "--data", panel_csv, "--schema", SCHEMA, "--formula", FORMULA, "--per-year")
    assert out.exit_code == 0, out.output
    assert "race[black]" in out.output and "per-year race[black]:" in out.output
    bad = run("analyze", "--data", panel_csv, "--schema", str(FIXTURES / "workforce_schema.toml"),
              "--formula", FORMULA)
    assert bad.exit_code == 2


def test_synth_and_risk(tmp_path):
    train = tmp_path / "train.csv"
    training = simulate_workforce(300, n_years=8, rng=4)
    training.to_csv(train)
    schema = str(FIXTURES / "workforce_schema.toml")
    out = tmp_path / "syn.csv"
    made = run("synth", "--data", train, "--schema", schema, "--plan", FIXTURES / "workforce_plan.toml",
               "--count", 200, "--seed", 1, "--out", out)
    assert made.exit_code == 0, made.output
    assert out.exists()
    report = run("--format", "json", "risk", "--confidential", train, "--synthetic", out, "--schema", schema,
                 "--keys", "agency,gender", "--sensitive", "race", "--threshold", 0.5)
    assert report.exit_code == 0, report.output
    assert json.loads(report.output)["n_entities"] == training.n_entities
    bad = run("risk", "--confidential", train, "--synthetic", out, "--schema", schema,
              "--keys", "agency", "--sensitive", "race", "--threshold", 2)
    assert bad.exit_code == 2


def test_argument_parsers():
    assert parse_periods("1988-2003, 2003-2011") == ((1988, 2003), (2003, 2011))
    assert split_intervals("neg,(-0.03,-0.01),pos") == ["neg", "(-0.03,-0.01)", "pos"]
    assert run("verify-trend", "--formula", FORMULA, "--coefficient", "c", "--periods", "1988",
               "--intervals", "neg").exit_code == 2


def test_example_configs_load(monkeypatch):
    from synthverify.client import ClientConfig
    from synthverify.server import ServerConfig
    from synthverify.synth.sequential import load_plan

    configs = FIXTURES.parent.parent / "configs"
    monkeypatch.setenv("SYNTHVERIFY_SECRET", "x")
    cfg = ServerConfig.load(configs / "server.toml")
    assert cfg.disjointness_variable == "race" and cfg.schema.name == "wage_schema.toml"
    assert ClientConfig.load(configs / "client.toml").analysis_id == "a1"
    load_plan(configs / "workforce_plan.toml")
