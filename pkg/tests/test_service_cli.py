import json
import warnings

import pytest
from click.testing import CliRunner

import pardespot.harness.episode as episode_mod
from pardespot.cli import SEARCH_FLAGS, main
from pardespot.harness.results import OUTPUT_ENV
from pardespot.service import app
from pardespot.tree import SearchConfig

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    from fastapi.testclient import TestClient

QUICK = {"K": 20, "max_trials": 8, "time_budget": None}


@pytest.fixture(scope="module")
def client():
    return TestClient(app)


def test_health_and_domains(client):
    assert client.get("/health").json()["status"] == "ok"
    names = client.get("/domains").json()
    assert {"navigation", "mars", "driving", "tiger", "chain"} <= set(names)


def test_plan_endpoint(client):
    r = client.post("/plan", json={"domain": "tiger", "search": QUICK, "particles": 100, "include_tree": True})
    assert r.status_code == 200
    body = r.json()
    assert body["action"] in (0, 1, 2)
    assert body["tree"]["node_count"] == body["stats"]["node_count"]


def test_plan_with_explicit_belief(client):
    belief = {"states": [0, 1], "weights": [0.02, 0.98]}
    r = client.post("/plan", json={"domain": "tiger", "search": {"K": 200, "time_budget": 1.0}, "belief": belief})
    assert r.status_code == 200 and r.json()["action"] == 1


def test_bad_requests(client):
    assert client.post("/plan", json={"domain": "nope"}).status_code == 404
    assert client.post("/plan", json={"domain": "navigation", "domain_params": {"size": 2}}).status_code == 422
    assert client.post("/plan", json={"search": {"K": 0}}).status_code == 422
    assert client.post("/plan", json={"search": {"bogus": 1}}).status_code == 422
    assert client.post("/episode", json={"variant": "turbo"}).status_code == 422
    r = client.post("/sweep", json={"domain": "tiger", "param": "nonsense", "values": [1], "write": False})
    assert r.status_code == 422


def test_episode_and_experiment_endpoints(client, tmp_path):
    r = client.post("/episode", json={"domain": "tiger", "search": QUICK, "variant": "serial",
                                      "particles": 100, "seed": 2})
    assert r.status_code == 200 and not r.json()["aborted"]
    r = client.post("/experiment", json={"domain": "tiger", "search": QUICK, "episodes": 2,
                                         "particles": 100, "output": str(tmp_path)})
    body = r.json()
    assert body["aborted"] == 0 and set(body["files"]) >= {"episodes", "summary"}
    r = client.post("/sweep", json={"domain": "tiger", "search": {"K": 10, "time_budget": 0.02}, "episodes": 1,
                                    "param": "K", "values": [5, 10], "output": str(tmp_path)})
    assert r.status_code == 200
    assert json.loads(open(r.json()["files"]["sweep"]).read())["param"] == "K"


def test_search_settings_cover_every_config_field():
    flag_fields = {f for _, f, _, _ in SEARCH_FLAGS} | {"clamp", "record_bounds", "trace", "audit"}
    assert flag_fields == set(SearchConfig.__dataclass_fields__)


# -- command line -----------------------------------------------------------------------


def run(*args, env=None):
    return CliRunner().invoke(main, list(args), env=env, catch_exceptions=False)


def test_cli_plan(tmp_path):
    out = tmp_path / "tree.json"
    res = run("--json", "plan", "-d", "navigation", "-p", "size=5", "--K", "20", "--max-trials", "5",
              "--particles", "100", "--tree-out", str(out))
    assert res.exit_code == 0, res.output
    body = json.loads(res.output)
    assert json.loads(out.read_text())["node_count"] == body["stats"]["node_count"]


def test_cli_episode_and_exit_code(monkeypatch, tmp_path):
    res = run("episode", "-d", "tiger", "--variant", "serial", "--K", "20", "--max-trials", "5",
              "--particles", "100")
    assert res.exit_code == 0, res.output

    def broken(*a, **kw):
        raise RuntimeError("no plan today")

    monkeypatch.setattr(episode_mod, "plan", broken)
    res = run("episode", "-d", "tiger", "--variant", "serial", "--K", "20", "--particles", "100")
    assert res.exit_code == 2
    res = run("experiment", "-d", "tiger", "-n", "1", "--variants", "serial", "--K", "5", "--particles", "50",
              "-o", str(tmp_path))
    assert res.exit_code == 2


def test_cli_experiment_uses_output_env(tmp_path):
    target = tmp_path / "from-env"
    res = run("experiment", "-d", "tiger", "-n", "2", "--variants", "serial,hybrid", "--K", "20",
              "--max-trials", "5", "--workers", "2", "--particles", "100", env={OUTPUT_ENV: str(target)})
    assert res.exit_code == 0, res.output
    assert (target / "episodes.csv").exists() and (target / "summary.json").exists()


def test_cli_sweep(tmp_path):
    res = run("--json", "sweep", "-d", "tiger", "--over", "K", "--values", "5,10", "--runs", "1",
              "--time-budget", "0.02", "--particles", "100", "-o", str(tmp_path))
    assert res.exit_code == 0, res.output
    assert [p["value"] for p in json.loads(res.output)["result"]["points"]] == [5, 10]


def test_cli_rejects_bad_input():
    res = CliRunner().invoke(main, ["plan", "--K", "0"])
    assert res.exit_code != 0
    res = CliRunner().invoke(main, ["plan", "-p", "size"])
    assert res.exit_code != 0 and "KEY=VALUE" in res.output
