import importlib

from fastapi.testclient import TestClient

from fslora.config import validate_config
from fslora.runner import execute_run

CFG = {
    "rounds": 6,
    "rank": 4,
    "task": {"m": 5, "n": 4, "true_rank": 1, "sample_count": 60, "holdout_count": 10},
    "clients": {"count": 2, "local_steps": 1},
}


def _client(monkeypatch) -> TestClient:
    monkeypatch.setenv("FSL_API_MAX_POINTS", "4")

    import fslora.api as api_mod

    importlib.reload(api_mod)
    return TestClient(api_mod.app)


def test_health_reports_settings(monkeypatch, runs_root) -> None:
    client = _client(monkeypatch)
    r = client.get("/health")
    assert r.status_code == 200
    payload = r.json()
    assert payload["ok"] is True
    assert payload["settings"]["api_max_points"] == 4


def test_runs_manifest_metrics_and_curve(monkeypatch, runs_root) -> None:
    client = _client(monkeypatch)
    assert client.get("/api/runs").json() == {"runs": []}

    execute_run(validate_config(CFG), root=runs_root, run_id="demo")

    runs = client.get("/api/runs").json()["runs"]
    assert [r["run_id"] for r in runs] == ["demo"]
    assert runs[0]["status"] == "completed"

    manifest = client.get("/api/runs/demo/manifest").json()
    assert manifest["rounds_completed"] == 6
    assert manifest["config"]["rank"] == 4

    rows = client.get("/api/runs/demo/metrics").json()["rows"]
    assert [r["round"] for r in rows] == [1, 2, 3, 4, 5, 6]

    curve = client.get("/api/runs/demo/curve", params={"field": "train_loss", "max_points": "100"}).json()
    assert curve["field"] == "train_loss"
    assert len(curve["points"]) <= 5
    assert curve["points"][-1] == {"round": 6, "value": rows[-1]["train_loss"]}

    assert client.get("/api/runs/demo/curve", params={"field": "wall_time_s"}).status_code == 400


def test_missing_and_unsafe_run_ids_are_404(monkeypatch, runs_root) -> None:
    client = _client(monkeypatch)
    for path in ("/api/runs/nope/manifest", "/api/runs/nope/metrics", "/api/runs/nope/curve", "/api/runs/../manifest"):
        r = client.get(path)
        assert r.status_code == 404
    r = client.get("/api/runs/nope/manifest")
    assert r.json() == {"ok": False, "error": "run not found"}


def test_cost_endpoint(monkeypatch, runs_root) -> None:
    client = _client(monkeypatch)
    r = client.post("/api/costs", json={"m": 12, "n": 10, "r": 8, "ks": [2, 8]})
    assert r.status_code == 200
    payload = r.json()
    assert payload["q"] == 4 * 8 * 22
    assert payload["P"] == 4 * 12 * 10
    assert {row["method"] for row in payload["rows"]} == {"fslora", "fedlora", "heterolora", "flexlora", "flora"}

    assert client.post("/api/costs", json={"m": 12, "n": 10, "r": 8, "ks": [9]}).status_code == 400
    assert client.post("/api/costs", json={"m": 12, "n": 10, "r": 8, "ks": []}).status_code == 422
