from fastapi.testclient import TestClient

from AutoCal import __version__
from AutoCal.main import app

client = TestClient(app)

TINY = {"seed": 2, "path": "line", "path_length": 2.0, "noise_sigma": 0.5, "outlier_fraction": 0.0}


def test_healthz():
    r = client.get("/healthz")
    assert r.status_code == 200
    body = r.json()
    assert body["status"] == "ok" and body["version"] == __version__
    assert "zoom" in body["scenarios"]


def test_config_is_nested():
    body = client.get("/config").json()
    assert set(body) >= {"selfcal", "changedetect", "solver", "aac"}
    assert body["changedetect"]["n_test"] >= 1


def test_run_and_compare(tmp_path):
    out = str(tmp_path / "run")
    r = client.post("/run", json={"fields": TINY, "out": out})
    assert r.status_code == 200, r.text
    body = r.json()
    assert body["ok"] and body["rows"] == body["summary"]["n_keyframes"]
    r = client.post("/compare", json={"a": out, "b": out})
    assert r.status_code == 200
    assert r.json()["max_deviation"] == 0.0


def test_bad_scenario_is_a_client_error():
    assert client.post("/run", json={"fields": {"path": "spiral"}}).status_code == 400
    assert client.post("/run", json={"scenario": "no_such_scenario"}).status_code == 400
    assert client.post("/run", json={"fields": TINY, "alpha": 2.0}).status_code == 422


def test_compare_missing_reports(tmp_path):
    r = client.post("/compare", json={"a": str(tmp_path / "x"), "b": str(tmp_path / "y")})
    assert r.status_code == 400
    assert r.json()["detail"] == "missing_trace"
