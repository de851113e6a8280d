# tests/test_api.py
import pytest
from fastapi.testclient import TestClient

from app import config
from app.main import create_app
from app.services.experiment import run_experiment
from tests.conftest import small_config


@pytest.fixture
def ledger(tmp_path, monkeypatch):
    path = tmp_path / "ledger.db"
    monkeypatch.setattr(config, "LEDGER_PATH", str(path))
    return path


@pytest.fixture
def api(ledger):
    return TestClient(create_app(ledger))


def test_empty_ledger(api):
    response = api.get("/api/runs")
    assert response.status_code == 200
    assert response.json() == {"runs": []}


def test_finished_run_is_listed(tmp_path, ledger, api):
    result = run_experiment(small_config(tmp_path, arm="fedavg"))
    runs = api.get("/api/runs").json()["runs"]
    assert len(runs) == 1
    assert runs[0]["id"] == result.run_id
    assert runs[0]["status"] == "finished" and runs[0]["arm"] == "fedavg"

    detail = api.get(f"/api/runs/{result.run_id}").json()
    assert detail["config"]["arm"] == "fedavg"
    assert detail["summary"] == result.summary

    rounds = api.get(f"/api/runs/{result.run_id}/rounds").json()["rounds"]
    assert [r["round"] for r in rounds] == [0, 1]
    assert rounds[-1]["overall_acc"] == result.reports[-1].metrics.overall_accuracy
    assert rounds[0]["bytes_up"] == result.reports[0].total_uploaded


def test_unknown_run_is_404(api):
    assert api.get("/api/runs/42").status_code == 404
    assert api.get("/api/runs/42/rounds").json()["detail"] == "Запуск не найден"


def test_api_is_read_only(api):
    assert api.post("/api/runs").status_code == 405


def test_run_with_full_width_seed(tmp_path, ledger, api):
    seed = 2**64 - 1
    result = run_experiment(small_config(tmp_path, arm="local", rounds=1, seed=seed))
    runs = api.get("/api/runs").json()["runs"]
    assert runs[0]["seed"] == seed
    assert runs[0]["status"] == "finished"
    assert api.get(f"/api/runs/{result.run_id}").json()["summary"]["seed"] == seed
