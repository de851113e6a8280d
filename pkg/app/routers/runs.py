# app/routers/runs.py
import json

from fastapi import APIRouter, Depends, HTTPException, Request
from fastapi.responses import JSONResponse
from sqlalchemy.orm import Session

from app.db.models import RoundMetric, Run

router = APIRouter()


def get_db(request: Request):
    """Сессия журнала, привязанного к приложению"""
    db = request.app.state.SessionLocal()
    try:
        yield db
    finally:
        db.close()


def _run_payload(run: Run) -> dict:
    return {
        "id": run.id,
        "arm": run.arm,
        "seed": int(run.seed),
        "rounds": run.rounds,
        "status": run.status,
        "out_dir": run.out_dir,
        "started_at": run.started_at.isoformat() if run.started_at else None,
        "finished_at": run.finished_at.isoformat() if run.finished_at else None,
    }


def _get_run_or_404(db: Session, run_id: int) -> Run:
    run = db.get(Run, run_id)
    if run is None:
        raise HTTPException(status_code=404, detail="Запуск не найден")
    return run


@router.get("/api/runs")
async def list_runs(db: Session = Depends(get_db)):
    """Все запуски, новые первыми"""
    runs = db.query(Run).order_by(Run.id.desc()).all()
    return JSONResponse({"runs": [_run_payload(r) for r in runs]})


@router.get("/api/runs/{run_id}")
async def get_run(run_id: int, db: Session = Depends(get_db)):
    run = _get_run_or_404(db, run_id)
    payload = _run_payload(run)
    payload["config"] = json.loads(run.config_json)
    payload["summary"] = json.loads(run.summary_json) if run.summary_json else None
    return JSONResponse(payload)


@router.get("/api/runs/{run_id}/rounds")
async def get_run_rounds(run_id: int, db: Session = Depends(get_db)):
    """Метрики по раундам в порядке номера раунда"""
    _get_run_or_404(db, run_id)
    rows = db.query(RoundMetric).filter(RoundMetric.run_id == run_id).order_by(RoundMetric.round).all()
    return JSONResponse({
        "run_id": run_id,
        "rounds": [
            {
                "round": r.round,
                "overall_acc": r.overall_accuracy,
                "minority_acc": r.minority_accuracy,
                "overall_recall": r.overall_recall,
                "minority_recall": r.minority_recall,
                "mean_ce": r.mean_ce,
                "mean_gan": r.mean_gan,
                "mean_mi": r.mean_mi,
                "bytes_up": r.bytes_up,
                "bytes_down": r.bytes_down,
            }
            for r in rows
        ],
    })
