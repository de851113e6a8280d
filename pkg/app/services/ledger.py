# app/services/ledger.py
"""Журнал запусков в SQLite: запуск и метрики по раундам"""
import json
import logging
from datetime import datetime, timezone
from pathlib import Path

from app.db.models import RoundMetric, Run, init_db, make_engine, make_session_factory
from app.schemas import ExperimentConfig, RoundReport

logger = logging.getLogger(__name__)


class RunLedger:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.engine = make_engine(self.path)
        init_db(self.engine)
        self.SessionLocal = make_session_factory(self.engine)

    def start_run(self, cfg: ExperimentConfig) -> int:
        with self.SessionLocal() as db:
            run = Run(
                arm=cfg.arm,
                seed=str(cfg.seed),
                rounds=cfg.rounds,
                status="running",
                out_dir=cfg.out_dir,
                config_json=cfg.model_dump_json(),
            )
            db.add(run)
            db.commit()
            db.refresh(run)
            logger.info("Журнал %s: запуск %d", self.path, run.id)
            return run.id

    def record_round(self, run_id: int, report: RoundReport) -> None:
        m = report.metrics
        with self.SessionLocal() as db:
            db.add(RoundMetric(
                run_id=run_id,
                round=report.round,
                overall_accuracy=m.overall_accuracy,
                minority_accuracy=m.minority_accuracy,
                overall_recall=m.overall_recall,
                minority_recall=m.minority_recall,
                mean_ce=report.mean_loss("ce"),
                mean_gan=report.mean_loss("gan"),
                mean_mi=report.mean_loss("mi"),
                bytes_up=report.total_uploaded,
                bytes_down=report.total_downloaded,
            ))
            db.commit()

    def finish_run(self, run_id: int, status: str, summary: dict | None = None) -> None:
        with self.SessionLocal() as db:
            run = db.get(Run, run_id)
            if run is None:
                logger.warning("Журнал: запуск %d не найден", run_id)
                return
            run.status = status
            run.finished_at = datetime.now(timezone.utc)
            if summary is not None:
                run.summary_json = json.dumps(summary, sort_keys=True)
            db.commit()

    def dispose(self) -> None:
        self.engine.dispose()
