# app/db/models.py
from datetime import datetime, timezone
from pathlib import Path

from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text, create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import declarative_base, relationship, sessionmaker

from app import config

Base = declarative_base()


def _now() -> datetime:
    return datetime.now(timezone.utc)


class Run(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    arm = Column(String, nullable=False)
    seed = Column(String, nullable=False)  # u64 не помещается в INTEGER SQLite
    rounds = Column(Integer, nullable=False)
    status = Column(String, nullable=False, default="running")  # running / finished / failed
    out_dir = Column(String, nullable=False)
    config_json = Column(Text, nullable=False)
    summary_json = Column(Text, nullable=True)
    started_at = Column(DateTime, default=_now)
    finished_at = Column(DateTime, nullable=True)

    round_metrics = relationship(
        "RoundMetric", back_populates="run", cascade="all, delete-orphan", order_by="RoundMetric.round"
    )


class RoundMetric(Base):
    __tablename__ = "round_metrics"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False, index=True)
    round = Column(Integer, nullable=False)
    overall_accuracy = Column(Float, nullable=False)
    minority_accuracy = Column(Float, nullable=False)
    overall_recall = Column(Float, nullable=False)
    minority_recall = Column(Float, nullable=False)
    mean_ce = Column(Float, nullable=False)
    mean_gan = Column(Float, nullable=False)
    mean_mi = Column(Float, nullable=False)
    bytes_up = Column(Integer, nullable=False)
    bytes_down = Column(Integer, nullable=False)

    run = relationship("Run", back_populates="round_metrics")


def ledger_path(out_dir: str | Path | None = None) -> Path:
    """FEDMIG_LEDGER или <out>/ledger.db"""
    if config.LEDGER_PATH:
        return Path(config.LEDGER_PATH)
    return Path(out_dir or ".") / "ledger.db"


def make_engine(path: str | Path) -> Engine:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return create_engine(f"sqlite:///{path}", connect_args={"check_same_thread": False})


def make_session_factory(engine: Engine) -> sessionmaker:
    return sessionmaker(autocommit=False, autoflush=False, bind=engine)


def init_db(engine: Engine) -> None:
    """Создаёт таблицы журнала, если их нет"""
    Base.metadata.create_all(bind=engine)
