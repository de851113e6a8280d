from app.db.models import Base, Run, RoundMetric, init_db, ledger_path, make_engine, make_session_factory

__all__ = ["Base", "Run", "RoundMetric", "init_db", "ledger_path", "make_engine", "make_session_factory"]
