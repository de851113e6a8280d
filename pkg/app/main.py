# app/main.py
from pathlib import Path

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from app.db.models import init_db, ledger_path, make_engine, make_session_factory
from app.routers import runs


def create_app(ledger: str | Path | None = None) -> FastAPI:
    """Read-only API над журналом запусков"""
    app = FastAPI(title="fedmig-sim")

    engine = make_engine(ledger or ledger_path())
    init_db(engine)
    app.state.engine = engine
    app.state.SessionLocal = make_session_factory(engine)

    # API только на чтение
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["GET"],
        allow_headers=["*"],
    )

    app.include_router(runs.router)
    return app
