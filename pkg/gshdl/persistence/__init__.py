"""Experiment-run registry backed by SQLAlchemy."""

from .database import get_session, initialize_db, session_scope
from .integration import RunRecorder
from .models import Base, ExperimentRun, FoldResult, metadata
from .operations import get_run, list_runs, save_report

__all__ = [
    "Base",
    "ExperimentRun",
    "FoldResult",
    "RunRecorder",
    "get_run",
    "get_session",
    "initialize_db",
    "list_runs",
    "metadata",
    "save_report",
    "session_scope",
]
