"""Registry operations: store and query experiment reports."""

import logging
from typing import Any, Dict, List, Optional

from sqlalchemy.exc import SQLAlchemyError

from ..pipeline.experiment import ExperimentReport
from .database import session_scope
from .models import ExperimentRun, FoldResult

logger = logging.getLogger("gshdl.persistence")


def save_report(report: ExperimentReport, seed: int, profile: str) -> Optional[int]:
    """Store a report and its folds.

    Returns:
        int: Run ID if the save was successful, None otherwise
    """
    data = report.to_dict()
    try:
        with session_scope() as session:
            run = ExperimentRun(
                command=data["command"],
                seed=int(seed),
                profile=profile,
                mean_pa=data["mean_pa"],
                class_names=data["class_names"],
                config=data["config"],
                extras=data["extras"],
            )
            run.folds = [
                FoldResult(
                    fold=fold["fold"],
                    train_size=fold["train_size"],
                    test_size=fold["test_size"],
                    pa=fold["pa"],
                    l2=fold["l2"],
                    per_class=fold["per_class"],
                )
                for fold in data["folds"]
            ]
            session.add(run)
            session.flush()
            logger.info(f"Recorded {data['command']} run {run.id}")
            return run.id
    except SQLAlchemyError as e:
        logger.error(f"Failed to save experiment report: {e}")
        return None


def get_run(run_id: int) -> Optional[Dict[str, Any]]:
    """Retrieve a run with its folds, or None if not found."""
    try:
        with session_scope() as session:
            run = session.get(ExperimentRun, run_id)
            return run.to_dict() if run else None
    except SQLAlchemyError as e:
        logger.error(f"Failed to retrieve run {run_id}: {e}")
        return None


def list_runs(command: Optional[str] = None, limit: int = 50) -> List[Dict[str, Any]]:
    """Most recent runs first, optionally restricted to one command."""
    try:
        with session_scope() as session:
            query = session.query(ExperimentRun)
            if command is not None:
                query = query.filter(ExperimentRun.command == command)
            runs = query.order_by(ExperimentRun.id.desc()).limit(limit).all()
            return [run.to_dict() for run in runs]
    except SQLAlchemyError as e:
        logger.error(f"Failed to list runs: {e}")
        return []
