"""Hook between the CLI and the run registry."""

import logging
from typing import Optional

from ..config import PipelineConfig
from ..pipeline.experiment import ExperimentReport
from .database import initialize_db
from .models import Base
from .operations import save_report

logger = logging.getLogger("gshdl.persistence.integration")


class RunRecorder:
    """Stores experiment reports when ``[database] enabled`` is set; a no-op otherwise."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.enabled = config.database.enabled
        if self.enabled:
            engine = initialize_db(config.database)
            # Create tables if they don't exist
            Base.metadata.create_all(engine)

    def record(self, report: ExperimentReport) -> Optional[int]:
        if not self.enabled:
            return None
        run_id = save_report(report, self.config.experiment.seed, self.config.profile)
        if run_id is None:
            logger.warning(f"{report.command} report was not recorded")
        return run_id
