"""Prometheus metrics for pipeline stages."""

import logging
import time
from contextlib import contextmanager
from typing import Dict, Iterator

import psutil
from prometheus_client import Counter, Histogram, start_http_server

logger = logging.getLogger("gshdl")

STAGE_SECONDS = Histogram(
    "gshdl_stage_seconds",
    "Wall-clock seconds spent per pipeline stage",
    ["stage"],
    buckets=(0.1, 0.5, 1, 5, 15, 60, 300, 900, 3600),
)
CLAMPED_BELIEFS = Counter(
    "gshdl_clamped_beliefs_total",
    "True-label beliefs clamped at the loss floor",
)
RBM_EPOCHS = Counter(
    "gshdl_rbm_epochs_total",
    "Contrastive-divergence epochs run",
)

_exporter_port = None


def start_exporter(port: int) -> None:
    """Serve metrics over HTTP on ``port`` (once per process)."""
    global _exporter_port
    if _exporter_port is not None:
        return
    start_http_server(port)
    _exporter_port = port
    logger.info(f"Prometheus metrics exported on port {port}")


def peak_memory_mb() -> float:
    """Resident set size of this process in MB."""
    return psutil.Process().memory_info().rss / (1024 * 1024)


class StageTimings:
    """Collects wall-clock seconds per stage for ``timings.json``."""

    def __init__(self):
        self.seconds: Dict[str, float] = {}
        self.peak_rss_mb = 0.0

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        started = time.perf_counter()
        try:
            with STAGE_SECONDS.labels(stage=name).time():
                yield
        finally:
            self.seconds[name] = self.seconds.get(name, 0.0) + time.perf_counter() - started
            self.peak_rss_mb = max(self.peak_rss_mb, peak_memory_mb())
            logger.debug(f"Stage {name} finished after {self.seconds[name]:.2f}s")

    def as_dict(self) -> Dict[str, object]:
        return {"stages": dict(sorted(self.seconds.items())), "peak_rss_mb": round(self.peak_rss_mb, 1)}


@contextmanager
def stage_timer(name: str) -> Iterator[None]:
    """Observe the duration of a block in ``gshdl_stage_seconds{stage=name}``."""
    with STAGE_SECONDS.labels(stage=name).time():
        yield
