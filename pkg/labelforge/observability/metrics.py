"""
Prometheus metrics for Lidar Label Forge.

The pipeline is a batch job, so metrics are written once per run to a
textfile (node-exporter textfile-collector style) instead of being served.
"""

from pathlib import Path
from typing import Union
import logging
import time

from prometheus_client import REGISTRY, Counter, Histogram, write_to_textfile

logger = logging.getLogger(__name__)

# Define metrics
scans_total = Counter(
    'labelforge_scans_total',
    'Scans processed by the label engine',
    ['status']
)

masks_total = Counter(
    'labelforge_masks_total',
    'Image masks seen by the label engine',
    ['stage']
)

segments_total = Counter(
    'labelforge_segments_total',
    'Lidar segments produced per engine stage',
    ['stage']
)

stage_latency_seconds = Histogram(
    'labelforge_stage_latency_seconds',
    'Label engine stage latency in seconds',
    ['stage'],
    buckets=(0.001, 0.01, 0.05, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 30.0, float('inf'))
)


class MetricsTimer:
    """Context manager for timing operations."""

    def __init__(self, histogram: Histogram, labels: dict = None):
        """
        Initialize timer.

        Args:
            histogram: Prometheus Histogram to record to
            labels: Optional labels for the metric
        """
        self.histogram = histogram
        self.labels = labels or {}
        self.start_time = None

    def __enter__(self):
        self.start_time = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if self.start_time is not None:
            elapsed = time.perf_counter() - self.start_time
            if self.labels:
                self.histogram.labels(**self.labels).observe(elapsed)
            else:
                self.histogram.observe(elapsed)
        return False


def stage_timer(stage: str) -> MetricsTimer:
    return MetricsTimer(stage_latency_seconds, {"stage": stage})


def record_scan(status: str = "success"):
    """
    Record a processed scan.

    Args:
        status: Outcome of the scan (success/error)
    """
    scans_total.labels(status=status).inc()


def record_masks(stage: str, count: int):
    masks_total.labels(stage=stage).inc(count)


def record_segments(stage: str, count: int):
    segments_total.labels(stage=stage).inc(count)


def write_metrics(path: Union[str, Path]) -> None:
    """Write all registered metrics in the Prometheus text format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_to_textfile(str(path), REGISTRY)
    logger.debug(f"Wrote metrics to {path}")
