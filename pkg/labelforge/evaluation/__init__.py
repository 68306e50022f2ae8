"""
Panoptic evaluation and its protocols
"""

from labelforge.evaluation.panoptic import ClassMetrics, PanopticEvaluator, PQReport, evaluate_panoptic
from labelforge.evaluation.protocols import (
    apply_semantic_oracle,
    frustum_filter,
    merge_stuff,
    semantic_oracle,
)
from labelforge.evaluation.report import format_report, write_report

__all__ = [
    "ClassMetrics",
    "PQReport",
    "PanopticEvaluator",
    "apply_semantic_oracle",
    "evaluate_panoptic",
    "format_report",
    "frustum_filter",
    "merge_stuff",
    "semantic_oracle",
    "write_report",
]
