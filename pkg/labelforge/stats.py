"""
Pseudo-label dataset statistics: label coverage and instance counts.

Scans are reduced into a `LabelStats` accumulator; accumulators merge
associatively, so per-worker partial results can be combined in any order.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple, Union
import json
import logging

import numpy as np
from pydantic import BaseModel, Field

from labelforge.core.types import PanopticLabeling, PointCloud
from labelforge.errors import DataError
from labelforge.evaluation.protocols import apply_semantic_oracle
from labelforge.zeroshot.vocabulary import VocabularySpec

logger = logging.getLogger(__name__)


class ClassShare(BaseModel):
    name: str
    is_thing: bool
    instances: int
    fraction: float


class StatsReport(BaseModel):
    """Coverage and instance statistics over a set of scans."""

    num_scans: int = 0
    total_points: int = 0
    labeled_points: int = 0
    coverage: float = 0.0
    frustum_points: Optional[int] = None
    frustum_labeled_points: Optional[int] = None
    frustum_coverage: Optional[float] = None
    total_instances: int = 0
    max_instances: int = 0
    mean_instances: float = 0.0
    thing_instances: Optional[int] = None
    stuff_instances: Optional[int] = None
    thing_fraction: Optional[float] = None
    stuff_fraction: Optional[float] = None
    thing_stuff_ratio: Optional[float] = None
    per_class: Dict[int, ClassShare] = Field(default_factory=dict)


@dataclass
class LabelStats:
    """Running sums; `merge` is associative and order-independent."""

    num_scans: int = 0
    total_points: int = 0
    labeled_points: int = 0
    frustum_points: int = 0
    frustum_labeled_points: int = 0
    frustum_scans: int = 0
    total_instances: int = 0
    max_instances: int = 0
    class_instances: Dict[int, int] = field(default_factory=dict)

    def add_scan(
        self,
        labeling: PanopticLabeling,
        cloud: Optional[PointCloud] = None,
        frustum_mask: Optional[np.ndarray] = None,
        gt: Optional[PanopticLabeling] = None,
    ) -> None:
        """
        Add one scan. With `gt`, instances are counted after relabeling every
        pseudo-label segment with its majority ground-truth class; coverage
        still counts the pseudo-labels as given.
        """
        if cloud is not None and len(cloud) != len(labeling):
            raise DataError(
                f"Scan {cloud.scan_id!r} has {len(cloud)} points but {len(labeling)} labels"
            )
        labeled = labeling.labeled
        self.num_scans += 1
        self.total_points += len(labeling)
        self.labeled_points += int(labeled.sum())

        if frustum_mask is not None:
            frustum_mask = np.asarray(frustum_mask, dtype=bool)
            if frustum_mask.shape != (len(labeling),):
                raise DataError(f"Frustum mask has {frustum_mask.size} entries for {len(labeling)} points")
            self.frustum_scans += 1
            self.frustum_points += int(frustum_mask.sum())
            self.frustum_labeled_points += int((labeled & frustum_mask).sum())

        if gt is not None:
            labeling = apply_semantic_oracle(labeling, gt)
            labeled = labeling.labeled
        # a class present with instance 0 counts as one instance of that class
        pairs = np.unique(
            (labeling.semantic[labeled].astype(np.uint32) << 16) | labeling.instance[labeled]
        )
        self.total_instances += int(pairs.size)
        self.max_instances = max(self.max_instances, int(pairs.size))
        classes, counts = np.unique(pairs >> 16, return_counts=True)
        for class_id, count in zip(classes.tolist(), counts.tolist()):
            self.class_instances[class_id] = self.class_instances.get(class_id, 0) + count

    def merge(self, other: "LabelStats") -> "LabelStats":
        class_instances = dict(self.class_instances)
        for class_id, count in other.class_instances.items():
            class_instances[class_id] = class_instances.get(class_id, 0) + count
        return LabelStats(
            num_scans=self.num_scans + other.num_scans,
            total_points=self.total_points + other.total_points,
            labeled_points=self.labeled_points + other.labeled_points,
            frustum_points=self.frustum_points + other.frustum_points,
            frustum_labeled_points=self.frustum_labeled_points + other.frustum_labeled_points,
            frustum_scans=self.frustum_scans + other.frustum_scans,
            total_instances=self.total_instances + other.total_instances,
            max_instances=max(self.max_instances, other.max_instances),
            class_instances=class_instances,
        )

    def report(self, vocab: Optional[VocabularySpec] = None) -> StatsReport:
        report = StatsReport(
            num_scans=self.num_scans,
            total_points=self.total_points,
            labeled_points=self.labeled_points,
            coverage=self.labeled_points / self.total_points if self.total_points else 0.0,
            total_instances=self.total_instances,
            max_instances=self.max_instances,
            mean_instances=self.total_instances / self.num_scans if self.num_scans else 0.0,
        )
        if self.frustum_scans:
            report.frustum_points = self.frustum_points
            report.frustum_labeled_points = self.frustum_labeled_points
            report.frustum_coverage = (
                self.frustum_labeled_points / self.frustum_points if self.frustum_points else 0.0
            )
        if vocab is None:
            return report

        names = vocab.names()
        unknown = sorted(set(self.class_instances) - set(names) - {0})
        if unknown:
            raise DataError(f"Labels use class ids {unknown} outside vocabulary {vocab.name!r}")
        things = sum(n for c, n in self.class_instances.items() if c in names and vocab.is_thing(c))
        stuff = sum(n for c, n in self.class_instances.items() if c in names and not vocab.is_thing(c))
        counted = things + stuff
        report.thing_instances = things
        report.stuff_instances = stuff
        report.thing_fraction = things / counted if counted else 0.0
        report.stuff_fraction = stuff / counted if counted else 0.0
        report.thing_stuff_ratio = things / stuff if stuff else None
        report.per_class = {
            class_id: ClassShare(
                name=names[class_id],
                is_thing=vocab.is_thing(class_id),
                instances=count,
                fraction=count / counted if counted else 0.0,
            )
            for class_id, count in sorted(self.class_instances.items())
            if class_id in names
        }
        return report


ScanSample = Union[PanopticLabeling, Tuple[PanopticLabeling, Optional[PointCloud]]]


def compute_label_stats(
    samples: Iterable[ScanSample],
    vocab: Optional[VocabularySpec] = None,
    frustum_masks: Optional[Iterable[Optional[np.ndarray]]] = None,
    ground_truths: Optional[Iterable[PanopticLabeling]] = None,
) -> StatsReport:
    """
    Reduce a stream of labelings (optionally paired with their clouds) into
    one report. `frustum_masks` and `ground_truths`, when given, run
    alongside `samples`; ground truth gives the per-class breakdown its
    classes through the semantic oracle.
    """
    stats = LabelStats()
    masks = iter(frustum_masks) if frustum_masks is not None else None
    truths = iter(ground_truths) if ground_truths is not None else None
    for sample in samples:
        labeling, cloud = sample if isinstance(sample, tuple) else (sample, None)
        mask = next(masks, None) if masks is not None else None
        gt = next(truths, None) if truths is not None else None
        if truths is not None and gt is None:
            raise DataError(f"No ground truth for scan {stats.num_scans}")
        stats.add_scan(labeling, cloud, mask, gt)
    logger.info(
        f"Label stats over {stats.num_scans} scans: coverage "
        f"{100 * (stats.labeled_points / stats.total_points if stats.total_points else 0):.1f}%, "
        f"{stats.total_instances} instances"
    )
    return stats.report(vocab)


def _percent(value: Optional[float]) -> str:
    return "-" if value is None else f"{100 * value:.1f}"


def format_stats(report: StatsReport) -> str:
    """Plain-text table: coverage, instance counts, thing/stuff split, then per class."""
    header = ["scans", "coverage", "frustum cov.", "total inst.", "max inst.", "mean inst.", "things %", "stuff %", "ratio"]
    values = [
        str(report.num_scans),
        _percent(report.coverage),
        _percent(report.frustum_coverage),
        str(report.total_instances),
        str(report.max_instances),
        f"{report.mean_instances:.2f}",
        _percent(report.thing_fraction),
        _percent(report.stuff_fraction),
        "-" if report.thing_stuff_ratio is None else f"{report.thing_stuff_ratio:.2f}",
    ]
    widths = [max(len(h), len(v)) for h, v in zip(header, values)]
    lines = [
        "  ".join(h.rjust(w) for h, w in zip(header, widths)),
        "  ".join(v.rjust(w) for v, w in zip(values, widths)),
    ]
    if report.per_class:
        lines.append("")
        width = max(len(share.name) for share in report.per_class.values())
        for share in report.per_class.values():
            kind = "thing" if share.is_thing else "stuff"
            lines.append(f"{share.name.ljust(width)}  {kind}  {share.instances:>8}  {_percent(share.fraction):>6}")
    return "\n".join(lines) + "\n"


def write_stats(report: StatsReport, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
