"""
Panoptic Quality evaluation for Lidar labelings.

Thing segments are (semantic, instance) pairs; every stuff class forms a
single segment per scan regardless of instance ids. A prediction matches a
ground-truth segment of the same class at IoU > 0.5, which makes matches
unique. Counts are accumulated over scans and turned into ratios once.
"""

from typing import Dict, List, Optional
import logging

import numpy as np
from pydantic import BaseModel, Field

from labelforge.core.types import PanopticLabeling
from labelforge.errors import DataError
from labelforge.zeroshot.vocabulary import VocabularySpec

logger = logging.getLogger(__name__)

MATCH_IOU = 0.5


class ClassMetrics(BaseModel):
    """Accumulated counts and derived ratios for one class (ratios in [0, 1])."""

    class_id: int
    name: str
    is_thing: bool
    iou_sum: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    pq: float = 0.0
    sq: float = 0.0
    rq: float = 0.0
    iou: float = 0.0


class PQReport(BaseModel):
    """Class-averaged panoptic metrics over the class universe, as fractions."""

    pq: float = 0.0
    pq_dagger: float = 0.0
    rq: float = 0.0
    sq: float = 0.0
    pq_things: float = 0.0
    rq_things: float = 0.0
    sq_things: float = 0.0
    pq_stuff: float = 0.0
    rq_stuff: float = 0.0
    sq_stuff: float = 0.0
    miou: float = 0.0
    per_class: Dict[int, ClassMetrics] = Field(default_factory=dict)
    universe: List[int] = Field(default_factory=list)
    num_scans: int = 0
    metadata: Dict[str, str] = Field(default_factory=dict)


def _mean(values: List[float]) -> float:
    return float(np.mean(values)) if values else 0.0


class PanopticEvaluator:
    """Accumulates PQ counts and semantic intersections scan by scan."""

    def __init__(self, vocab: VocabularySpec, min_gt_points: int = 0, ignore_void: bool = True):
        """
        Args:
            vocab: Vocabulary giving class ids, names and thing/stuff flags
            min_gt_points: Ground-truth thing segments smaller than this are
                ignored, together with the predictions matching them
            ignore_void: Drop points whose ground truth is void from all counts
        """
        self.vocab = vocab
        self.min_gt_points = min_gt_points
        self.ignore_void = ignore_void
        size = max(vocab.class_ids) + 1
        self.known = np.zeros(size, dtype=bool)
        self.known[vocab.class_ids] = True
        self.thing = np.zeros(size, dtype=bool)
        self.thing[vocab.thing_ids] = True
        self.iou_sum = np.zeros(size)
        self.tp = np.zeros(size, dtype=np.int64)
        self.fp = np.zeros(size, dtype=np.int64)
        self.fn = np.zeros(size, dtype=np.int64)
        self.sem_inter = np.zeros(size, dtype=np.int64)
        self.sem_union = np.zeros(size, dtype=np.int64)
        self.num_scans = 0

    def _check_ids(self, semantic: np.ndarray, role: str) -> None:
        present = np.unique(semantic)
        present = present[present != 0]
        unknown = present[(present >= self.known.size) | ~self.known[np.minimum(present, self.known.size - 1)]]
        if unknown.size:
            raise DataError(f"{role} uses class ids {unknown.tolist()} outside vocabulary {self.vocab.name!r}")

    def _segment_keys(self, labeling: PanopticLabeling, points: np.ndarray) -> np.ndarray:
        semantic = labeling.semantic[points].astype(np.int64)
        instance = labeling.instance[points].astype(np.int64)
        keys = semantic << 16
        # thing points without an instance id belong to no segment
        return np.where(self.thing[semantic], np.where(instance != 0, keys | instance, 0), keys)

    def add_scan(
        self,
        pred: PanopticLabeling,
        gt: PanopticLabeling,
        eval_mask: Optional[np.ndarray] = None,
    ) -> None:
        """Accumulate one scan; `eval_mask` restricts every count to the flagged points."""
        if len(pred) != len(gt):
            raise DataError(f"Prediction has {len(pred)} points, ground truth has {len(gt)}")
        selected = np.ones(len(gt), dtype=bool)
        if eval_mask is not None:
            eval_mask = np.asarray(eval_mask, dtype=bool)
            if eval_mask.shape != (len(gt),):
                raise DataError(f"Evaluation mask has {eval_mask.size} entries for {len(gt)} points")
            selected &= eval_mask
        self._check_ids(pred.semantic, "Prediction")
        self._check_ids(gt.semantic, "Ground truth")
        if self.ignore_void:
            selected &= gt.semantic != 0
        points = np.flatnonzero(selected)

        gt_sem = gt.semantic[points].astype(np.int64)
        pred_sem = pred.semantic[points].astype(np.int64)
        inter = np.bincount(gt_sem[gt_sem == pred_sem], minlength=self.known.size)
        gt_count = np.bincount(gt_sem, minlength=self.known.size)
        pred_count = np.bincount(pred_sem, minlength=self.known.size)
        self.sem_inter[1:] += inter[1:self.known.size]
        self.sem_union[1:] += (gt_count + pred_count - inter)[1:self.known.size]

        gt_keys = self._segment_keys(gt, points)
        pred_keys = self._segment_keys(pred, points)
        gt_ids, gt_sizes = np.unique(gt_keys[gt_keys != 0], return_counts=True)
        pred_ids, pred_sizes = np.unique(pred_keys[pred_keys != 0], return_counts=True)

        both = (gt_keys != 0) & (pred_keys != 0) & ((gt_keys >> 16) == (pred_keys >> 16))
        if both.any():
            pairs, overlap = np.unique(
                np.stack([gt_keys[both], pred_keys[both]], axis=1), axis=0, return_counts=True
            )
        else:
            pairs, overlap = np.empty((0, 2), dtype=np.int64), np.empty(0, dtype=np.int64)
        g = np.searchsorted(gt_ids, pairs[:, 0])
        p = np.searchsorted(pred_ids, pairs[:, 1])
        ious = overlap / (gt_sizes[g] + pred_sizes[p] - overlap)
        matched = ious > MATCH_IOU

        gt_class = gt_ids >> 16
        pred_class = pred_ids >> 16
        ignored_gt = self.thing[gt_class] & (gt_sizes < self.min_gt_points)
        gt_matched = np.zeros(gt_ids.size, dtype=bool)
        pred_matched = np.zeros(pred_ids.size, dtype=bool)
        pred_on_ignored = np.zeros(pred_ids.size, dtype=bool)
        for gi, pi, iou in zip(g[matched], p[matched], ious[matched]):
            if ignored_gt[gi]:
                pred_on_ignored[pi] = True
                continue
            gt_matched[gi] = True
            pred_matched[pi] = True
            self.tp[gt_class[gi]] += 1
            self.iou_sum[gt_class[gi]] += iou

        np.add.at(self.fn, gt_class[~gt_matched & ~ignored_gt], 1)
        np.add.at(self.fp, pred_class[~pred_matched & ~pred_on_ignored], 1)
        self.num_scans += 1

    def report(self) -> PQReport:
        names = self.vocab.names()
        per_class = {}
        for class_id in self.vocab.class_ids:
            tp, fp, fn = int(self.tp[class_id]), int(self.fp[class_id]), int(self.fn[class_id])
            union = int(self.sem_union[class_id])
            if tp + fp + fn == 0 and union == 0:
                continue
            denominator = tp + 0.5 * fp + 0.5 * fn
            iou_sum = float(self.iou_sum[class_id])
            per_class[class_id] = ClassMetrics(
                class_id=class_id,
                name=names[class_id],
                is_thing=bool(self.thing[class_id]),
                iou_sum=iou_sum,
                tp=tp,
                fp=fp,
                fn=fn,
                pq=iou_sum / denominator if denominator else 0.0,
                sq=iou_sum / tp if tp else 0.0,
                rq=tp / denominator if denominator else 0.0,
                iou=self.sem_inter[class_id] / union if union else 0.0,
            )

        metrics = list(per_class.values())
        things = [m for m in metrics if m.is_thing]
        stuff = [m for m in metrics if not m.is_thing]
        report = PQReport(
            pq=_mean([m.pq for m in metrics]),
            pq_dagger=_mean([m.pq if m.is_thing else m.iou for m in metrics]),
            rq=_mean([m.rq for m in metrics]),
            sq=_mean([m.sq for m in metrics]),
            pq_things=_mean([m.pq for m in things]),
            rq_things=_mean([m.rq for m in things]),
            sq_things=_mean([m.sq for m in things]),
            pq_stuff=_mean([m.pq for m in stuff]),
            rq_stuff=_mean([m.rq for m in stuff]),
            sq_stuff=_mean([m.sq for m in stuff]),
            miou=_mean([m.iou for m in metrics]),
            per_class=per_class,
            universe=sorted(per_class),
            num_scans=self.num_scans,
            metadata={
                "vocabulary": self.vocab.name,
                "pq_dagger": "stuff classes scored by semantic IoU without instance matching",
                "void_handling": "void ground-truth points excluded" if self.ignore_void else "void ground-truth points included",
                "class_universe": "classes present in ground truth or prediction",
                "match_rule": f"same class and IoU > {MATCH_IOU}",
                "stuff_segments": "one segment per stuff class per scan",
                "min_gt_points": str(self.min_gt_points),
            },
        )
        logger.info(
            f"Evaluated {self.num_scans} scans over {len(per_class)} classes: "
            f"PQ {100 * report.pq:.1f}, mIoU {100 * report.miou:.1f}"
        )
        return report


def evaluate_panoptic(
    pred: PanopticLabeling,
    gt: PanopticLabeling,
    vocab: VocabularySpec,
    frustum_mask: Optional[np.ndarray] = None,
    ignore_void: bool = True,
    min_gt_points: int = 0,
) -> PQReport:
    """Single-scan evaluation."""
    evaluator = PanopticEvaluator(vocab, min_gt_points=min_gt_points, ignore_void=ignore_void)
    evaluator.add_scan(pred, gt, frustum_mask)
    return evaluator.report()
