"""Evaluation protocols: semantic oracle, stuff merging and frustum filtering."""

from typing import List, Sequence, Union
import logging

import numpy as np

from labelforge.core.camera import project_points
from labelforge.core.types import MAX_ID, CameraModel, LidarSegment, PanopticLabeling, PointCloud
from labelforge.errors import CapacityError, DataError
from labelforge.zeroshot.vocabulary import VocabularySpec

logger = logging.getLogger(__name__)


def _majority_class(gt_semantic: np.ndarray) -> int:
    """Most frequent non-void id, ties to the lower id; 0 when all void."""
    labeled = gt_semantic[gt_semantic != 0]
    if labeled.size == 0:
        return 0
    counts = np.bincount(labeled)
    return int(np.argmax(counts))


def semantic_oracle(
    segments: Sequence[Union[LidarSegment, np.ndarray]],
    gt: PanopticLabeling,
) -> List[int]:
    """Majority ground-truth class per segment (given as segments or point index arrays)."""
    classes = []
    for segment in segments:
        points = segment.point_indices if isinstance(segment, LidarSegment) else np.asarray(segment, dtype=np.int64)
        if points.size and points.max() >= len(gt):
            raise DataError(f"Segment references point {points.max()} of a {len(gt)}-point scan")
        classes.append(_majority_class(gt.semantic[points]))
    return classes


def apply_semantic_oracle(pred: PanopticLabeling, gt: PanopticLabeling) -> PanopticLabeling:
    """
    Relabel every predicted segment (distinct labeled (semantic, instance)
    pair) with its majority ground-truth class. Segments over void ground
    truth become unlabeled.
    """
    if len(pred) != len(gt):
        raise DataError(f"Prediction has {len(pred)} points, ground truth has {len(gt)}")
    words = pred.to_words()
    order = np.argsort(words, kind="stable")
    ids, starts = np.unique(words[order], return_index=True)
    groups = np.split(order, starts[1:])

    semantic = pred.semantic.copy()
    instance = pred.instance.copy()
    voided = 0
    for word, points in zip(ids, groups):
        if word == 0:
            continue
        label = _majority_class(gt.semantic[points])
        semantic[points] = label
        if label == 0:
            instance[points] = 0
            voided += 1
    logger.debug(f"Semantic oracle relabeled {int((ids != 0).sum())} segments, {voided} voided")
    return PanopticLabeling(semantic, instance)


def merge_stuff(labeling: PanopticLabeling, vocab: VocabularySpec) -> PanopticLabeling:
    """Collapse all instances of each stuff class into one instance id per scan."""
    instance = labeling.instance.astype(np.int64)
    next_id = int(instance.max()) + 1 if instance.size else 1
    for class_id in np.unique(labeling.semantic):
        if class_id == 0 or vocab.is_thing(int(class_id)):
            continue
        points = labeling.semantic == class_id
        existing = instance[points]
        existing = existing[existing != 0]
        if existing.size:
            instance[points] = existing.min()
            continue
        if next_id > MAX_ID:
            raise CapacityError(f"No free instance id left for stuff class {class_id}")
        instance[points] = next_id
        next_id += 1
    return PanopticLabeling(labeling.semantic, instance)


def frustum_filter(cloud: PointCloud, cameras: Sequence[CameraModel]) -> np.ndarray:
    """Points visible in at least one camera."""
    if not cameras:
        raise DataError("Frustum filtering needs at least one camera")
    visible = np.zeros(len(cloud), dtype=bool)
    for camera in cameras:
        visible |= project_points(cloud, camera).valid
    return visible
