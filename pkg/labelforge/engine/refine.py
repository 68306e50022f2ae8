"""
Geometric refinement of Lidar segments against a DBSCAN cluster pool.
"""

from typing import List, Literal, Optional, Sequence
import logging

import numpy as np

from labelforge.core.setops import iou_matrix
from labelforge.core.types import LidarSegment, Provenance, check_segments_in_scan
from labelforge.engine.clustering import ClusterPool
from labelforge.engine.unproject import resolve_overlaps
from labelforge.errors import ConfigError

logger = logging.getLogger(__name__)

RefineStrategy = Literal["replace", "filter", "none"]


def _check_overlap(overlap: float) -> None:
    if not 0 < overlap <= 1:
        raise ConfigError(f"Cluster overlap threshold must lie in (0, 1], got {overlap}")


def _scan_size(segments: Sequence[LidarSegment], pool: ClusterPool, num_points: Optional[int]) -> int:
    if num_points is not None:
        check_segments_in_scan(segments, num_points)
        return num_points
    ends = [int(s.point_indices[-1]) + 1 for s in segments if len(s)]
    ends += [int(c[-1]) + 1 for c in pool.clusters if c.size]
    return max(ends, default=0)


def _best_matches(segments, pool, num_points):
    """Per segment: (index of best pool cluster or -1, its IoU)."""
    if not segments or not len(pool):
        return np.full(len(segments), -1), np.zeros(len(segments))
    ious = iou_matrix([s.point_indices for s in segments], list(pool.clusters), num_points)
    best = np.argmax(ious, axis=1)
    return best, ious[np.arange(len(segments)), best]


def replace_with_clusters(
    segments: Sequence[LidarSegment],
    pool: ClusterPool,
    overlap: float = 0.5,
    num_points: Optional[int] = None,
) -> List[LidarSegment]:
    """
    Swap each segment's points for its best-matching pool cluster when their
    IoU reaches `overlap`; other segments keep their points.

    Segment count, order and tokens are preserved. Clusters may overlap each
    other, so contested points go to the larger segment afterwards; a segment
    can end up empty but is still returned.
    """
    _check_overlap(overlap)
    num_points = _scan_size(segments, pool, num_points)
    best, best_iou = _best_matches(segments, pool, num_points)

    replaced = []
    for segment, cluster, iou in zip(segments, best, best_iou):
        if cluster >= 0 and iou >= overlap:
            provenance = Provenance(segment.provenance.sources, refined=True)
            replaced.append(LidarSegment(pool.clusters[cluster], segment.token, provenance, segment.token_sum))
        else:
            replaced.append(segment)

    num_replaced = sum(s.provenance.refined and not o.provenance.refined for s, o in zip(replaced, segments))
    logger.debug(f"Replaced {num_replaced} of {len(segments)} segments with pool clusters")
    return resolve_overlaps(replaced, num_points, drop_empty=False)


def filter_by_clusters(
    segments: Sequence[LidarSegment],
    pool: ClusterPool,
    overlap: float = 0.5,
    num_points: Optional[int] = None,
) -> List[LidarSegment]:
    """Keep the segments whose best pool IoU reaches `overlap`, unchanged."""
    _check_overlap(overlap)
    num_points = _scan_size(segments, pool, num_points)
    _, best_iou = _best_matches(segments, pool, num_points)
    kept = [segment for segment, iou in zip(segments, best_iou) if iou >= overlap]
    logger.debug(f"Kept {len(kept)} of {len(segments)} segments with cluster support")
    return kept


def refine_segments(
    segments: Sequence[LidarSegment],
    pool: ClusterPool,
    strategy: RefineStrategy = "replace",
    overlap: float = 0.5,
    num_points: Optional[int] = None,
) -> List[LidarSegment]:
    if strategy == "replace":
        return replace_with_clusters(segments, pool, overlap, num_points)
    if strategy == "filter":
        return filter_by_clusters(segments, pool, overlap, num_points)
    if strategy == "none":
        return list(segments)
    raise ConfigError(f"Unknown refinement strategy {strategy!r}")
