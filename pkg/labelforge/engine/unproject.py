"""
Image-to-Lidar unprojection and cross-camera fusion of the resulting segments.
"""

from typing import List, Optional, Sequence
import logging

import numpy as np

from labelforge.core.camera import project_points
from labelforge.core.setops import claim_by_priority, larger_first
from labelforge.core.types import (
    CameraModel,
    ImageMaskSet,
    LidarSegment,
    PointCloud,
    Provenance,
    check_segments_in_scan,
    normalize,
)
from labelforge.errors import ConfigError, DataError

logger = logging.getLogger(__name__)


def unproject_masks(
    cloud: PointCloud,
    camera: CameraModel,
    masks: ImageMaskSet,
    min_points: int = 1,
) -> List[LidarSegment]:
    """
    Lift each flattened mask to the Lidar points whose projection lands inside it.

    Segments come out in mask order; masks supported by fewer than
    `min_points` points are dropped.
    """
    if min_points < 1:
        raise ConfigError(f"min_points must be at least 1, got {min_points}")
    if masks.camera_id != camera.camera_id:
        raise DataError(f"Masks belong to camera {masks.camera_id!r}, not {camera.camera_id!r}")
    if (masks.width, masks.height) != (camera.width, camera.height):
        raise DataError(
            f"Masks of camera {camera.camera_id} are {masks.width}x{masks.height}, "
            f"calibration says {camera.width}x{camera.height}"
        )

    lookup = np.full(camera.width * camera.height, -1, dtype=np.int64)
    for position, mask in enumerate(masks.masks):
        pixels = mask.rle.pixel_indices()
        if np.any(lookup[pixels] >= 0):
            raise DataError(f"Masks of camera {camera.camera_id} overlap; flatten them first")
        lookup[pixels] = position

    projection = project_points(cloud, camera)
    visible = np.flatnonzero(projection.valid)
    owner = lookup[projection.pixel_indices()]
    hit = owner >= 0
    points, owner = visible[hit], owner[hit]

    order = np.argsort(owner, kind="stable")
    positions, starts = np.unique(owner[order], return_index=True)
    groups = np.split(points[order], starts[1:]) if positions.size else []

    segments = []
    for position, members in zip(positions, groups):
        if members.size < min_points:
            continue
        mask = masks.masks[position]
        provenance = Provenance(sources=((camera.camera_id, int(mask.mask_id)),))
        segments.append(LidarSegment(members, mask.token, provenance))

    logger.debug(
        f"Camera {camera.camera_id}: {visible.size} of {len(cloud)} points in view, "
        f"{len(masks)} masks -> {len(segments)} segments"
    )
    return segments


def resolve_overlaps(
    segments: Sequence[LidarSegment], num_points: int, drop_empty: bool = True
) -> List[LidarSegment]:
    """Give contested points to the larger segment (ties to the earlier one)."""
    members = [segment.point_indices for segment in segments]
    clipped = claim_by_priority(members, larger_first(members), num_points)
    resolved = []
    for segment, points in zip(segments, clipped):
        if drop_empty and points.size == 0:
            continue
        if points.size == segment.point_indices.size:
            resolved.append(segment)
        else:
            resolved.append(LidarSegment(points, segment.token, segment.provenance, segment.token_sum))
    return resolved


def fuse_views(
    accumulated: Sequence[LidarSegment],
    incoming: Sequence[LidarSegment],
    fusion_iou: float = 0.01,
    num_points: Optional[int] = None,
) -> List[LidarSegment]:
    """
    Merge a camera's segments into the segments collected so far.

    Every incoming segment is matched against the current list by point-set
    IoU; at or above `fusion_iou` the pair becomes one segment whose token is
    the renormalized running mean over all contributing views. Otherwise the
    segment is appended. The result is made disjoint again at the end.
    """
    if not 0 < fusion_iou <= 1:
        raise ConfigError(f"fusion_iou must lie in (0, 1], got {fusion_iou}")
    everything = list(accumulated) + list(incoming)
    if num_points is None:
        num_points = max((int(s.point_indices[-1]) + 1 for s in everything if len(s)), default=0)
    else:
        check_segments_in_scan(everything, num_points)

    members = [segment.point_indices for segment in accumulated]
    token_sums = [segment.token_sum for segment in accumulated]
    provenances = [segment.provenance for segment in accumulated]

    merged = 0
    in_segment = np.zeros(num_points, dtype=bool)
    for segment in incoming:
        points = segment.point_indices
        best, best_iou = -1, 0.0
        if members and points.size:
            in_segment[points] = True
            inter = np.array([in_segment[m].sum() for m in members], dtype=np.int64)
            in_segment[points] = False
            sizes = np.array([m.size for m in members], dtype=np.int64)
            union = sizes + points.size - inter
            ious = np.divide(inter, union, out=np.zeros(len(members)), where=union > 0)
            best = int(np.argmax(ious))
            best_iou = float(ious[best])

        if best >= 0 and best_iou > 0 and best_iou >= fusion_iou:
            members[best] = np.union1d(members[best], points)
            token_sums[best] = token_sums[best] + segment.token_sum
            previous = provenances[best]
            provenances[best] = Provenance(
                sources=previous.sources + segment.provenance.sources,
                refined=previous.refined or segment.provenance.refined,
            )
            merged += 1
        else:
            members.append(points)
            token_sums.append(segment.token_sum)
            provenances.append(segment.provenance)

    fused = [
        LidarSegment(points, normalize(token), provenance, token)
        for points, token, provenance in zip(members, token_sums, provenances)
    ]
    fused = resolve_overlaps(fused, num_points, drop_empty=True)
    logger.debug(
        f"Fused {len(incoming)} incoming into {len(accumulated)} segments: "
        f"{merged} merged, {len(fused)} after fusion"
    )
    return fused
