"""
Flattening of an overlapping mask hierarchy into a disjoint mask set.

Masks are visited by descending area (or descending score for the ablation
order) and kept when their IoU with every kept mask stays below the NMS
threshold. Residual overlaps between kept masks go to the larger mask.
"""

from typing import Literal
import logging

import numpy as np

from labelforge.core.rle import RunLengthMask
from labelforge.core.setops import claim_by_priority, intersection_counts
from labelforge.core.types import ImageMask, ImageMaskSet
from labelforge.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

NmsOrder = Literal["area", "score"]


def _visit_order(masks, order: NmsOrder) -> list:
    ids = np.array([m.mask_id for m in masks])
    if order == "area":
        primary = -np.array([m.area for m in masks], dtype=np.float64)
    elif order == "score":
        if any(m.score is None for m in masks):
            raise DataError("Score-ordered NMS needs a score on every mask")
        primary = -np.array([m.score for m in masks], dtype=np.float64)
    else:
        raise ConfigError(f"Unknown NMS order {order!r}")
    return list(np.lexsort((ids, primary)))


def flatten_masks(
    raw: ImageMaskSet,
    nms_iou: float = 0.01,
    order: NmsOrder = "area",
    min_area: int = 0,
) -> ImageMaskSet:
    """Area-priority NMS followed by contested-pixel clipping; tokens are carried through."""
    if not 0 < nms_iou <= 1:
        raise ConfigError(f"nms_iou must lie in (0, 1], got {nms_iou}")
    num_pixels = raw.width * raw.height
    for mask in raw.masks:
        if (mask.rle.width, mask.rle.height) != (raw.width, raw.height):
            raise DataError(f"Mask {mask.mask_id} exceeds the {raw.width}x{raw.height} image")

    candidates = [m for m in raw.masks if m.area > 0 and m.area >= min_area]
    if not candidates:
        return ImageMaskSet(raw.camera_id, raw.width, raw.height, ())

    pixels = [m.rle.pixel_indices() for m in candidates]
    inter = intersection_counts(pixels, pixels, num_pixels)
    areas = np.diag(inter)

    kept = []
    for i in _visit_order(candidates, order):
        if kept:
            union = areas[i] + areas[kept] - inter[i, kept]
            if np.any(inter[i, kept] / union >= nms_iou):
                continue
        kept.append(i)

    # contested pixels go to the larger kept mask, ties to the lower mask id
    by_size = sorted(kept, key=lambda i: (-areas[i], candidates[i].mask_id))
    clipped = claim_by_priority([pixels[i] for i in kept], [kept.index(i) for i in by_size], num_pixels)

    flattened = []
    for i, members in zip(kept, clipped):
        if members.size == 0:
            continue
        source = candidates[i]
        rle = RunLengthMask.from_indices(members, raw.width, raw.height)
        flattened.append(ImageMask(source.mask_id, rle, source.token, source.score))
    flattened.sort(key=lambda m: (-m.area, m.mask_id))

    logger.debug(
        f"Flattened image {raw.camera_id}: {len(raw.masks)} raw masks -> {len(flattened)} disjoint masks"
    )
    return ImageMaskSet(raw.camera_id, raw.width, raw.height, tuple(flattened))
