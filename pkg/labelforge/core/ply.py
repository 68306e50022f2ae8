"""Colored PLY export for visual inspection of labels and segments."""

from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from plyfile import PlyData, PlyElement

from labelforge.core.types import LidarSegment, PanopticLabeling, PointCloud, check_segments_in_scan
from labelforge.errors import DataError

UNLABELED_COLOR = (128, 128, 128)

VERTEX_DTYPE = [
    ("x", "f4"), ("y", "f4"), ("z", "f4"), ("intensity", "f4"),
    ("red", "u1"), ("green", "u1"), ("blue", "u1"),
    ("label", "u4"),
]


def palette(keys: np.ndarray) -> np.ndarray:
    """Deterministic RGB per non-zero key (multiplicative hash); key 0 is gray."""
    keys = np.asarray(keys, dtype=np.uint64)
    hashed = (keys * np.uint64(2654435761)) & np.uint64(0xFFFFFFFF)
    colors = np.stack(
        [(hashed >> np.uint64(shift)) & np.uint64(0xFF) for shift in (0, 8, 16)], axis=1
    ).astype(np.uint8)
    # keep colors away from the unlabeled gray and from black
    colors = (colors // 2 + 64).astype(np.uint8)
    colors[keys == 0] = UNLABELED_COLOR
    return colors


def export_ply(
    cloud: PointCloud,
    path: Union[str, Path],
    labeling: Optional[PanopticLabeling] = None,
    segments: Optional[Sequence[LidarSegment]] = None,
    binary: bool = True,
) -> None:
    """
    Write the scan as a colored PLY. Points are colored by (semantic, instance)
    of `labeling`, or by segment of `segments`; unlabeled points are gray.
    """
    n = len(cloud)
    keys = np.zeros(n, dtype=np.uint64)
    if labeling is not None and segments is not None:
        raise DataError("Pass either a labeling or segments, not both")
    if labeling is not None:
        if len(labeling) != n:
            raise DataError(f"Labeling has {len(labeling)} entries for a scan of {n} points")
        keys = labeling.to_words().astype(np.uint64)
    elif segments is not None:
        check_segments_in_scan(segments, n)
        for position, segment in enumerate(segments):
            keys[segment.point_indices] = position + 1

    vertices = np.empty(n, dtype=VERTEX_DTYPE)
    vertices["x"], vertices["y"], vertices["z"] = cloud.xyz.T
    vertices["intensity"] = cloud.intensity
    colors = palette(keys)
    vertices["red"], vertices["green"], vertices["blue"] = colors.T
    vertices["label"] = keys.astype(np.uint32)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    element = PlyElement.describe(vertices, "vertex")
    PlyData([element], text=not binary, byte_order="<").write(str(path))
