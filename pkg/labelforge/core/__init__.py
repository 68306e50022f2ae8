"""
Data model, file formats and camera geometry
"""

from labelforge.core.camera import project_points
from labelforge.core.formats import load_point_cloud, read_labels, write_labels
from labelforge.core.ply import export_ply
from labelforge.core.types import (
    CameraModel,
    ImageMask,
    ImageMaskSet,
    LidarSegment,
    PanopticLabeling,
    PointCloud,
    Provenance,
)

__all__ = [
    "CameraModel",
    "ImageMask",
    "ImageMaskSet",
    "LidarSegment",
    "PanopticLabeling",
    "PointCloud",
    "Provenance",
    "export_ply",
    "load_point_cloud",
    "project_points",
    "read_labels",
    "write_labels",
]
