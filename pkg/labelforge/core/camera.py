"""Pinhole projection of Lidar points into camera images."""

from dataclasses import dataclass

import numpy as np

from labelforge.core.types import CameraModel, PointCloud

DEPTH_EPSILON = 1e-6


@dataclass(frozen=True)
class Projection:
    """Per-point projection result; uv and depth are meaningful only where valid."""

    valid: np.ndarray
    uv: np.ndarray
    depth: np.ndarray
    width: int
    height: int

    def pixel_indices(self) -> np.ndarray:
        """Row-major flat pixel index of every valid point (floor binning)."""
        cols = np.floor(self.uv[self.valid, 0]).astype(np.int64)
        rows = np.floor(self.uv[self.valid, 1]).astype(np.int64)
        return rows * self.width + cols


def project_points(cloud: PointCloud, camera: CameraModel) -> Projection:
    """
    Project every point with projection @ lidar_to_cam @ (x, y, z, 1).

    A point is valid iff its camera-frame depth exceeds DEPTH_EPSILON and
    floor(u), floor(v) fall inside the image.
    """
    n = len(cloud)
    homogeneous = np.column_stack([cloud.xyz, np.ones(n)])
    in_camera = homogeneous @ camera.lidar_to_cam.T
    depth = in_camera[:, 2]
    image = in_camera @ camera.projection.T
    w = image[:, 2]
    front = (depth > DEPTH_EPSILON) & (w > DEPTH_EPSILON)

    uv = np.full((n, 2), np.nan)
    uv[front] = image[front, :2] / w[front, None]
    with np.errstate(invalid="ignore"):
        cols = np.floor(uv[:, 0])
        rows = np.floor(uv[:, 1])
        inside = (cols >= 0) & (cols < camera.width) & (rows >= 0) & (rows < camera.height)
    return Projection(front & inside, uv, depth, camera.width, camera.height)
