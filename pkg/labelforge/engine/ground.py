"""RANSAC ground-plane removal."""

from typing import Optional, Tuple
import logging

import numpy as np

from labelforge.core.types import PointCloud
from labelforge.errors import ConfigError

logger = logging.getLogger(__name__)

COLLINEAR_TOLERANCE = 1e-9

Plane = Tuple[np.ndarray, float]


def _upward_plane(normal: np.ndarray, point: np.ndarray, min_up: float, inlier_dist: float) -> Optional[Plane]:
    """Unit upward normal and offset, or None if too tilted or above the sensor."""
    length = np.linalg.norm(normal)
    if length < COLLINEAR_TOLERANCE:
        return None
    normal = normal / length
    if normal[2] < 0:
        normal = -normal
    if normal[2] < min_up:
        return None
    offset = float(-normal @ point)
    # the sensor origin must lie on or above the plane
    if offset < -inlier_dist:
        return None
    return normal, offset


def _refit(xyz: np.ndarray) -> np.ndarray:
    """Least-squares plane normal: the direction of least variance."""
    _, _, vt = np.linalg.svd(xyz - xyz.mean(axis=0), full_matrices=False)
    return vt[-1]


def remove_ground(
    cloud: PointCloud,
    inlier_dist: float = 0.2,
    max_iters: int = 200,
    seed: int = 0,
    max_tilt_deg: float = 10.0,
    score_dist: Optional[float] = None,
) -> np.ndarray:
    """
    Flag ground points with a seeded RANSAC plane fit.

    Candidate planes have their normal oriented upward (+z), may tilt at most
    `max_tilt_deg` from horizontal and must pass below the sensor origin.
    Candidates are scored by their support within `score_dist` (a quarter of
    `inlier_dist` by default) and the winner is refit by least squares on
    that support. Ground points lie within `inlier_dist` of the refit plane
    and below the sensor origin along its normal.
    """
    if inlier_dist <= 0:
        raise ConfigError(f"inlier_dist must be positive, got {inlier_dist}")
    if max_iters < 1:
        raise ConfigError(f"max_iters must be at least 1, got {max_iters}")
    score_dist = inlier_dist / 4 if score_dist is None else score_dist
    if not 0 < score_dist <= inlier_dist:
        raise ConfigError(f"score_dist must lie in (0, inlier_dist], got {score_dist}")

    n = len(cloud)
    ground = np.zeros(n, dtype=bool)
    if n < 3:
        return ground

    xyz = cloud.xyz
    rng = np.random.default_rng(seed)
    min_up = np.cos(np.deg2rad(max_tilt_deg))
    best_count, best_plane = 0, None

    for _ in range(max_iters):
        a, b, c = xyz[rng.choice(n, size=3, replace=False)]
        plane = _upward_plane(np.cross(b - a, c - a), a, min_up, inlier_dist)
        if plane is None:
            continue
        normal, offset = plane
        count = int(np.count_nonzero(np.abs(xyz @ normal + offset) <= score_dist))
        if count > best_count:
            best_count, best_plane = count, plane

    if best_plane is None:
        logger.warning(
            f"Scan {cloud.scan_id!r}: no valid ground plane after {max_iters} RANSAC iterations; "
            f"no points flagged as ground"
        )
        return ground

    normal, offset = best_plane
    support = xyz[np.abs(xyz @ normal + offset) <= score_dist]
    refit = _upward_plane(_refit(support), support.mean(axis=0), min_up, inlier_dist)
    if refit is not None:
        normal, offset = refit

    heights = xyz @ normal
    ground = (np.abs(heights + offset) <= inlier_dist) & (heights < 0)
    logger.debug(
        f"Scan {cloud.scan_id!r}: ground plane n={np.round(normal, 3).tolist()} d={offset:.3f}, "
        f"{int(ground.sum())} of {n} points"
    )
    return ground
