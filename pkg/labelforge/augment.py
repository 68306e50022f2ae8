"""
Training-sample preparation for partially labeled scans.

All randomness comes from numpy Generators seeded by the caller, so every
augmentation is reproducible.
"""

from typing import Optional, Tuple
import logging
import math

import numpy as np
from pydantic import BaseModel, Field, field_validator
from scipy.spatial.transform import Rotation

from labelforge.core.types import MAX_ID, PanopticLabeling, PointCloud
from labelforge.errors import CapacityError, ConfigError, DataError

logger = logging.getLogger(__name__)

Sample = Tuple[PointCloud, PanopticLabeling]

FULL_TURN = 2.0 * math.pi
REPLICA_SLACK = 1e-9
MIN_EXTENT = 1e-9
AXES = {"x": 0, "y": 1, "z": 2}


def _check_aligned(cloud: PointCloud, labeling: PanopticLabeling) -> None:
    if len(cloud) != len(labeling):
        raise DataError(f"Scan has {len(cloud)} points but {len(labeling)} labels")


def _concat(samples) -> Sample:
    clouds, labelings = zip(*samples)
    points = np.concatenate([c.points for c in clouds]) if clouds else np.empty((0, 4))
    return (
        PointCloud(points, clouds[0].scan_id),
        PanopticLabeling(
            np.concatenate([l.semantic for l in labelings]),
            np.concatenate([l.instance for l in labelings]),
        ),
    )


def _rotate_z(xyz: np.ndarray, angle: float) -> np.ndarray:
    return Rotation.from_euler("z", angle).apply(xyz)


def crop_unlabeled(cloud: PointCloud, labeling: PanopticLabeling) -> Tuple[PointCloud, PanopticLabeling, np.ndarray]:
    """Keep points with a semantic or instance label; also returns the kept source indices."""
    _check_aligned(cloud, labeling)
    kept = np.flatnonzero(labeling.labeled)
    return cloud.subset(kept), labeling.subset(kept), kept


def azimuth_extent(xyz: np.ndarray) -> Tuple[float, float]:
    """
    (start, extent) of the smallest circular sector around the z axis holding
    every point; the sector runs counter-clockwise from `start`.
    """
    azimuth = np.sort(np.arctan2(xyz[:, 1], xyz[:, 0]))
    gaps = np.diff(azimuth)
    wrap_gap = azimuth[0] + FULL_TURN - azimuth[-1]
    if gaps.size == 0 or wrap_gap >= gaps.max():
        return float(azimuth[0]), float(azimuth[-1] - azimuth[0])
    widest = int(np.argmax(gaps))
    return float(azimuth[widest + 1]), float(FULL_TURN - gaps[widest])


def franken_frustum(
    cloud: PointCloud,
    labeling: PanopticLabeling,
    jitter_deg: float = 5.0,
    seed: int = 0,
) -> Sample:
    """
    Fill the circle with copies of the labeled sector.

    With labeled azimuth extent theta, floor(2 pi / theta) replicas are made;
    replica j is rotated about z by j * theta plus a uniform jitter of at most
    `jitter_deg` (replica 0 is the original, never jittered). Instance ids of
    replica j are shifted by j times the largest instance id, so replicas
    never share instances. Unlabeled points are dropped.
    """
    labeled_cloud, labeled, _ = crop_unlabeled(cloud, labeling)
    if len(labeled_cloud) == 0:
        raise DataError("FrankenFrustum needs at least one labeled point")
    _, extent = azimuth_extent(labeled_cloud.xyz)
    if extent < MIN_EXTENT:
        raise DataError("Labeled points span no azimuth; cannot replicate a zero-width sector")

    replicas = int(math.floor(FULL_TURN / extent + REPLICA_SLACK))
    if replicas <= 1:
        return labeled_cloud, labeled

    largest = int(labeled.instance.max())
    if largest * replicas > MAX_ID:
        raise CapacityError(f"{replicas} replicas of instance ids up to {largest} exceed {MAX_ID}")

    rng = np.random.default_rng(seed)
    jitter = np.deg2rad(rng.uniform(-jitter_deg, jitter_deg, size=replicas))
    jitter[0] = 0.0
    samples = []
    for j in range(replicas):
        xyz = labeled_cloud.xyz if j == 0 else _rotate_z(labeled_cloud.xyz, j * extent + jitter[j])
        instance = labeled.instance.astype(np.int64)
        instance[instance != 0] += j * largest
        samples.append((labeled_cloud.with_xyz(xyz), PanopticLabeling(labeled.semantic, instance)))

    logger.debug(
        f"FrankenFrustum: sector of {np.rad2deg(extent):.1f} deg replicated {replicas}x "
        f"({len(labeled_cloud)} -> {replicas * len(labeled_cloud)} points)"
    )
    return _concat(samples)


def mix_scans(a: Sample, b: Sample, seed: int = 0, yaw_jitter_deg: float = 0.0) -> Sample:
    """
    Concatenate two samples; b's instance ids move past a's largest id.

    b is optionally rotated about z by a seeded uniform yaw of at most
    `yaw_jitter_deg`. Semantic ids are untouched.
    """
    cloud_a, labels_a = a
    cloud_b, labels_b = b
    _check_aligned(cloud_a, labels_a)
    _check_aligned(cloud_b, labels_b)
    if len(cloud_b) == 0:
        return cloud_a, labels_a

    offset = int(labels_a.instance.max()) if len(labels_a) else 0
    instance_b = labels_b.instance.astype(np.int64)
    instance_b[instance_b != 0] += offset
    if instance_b.size and instance_b.max() > MAX_ID:
        raise CapacityError(f"Mixed scan needs instance id {instance_b.max()}, above {MAX_ID}")

    xyz_b = cloud_b.xyz
    if yaw_jitter_deg:
        yaw = np.deg2rad(np.random.default_rng(seed).uniform(-yaw_jitter_deg, yaw_jitter_deg))
        xyz_b = _rotate_z(xyz_b, yaw)
    return _concat([(cloud_a, labels_a), (cloud_b.with_xyz(xyz_b), PanopticLabeling(labels_b.semantic, instance_b))])


class SpatialAugmentParams(BaseModel):
    """Ranges for the rigid + scale transform; rotations in radians."""

    rot_z_range: Tuple[float, float] = (0.0, 0.0)
    flip_axes: Tuple[str, ...] = ()
    scale_range: Tuple[float, float] = (1.0, 1.0)
    translate_range: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    @field_validator("rot_z_range", "scale_range")
    @classmethod
    def _ordered(cls, value):
        if value[0] > value[1]:
            raise ValueError(f"Range {value} has its bounds reversed")
        return value

    @field_validator("flip_axes")
    @classmethod
    def _known_axes(cls, value):
        unknown = [axis for axis in value if axis not in AXES]
        if unknown:
            raise ValueError(f"Unknown flip axes {unknown}")
        return value

    @field_validator("translate_range")
    @classmethod
    def _non_negative(cls, value):
        if any(v < 0 for v in value):
            raise ValueError("Translation half-ranges must be non-negative")
        return value


def spatial_augment(cloud: PointCloud, params: SpatialAugmentParams, seed: int = 0) -> PointCloud:
    """
    Seeded flip, yaw rotation, isotropic scale and translation of the
    coordinates; intensity and point order are kept.

    Each axis in `flip_axes` is mirrored with probability 0.5.
    """
    if params.scale_range[0] <= 0:
        raise ConfigError(f"Scale must be positive, got range {params.scale_range}")
    rng = np.random.default_rng(seed)
    xyz = cloud.xyz.copy()
    for axis in params.flip_axes:
        if rng.random() < 0.5:
            xyz[:, AXES[axis]] = -xyz[:, AXES[axis]]
    angle = rng.uniform(*params.rot_z_range)
    if angle:
        xyz = _rotate_z(xyz, angle)
    xyz = xyz * rng.uniform(*params.scale_range)
    xyz = xyz + np.array([rng.uniform(-r, r) for r in params.translate_range])
    return cloud.with_xyz(xyz)


class AugmentParams(BaseModel):
    """The export chain: crop, optional mix, optional FrankenFrustum, spatial transform."""

    franken_frustum: bool = True
    jitter_deg: float = Field(5.0, ge=0)
    mix_yaw_jitter_deg: float = Field(0.0, ge=0)
    spatial: SpatialAugmentParams = Field(default_factory=SpatialAugmentParams)


def augment_sample(
    cloud: PointCloud,
    labeling: PanopticLabeling,
    params: AugmentParams,
    seed: int = 0,
    partner: Optional[Sample] = None,
) -> Sample:
    sample_cloud, sample_labels, _ = crop_unlabeled(cloud, labeling)
    if partner is not None:
        partner_cloud, partner_labels, _ = crop_unlabeled(*partner)
        sample_cloud, sample_labels = mix_scans(
            (sample_cloud, sample_labels),
            (partner_cloud, partner_labels),
            seed=seed,
            yaw_jitter_deg=params.mix_yaw_jitter_deg,
        )
    if params.franken_frustum and len(sample_cloud):
        sample_cloud, sample_labels = franken_frustum(sample_cloud, sample_labels, params.jitter_deg, seed)
    return spatial_augment(sample_cloud, params.spatial, seed), sample_labels
