"""
Data model shared by the whole pipeline.

All containers are frozen dataclasses over read-only numpy arrays, so they can
be handed to worker threads without copying.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from labelforge.core.rle import RunLengthMask
from labelforge.errors import CapacityError, DataError, GeometryError

MAX_ID = 65535
DEFAULT_TOKEN_DIM = 768
ORTHONORMAL_TOLERANCE = 1e-6


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def as_token(values: Sequence[float]) -> np.ndarray:
    """Validate a feature token: finite entries and non-zero norm."""
    token = np.array(values, dtype=np.float64).reshape(-1)
    if token.size == 0:
        raise DataError("Token must not be empty")
    if not np.all(np.isfinite(token)):
        raise DataError("Token contains non-finite values")
    if not np.linalg.norm(token) > 0:
        raise DataError("Token has zero norm")
    return _frozen(token)


def normalize(vector: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vector)
    if not norm > 0:
        raise DataError("Cannot normalize a zero vector")
    return vector / norm


@dataclass(frozen=True, eq=False)
class PointCloud:
    """One Lidar scan, N x (x, y, z, intensity); point order is the index space."""

    points: np.ndarray = field(repr=False)
    scan_id: str = ""

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64)
        if points.size == 0:
            points = points.reshape(0, 4)
        if points.ndim != 2 or points.shape[1] != 4:
            raise DataError(f"Point array must be N x 4, got shape {points.shape}")
        if not np.all(np.isfinite(points)):
            raise DataError(f"Scan {self.scan_id!r} contains non-finite coordinates")
        object.__setattr__(self, "points", _frozen(points))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    def subset(self, indices: np.ndarray) -> "PointCloud":
        return PointCloud(self.points[indices], self.scan_id)

    def with_xyz(self, xyz: np.ndarray) -> "PointCloud":
        return PointCloud(np.column_stack([xyz, self.intensity]), self.scan_id)


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera: 3x4 projection in pixels and a rigid 4x4 Lidar-to-camera transform."""

    camera_id: str
    projection: np.ndarray = field(repr=False)
    lidar_to_cam: np.ndarray = field(repr=False)
    width: int
    height: int

    def __post_init__(self):
        projection = np.array(self.projection, dtype=np.float64)
        lidar_to_cam = np.array(self.lidar_to_cam, dtype=np.float64)
        if projection.shape != (3, 4):
            raise GeometryError(f"Camera {self.camera_id}: projection must be 3x4, got {projection.shape}")
        if lidar_to_cam.shape != (4, 4):
            raise GeometryError(f"Camera {self.camera_id}: lidar_to_cam must be 4x4, got {lidar_to_cam.shape}")
        if not (np.all(np.isfinite(projection)) and np.all(np.isfinite(lidar_to_cam))):
            raise GeometryError(f"Camera {self.camera_id}: non-finite calibration values")
        rotation = lidar_to_cam[:3, :3]
        deviation = np.abs(rotation.T @ rotation - np.eye(3)).max()
        if deviation > ORTHONORMAL_TOLERANCE:
            raise GeometryError(
                f"Camera {self.camera_id}: rotation not orthonormal (deviation {deviation:.3g})"
            )
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise GeometryError(f"Camera {self.camera_id}: image size must be positive")
        object.__setattr__(self, "projection", _frozen(projection))
        object.__setattr__(self, "lidar_to_cam", _frozen(lidar_to_cam))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))


@dataclass(frozen=True, eq=False)
class ImageMask:
    """One binary image mask with its feature token."""

    mask_id: int
    rle: RunLengthMask
    token: np.ndarray = field(repr=False)
    score: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "token", as_token(self.token))

    @property
    def area(self) -> int:
        return self.rle.area


@dataclass(frozen=True, eq=False)
class ImageMaskSet:
    """All masks of one camera image; raw sets may overlap, flattened sets may not."""

    camera_id: str
    width: int
    height: int
    masks: Tuple[ImageMask, ...] = ()

    def __post_init__(self):
        masks = tuple(self.masks)
        seen = set()
        for mask in masks:
            if (mask.rle.width, mask.rle.height) != (self.width, self.height):
                raise DataError(
                    f"Mask {mask.mask_id} is {mask.rle.width}x{mask.rle.height}, "
                    f"image {self.camera_id} is {self.width}x{self.height}"
                )
            if mask.mask_id in seen:
                raise DataError(f"Duplicate mask id {mask.mask_id} in image {self.camera_id}")
            seen.add(mask.mask_id)
        object.__setattr__(self, "masks", masks)

    def __len__(self) -> int:
        return len(self.masks)

    def is_disjoint(self) -> bool:
        covered = np.zeros(self.width * self.height, dtype=np.int32)
        for mask in self.masks:
            covered[mask.rle.pixel_indices()] += 1
        return bool(np.all(covered <= 1))

    def id_map(self) -> np.ndarray:
        """(height, width) uint16 map of mask ids, 0 is background; requires disjoint masks."""
        ids = np.zeros(self.width * self.height, dtype=np.uint16)
        for mask in self.masks:
            if not 1 <= mask.mask_id <= MAX_ID:
                raise CapacityError(f"Mask id {mask.mask_id} does not fit a 16-bit id map")
            pixels = mask.rle.pixel_indices()
            if np.any(ids[pixels]):
                raise DataError(f"Image {self.camera_id} masks overlap; flatten before building an id map")
            ids[pixels] = mask.mask_id
        return ids.reshape(self.height, self.width)


@dataclass(frozen=True, eq=False)
class Provenance:
    """Where a Lidar segment came from: (camera_id, mask_id) pairs and refinement flag."""

    sources: Tuple[Tuple[str, int], ...] = ()
    refined: bool = False

    @property
    def cameras(self) -> Tuple[str, ...]:
        return tuple(sorted({camera for camera, _ in self.sources}))

    @property
    def mask_ids(self) -> Tuple[int, ...]:
        return tuple(mask_id for _, mask_id in self.sources)

    @property
    def views(self) -> int:
        return max(len(self.sources), 1)


@dataclass(frozen=True, eq=False)
class LidarSegment:
    """
    Sorted unique point indices into one scan plus the segment's feature token.

    `token_sum` is the raw sum of the view tokens fused into the segment; it
    defaults to the token itself for a single view.
    """

    point_indices: np.ndarray = field(repr=False)
    token: np.ndarray = field(repr=False)
    provenance: Provenance = Provenance()
    token_sum: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        indices = np.array(self.point_indices, dtype=np.int64).reshape(-1)
        if indices.size and np.any(np.diff(indices) <= 0):
            indices = np.unique(indices)
        if indices.size and indices[0] < 0:
            raise DataError("Segment point indices must be non-negative")
        object.__setattr__(self, "point_indices", _frozen(indices))
        object.__setattr__(self, "token", as_token(self.token))
        token_sum = self.token if self.token_sum is None else as_token(self.token_sum)
        if token_sum.shape != self.token.shape:
            raise DataError(f"Token sum has {token_sum.size} dimensions but the token has {self.token.size}")
        object.__setattr__(self, "token_sum", token_sum)

    def __len__(self) -> int:
        return self.point_indices.size


def check_segments_in_scan(segments: Sequence[LidarSegment], num_points: int) -> None:
    for position, segment in enumerate(segments):
        if segment.point_indices.size and segment.point_indices[-1] >= num_points:
            raise DataError(
                f"Segment {position} references point {segment.point_indices[-1]} "
                f"but the scan has {num_points} points"
            )


@dataclass(frozen=True, eq=False)
class PanopticLabeling:
    """Per-point (semantic_id, instance_id) pairs, 16 bits each; 0 is void / no instance."""

    semantic: np.ndarray = field(repr=False)
    instance: np.ndarray = field(repr=False)

    def __post_init__(self):
        semantic = self._as_ids(self.semantic, "semantic")
        instance = self._as_ids(self.instance, "instance")
        if semantic.shape != instance.shape:
            raise DataError(
                f"Semantic ({semantic.size}) and instance ({instance.size}) channels differ in length"
            )
        object.__setattr__(self, "semantic", _frozen(semantic))
        object.__setattr__(self, "instance", _frozen(instance))

    @staticmethod
    def _as_ids(values, channel: str) -> np.ndarray:
        values = np.asarray(values).reshape(-1)
        if values.dtype != np.uint16 and values.size:
            if values.min() < 0 or values.max() > MAX_ID:
                raise CapacityError(f"{channel} ids must lie in [0, {MAX_ID}]")
        return values.astype(np.uint16)

    @classmethod
    def empty(cls, num_points: int) -> "PanopticLabeling":
        zeros = np.zeros(num_points, dtype=np.uint16)
        return cls(zeros, zeros.copy())

    @classmethod
    def from_words(cls, words: np.ndarray) -> "PanopticLabeling":
        words = np.asarray(words, dtype=np.uint32)
        return cls((words & 0xFFFF).astype(np.uint16), (words >> 16).astype(np.uint16))

    @classmethod
    def from_segments(
        cls,
        segments: Sequence[LidarSegment],
        num_points: int,
        semantic_ids: Optional[Sequence[int]] = None,
    ) -> "PanopticLabeling":
        """Instance k + 1 for the k-th non-empty segment; semantic id 1 unless given."""
        segments = [segment for segment in segments if len(segment)]
        if len(segments) > MAX_ID:
            raise CapacityError(f"{len(segments)} segments exceed the {MAX_ID} instance ids of a scan")
        check_segments_in_scan(segments, num_points)
        semantic = np.zeros(num_points, dtype=np.uint16)
        instance = np.zeros(num_points, dtype=np.uint16)
        for position, segment in enumerate(segments):
            instance[segment.point_indices] = position + 1
            semantic[segment.point_indices] = 1 if semantic_ids is None else semantic_ids[position]
        return cls(semantic, instance)

    def __len__(self) -> int:
        return self.semantic.size

    def to_words(self) -> np.ndarray:
        return (self.instance.astype(np.uint32) << 16) | self.semantic.astype(np.uint32)

    @property
    def labeled(self) -> np.ndarray:
        return (self.semantic != 0) | (self.instance != 0)

    def subset(self, indices: np.ndarray) -> "PanopticLabeling":
        return PanopticLabeling(self.semantic[indices], self.instance[indices])

    def is_instance_pure(self) -> bool:
        """True when every non-zero instance id carries a single semantic id."""
        things = self.instance != 0
        if not things.any():
            return True
        keys = (self.instance[things].astype(np.uint32) << 16) | self.semantic[things]
        pairs = np.unique(keys)
        return pairs.size == np.unique(pairs >> 16).size

    def instance_segments(self) -> Tuple[np.ndarray, List[np.ndarray]]:
        """(instance ids, sorted point index arrays) for every non-zero instance."""
        order = np.argsort(self.instance, kind="stable")
        sorted_ids = self.instance[order]
        ids, starts = np.unique(sorted_ids, return_index=True)
        groups = np.split(order, starts[1:])
        keep = ids != 0
        return ids[keep], [np.sort(group) for group, k in zip(groups, keep) if k]
