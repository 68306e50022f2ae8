"""Synthetic scenes shared by the tests: a ground patch, five boxes and one camera."""

from pathlib import Path
from typing import List, Tuple

import numpy as np

from labelforge.core.camera import project_points
from labelforge.core.formats import save_json_calibration, write_mask_set, write_point_cloud
from labelforge.core.rle import RunLengthMask
from labelforge.core.types import CameraModel, ImageMask, ImageMaskSet, PanopticLabeling, PointCloud

WIDTH, HEIGHT = 1000, 400
TOKEN_DIM = 8
CAR, ROAD = 1, 9
BOX_CENTERS_Y = (-6.0, -3.0, 0.0, 3.0, 6.0)


def make_camera(camera_id: str = "P2") -> CameraModel:
    projection = np.array([[500.0, 0, 500, 0], [0, 500, 100, 0], [0, 0, 1, 0]])
    lidar_to_cam = np.array([[0.0, -1, 0, 0], [0, 0, -1, 0], [1, 0, 0, 0], [0, 0, 0, 1]])
    return CameraModel(camera_id, projection, lidar_to_cam, WIDTH, HEIGHT)


def grid(xs, ys, zs) -> np.ndarray:
    return np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)


def make_scene(scan_id: str = "000000") -> Tuple[PointCloud, PanopticLabeling, List[np.ndarray]]:
    """
    Cloud, ground truth and the point indices of every object (ground first).

    Coordinates are rounded through float32 so that a .bin round trip is exact.
    """
    parts = [grid(np.arange(6.0, 12.01, 0.25), np.arange(-4.0, 4.01, 0.25), [-1.5])]
    for center in BOX_CENTERS_Y:
        side = np.linspace(0.0, 1.0, 6)
        parts.append(grid(18.0 + side, center - 0.5 + side, -1.1 + side))

    xyz = np.concatenate(parts)
    intensity = np.linspace(0.0, 1.0, xyz.shape[0])
    points = np.column_stack([xyz, intensity]).astype(np.float32).astype(np.float64)
    cloud = PointCloud(points, scan_id)

    objects, start = [], 0
    for part in parts:
        objects.append(np.arange(start, start + part.shape[0]))
        start += part.shape[0]

    semantic = np.zeros(len(cloud), dtype=np.uint16)
    instance = np.zeros(len(cloud), dtype=np.uint16)
    semantic[objects[0]] = ROAD
    for car, indices in enumerate(objects[1:], start=1):
        semantic[indices] = CAR
        instance[indices] = car
    return cloud, PanopticLabeling(semantic, instance), objects


def token(k: int) -> np.ndarray:
    return np.eye(TOKEN_DIM)[k % TOKEN_DIM]


def bounding_mask(cloud: PointCloud, camera: CameraModel, indices: np.ndarray) -> RunLengthMask:
    """Axis-aligned pixel rectangle around the projections of `indices`."""
    projection = project_points(cloud.subset(indices), camera)
    cols = np.floor(projection.uv[projection.valid, 0]).astype(np.int64)
    rows = np.floor(projection.uv[projection.valid, 1]).astype(np.int64)
    rect = np.zeros((camera.height, camera.width), dtype=bool)
    rect[rows.min():rows.max() + 1, cols.min():cols.max() + 1] = True
    return RunLengthMask.from_dense(rect)


def make_masks(cloud: PointCloud, camera: CameraModel, objects: List[np.ndarray]) -> ImageMaskSet:
    masks = tuple(
        ImageMask(k + 1, bounding_mask(cloud, camera, indices), token(k))
        for k, indices in enumerate(objects)
    )
    return ImageMaskSet(camera.camera_id, camera.width, camera.height, masks)


def write_scene(root: Path, scan_ids=("000000",)) -> Tuple[Path, Path, Path]:
    """Write clouds, masks and a JSON calibration; returns (clouds, masks, calib)."""
    camera = make_camera()
    clouds, masks = root / "clouds", root / "masks"
    calib = root / "calib.json"
    save_json_calibration([camera], calib)
    for scan_id in scan_ids:
        cloud, _, objects = make_scene(scan_id)
        write_point_cloud(cloud, clouds / f"{scan_id}.bin")
        write_mask_set(make_masks(cloud, camera, objects), masks / scan_id, camera.camera_id)
    return clouds, masks, calib
