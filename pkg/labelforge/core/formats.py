"""
On-disk formats.

- ``.bin``   Lidar scans, 4 little-endian float32 per point (x, y, z, intensity)
- ``.label`` panoptic labels, one little-endian uint32 per point
             (low 16 bits semantic, high 16 bits instance)
- calibration as KITTI ``calib.txt`` or JSON
- image masks as a 16-bit PNG id map plus a JSON sidecar and a float32 token blob
- float32 row blobs (tokens, prompt embeddings) with a small JSON header
"""

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union
import json
import logging

import cv2
import numpy as np

from labelforge.core.rle import RunLengthMask
from labelforge.core.types import (
    CameraModel,
    ImageMask,
    ImageMaskSet,
    LidarSegment,
    PanopticLabeling,
    PointCloud,
    Provenance,
)
from labelforge.errors import DataError, FormatError, GeometryError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

POINT_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<u4")
POINT_RECORD_BYTES = 16


# Point clouds

def load_point_cloud(path: PathLike, scan_id: Optional[str] = None) -> PointCloud:
    """Read a SemanticKITTI ``.bin`` scan."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % POINT_RECORD_BYTES:
        raise FormatError(
            f"Scan size {len(raw)} is not a multiple of {POINT_RECORD_BYTES} bytes",
            path=path,
            offset=len(raw) - len(raw) % POINT_RECORD_BYTES,
        )
    values = np.frombuffer(raw, dtype=POINT_DTYPE)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise FormatError("Non-finite value in scan", path=path, offset=int(bad[0]) * POINT_DTYPE.itemsize)
    cloud = PointCloud(values.reshape(-1, 4), scan_id if scan_id is not None else path.stem)
    logger.debug(f"Loaded {len(cloud)} points from {path}")
    return cloud


def write_point_cloud(cloud: PointCloud, path: PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(cloud.points.astype(POINT_DTYPE).tobytes())


# Labels

def read_labels(path: PathLike, num_points: Optional[int] = None) -> PanopticLabeling:
    """Read a ``.label`` file; when num_points is given the length must match."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % LABEL_DTYPE.itemsize:
        raise FormatError(
            f"Label file size {len(raw)} is not a multiple of 4 bytes",
            path=path,
            offset=len(raw) - len(raw) % LABEL_DTYPE.itemsize,
        )
    labeling = PanopticLabeling.from_words(np.frombuffer(raw, dtype=LABEL_DTYPE))
    if num_points is not None and len(labeling) != num_points:
        raise DataError(f"{path} holds {len(labeling)} labels for a scan of {num_points} points")
    return labeling


def write_labels(labeling: PanopticLabeling, path: PathLike, num_points: Optional[int] = None) -> None:
    if num_points is not None and len(labeling) != num_points:
        raise DataError(f"Labeling has {len(labeling)} entries for a scan of {num_points} points")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(labeling.to_words().astype(LABEL_DTYPE).tobytes())


# Calibration

def _kitti_rows(path: Path) -> Dict[str, np.ndarray]:
    rows = {}
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, values = line.partition(":")
        if not sep:
            raise FormatError(f"Calibration line {line_no} has no 'key:' prefix", path=path)
        try:
            rows[key.strip()] = np.array(values.split(), dtype=np.float64)
        except ValueError as e:
            raise FormatError(f"Calibration line {line_no}: {e}", path=path) from e
    return rows


def load_kitti_calibration(
    path: PathLike,
    width: int,
    height: int,
    camera_ids: Sequence[str] = ("P2",),
) -> List[CameraModel]:
    """
    Parse a KITTI ``calib.txt`` (rows ``P<k>: 12 floats`` and ``Tr: 12 floats``).

    KITTI does not store image sizes, so they are passed in. ``Tr_velo_to_cam``
    and ``R0_rect`` from the object benchmark layout are accepted too.
    """
    path = Path(path)
    rows = _kitti_rows(path)
    tr = rows.get("Tr", rows.get("Tr_velo_to_cam"))
    if tr is None or tr.size != 12:
        raise FormatError("Calibration needs a 'Tr' row with 12 values", path=path)
    lidar_to_cam = np.eye(4)
    lidar_to_cam[:3, :] = tr.reshape(3, 4)
    if "R0_rect" in rows:
        rect = np.eye(4)
        rect[:3, :3] = rows["R0_rect"].reshape(3, 3)
        lidar_to_cam = rect @ lidar_to_cam
    cameras = []
    for camera_id in camera_ids:
        projection = rows.get(camera_id)
        if projection is None or projection.size != 12:
            raise FormatError(f"Calibration has no 12-value row for camera {camera_id!r}", path=path)
        cameras.append(CameraModel(camera_id, projection.reshape(3, 4), lidar_to_cam, width, height))
    return cameras


def load_json_calibration(path: PathLike) -> List[CameraModel]:
    """
    JSON calibration: ``{"cameras": [{"camera_id", "projection" (3x4),
    "lidar_to_cam" (4x4), "width", "height"}, ...]}``.
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
        return [
            CameraModel(
                str(entry["camera_id"]),
                np.array(entry["projection"], dtype=np.float64),
                np.array(entry["lidar_to_cam"], dtype=np.float64),
                int(entry["width"]),
                int(entry["height"]),
            )
            for entry in payload["cameras"]
        ]
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, GeometryError):
            raise
        raise FormatError(f"Malformed calibration JSON: {e}", path=path) from e


def save_json_calibration(cameras: Sequence[CameraModel], path: PathLike) -> None:
    payload = {
        "cameras": [
            {
                "camera_id": camera.camera_id,
                "projection": camera.projection.tolist(),
                "lidar_to_cam": camera.lidar_to_cam.tolist(),
                "width": camera.width,
                "height": camera.height,
            }
            for camera in cameras
        ]
    }
    Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")


def load_calibration(
    path: PathLike, width: int = 0, height: int = 0, camera_ids: Sequence[str] = ("P2",)
) -> List[CameraModel]:
    """Dispatch on suffix: ``.json`` or KITTI text."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        return load_json_calibration(path)
    return load_kitti_calibration(path, width, height, camera_ids)


# Float row blobs

def _header_path(path: Path) -> Path:
    return path.with_suffix(".json")


def write_float_rows(rows: np.ndarray, path: PathLike) -> None:
    """Little-endian float32 rows plus a ``{"rows", "dim"}`` JSON header next to it."""
    path = Path(path)
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise DataError(f"Expected a 2-D row array, got shape {rows.shape}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(rows.astype("<f4").tobytes())
    header = {"rows": int(rows.shape[0]), "dim": int(rows.shape[1]), "dtype": "float32", "byte_order": "little"}
    _header_path(path).write_text(json.dumps(header, indent=2, sort_keys=True), encoding="utf-8")


def read_float_rows(path: PathLike, dim: Optional[int] = None) -> np.ndarray:
    """Read a float32 row blob; the row dimension comes from `dim` or the JSON header."""
    path = Path(path)
    expected_rows = None
    if dim is None:
        header_path = _header_path(path)
        if not header_path.exists():
            raise FormatError("Missing JSON header for float blob", path=header_path)
        header = json.loads(header_path.read_text(encoding="utf-8"))
        dim, expected_rows = int(header["dim"]), int(header["rows"])
    raw = path.read_bytes()
    row_bytes = 4 * dim
    if dim <= 0 or len(raw) % row_bytes:
        raise FormatError(f"Blob size {len(raw)} is not a multiple of {row_bytes}-byte rows", path=path)
    rows = np.frombuffer(raw, dtype="<f4").reshape(-1, dim).astype(np.float64)
    if expected_rows is not None and rows.shape[0] != expected_rows:
        raise FormatError(f"Header promises {expected_rows} rows, blob holds {rows.shape[0]}", path=path)
    bad = np.flatnonzero(~np.isfinite(rows.reshape(-1)))
    if bad.size:
        raise FormatError("Non-finite value in float blob", path=path, offset=int(bad[0]) * 4)
    return rows


# Image mask container

def write_mask_set(mask_set: ImageMaskSet, directory: PathLike, stem: Optional[str] = None) -> Path:
    """
    Write ``<stem>.json`` (sidecar), ``<stem>.tokens.bin`` and, for disjoint
    sets, ``<stem>.png`` (16-bit id map). Overlapping sets carry per-mask RLE
    strings in the sidecar instead of an id map.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = stem or mask_set.camera_id
    sidecar = directory / f"{stem}.json"
    token_file = directory / f"{stem}.tokens.bin"
    dims = {mask.token.size for mask in mask_set.masks}
    if len(dims) > 1:
        raise DataError(f"Masks of image {mask_set.camera_id} carry tokens of different sizes {sorted(dims)}")
    token_dim = dims.pop() if dims else 0

    disjoint = mask_set.is_disjoint() and all(1 <= m.mask_id <= 65535 for m in mask_set.masks)
    entries = []
    for row, mask in enumerate(mask_set.masks):
        entry = {"mask_id": int(mask.mask_id), "area": mask.area, "token_row": row}
        if mask.score is not None:
            entry["score"] = float(mask.score)
        if not disjoint:
            entry["rle"] = mask.rle.to_string()
        entries.append(entry)

    payload = {
        "camera_id": mask_set.camera_id,
        "width": mask_set.width,
        "height": mask_set.height,
        "token_file": token_file.name,
        "token_dim": token_dim,
        "masks": entries,
    }
    if disjoint:
        id_map_file = directory / f"{stem}.png"
        if not cv2.imwrite(str(id_map_file), mask_set.id_map()):
            raise OSError(f"Failed to write id map {id_map_file}")
        payload["id_map"] = id_map_file.name

    tokens = np.stack([mask.token for mask in mask_set.masks]) if mask_set.masks else np.zeros((0, token_dim))
    token_file.write_bytes(tokens.astype("<f4").tobytes())
    sidecar.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return sidecar


def read_mask_set(sidecar: PathLike) -> ImageMaskSet:
    """Read a mask container written by :func:`write_mask_set` (or by an external mask generator)."""
    sidecar = Path(sidecar)
    try:
        payload = json.loads(sidecar.read_text(encoding="utf-8"))
        camera_id = str(payload["camera_id"])
        width, height = int(payload["width"]), int(payload["height"])
        entries = payload["masks"]
        token_dim = int(payload.get("token_dim", 0))
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"Malformed mask sidecar: {e}", path=sidecar) from e

    if not entries:
        return ImageMaskSet(camera_id, width, height, ())

    tokens = read_float_rows(sidecar.parent / payload["token_file"], dim=token_dim)

    id_map = None
    if "id_map" in payload:
        id_map_file = sidecar.parent / payload["id_map"]
        id_map = cv2.imread(str(id_map_file), cv2.IMREAD_UNCHANGED)
        if id_map is None:
            raise FormatError("Cannot read id map", path=id_map_file)
        if id_map.dtype != np.uint16 or id_map.shape != (height, width):
            raise FormatError(
                f"Id map must be {height}x{width} uint16, got {id_map.shape} {id_map.dtype}",
                path=id_map_file,
            )
        flat_ids = id_map.reshape(-1)
        order = np.argsort(flat_ids, kind="stable")
        ids, starts = np.unique(flat_ids[order], return_index=True)
        pixels_by_id = dict(zip(ids.tolist(), np.split(order, starts[1:])))

    masks = []
    for entry in entries:
        mask_id = int(entry["mask_id"])
        if "rle" in entry:
            rle = RunLengthMask.from_string(entry["rle"], width, height)
        elif id_map is not None:
            rle = RunLengthMask.from_indices(pixels_by_id.get(mask_id, []), width, height)
        else:
            raise FormatError(f"Mask {mask_id} has neither an RLE string nor an id map", path=sidecar)
        if "area" in entry and int(entry["area"]) != rle.area:
            raise FormatError(
                f"Mask {mask_id} declares area {entry['area']} but decodes to {rle.area} pixels",
                path=sidecar,
            )
        row = int(entry["token_row"])
        if not 0 <= row < tokens.shape[0]:
            raise FormatError(f"Mask {mask_id} token row {row} outside the token blob", path=sidecar)
        masks.append(ImageMask(mask_id, rle, tokens[row], entry.get("score")))
    return ImageMaskSet(camera_id, width, height, tuple(masks))


# Segment tables (pipeline output)

def write_segment_table(
    segments: Sequence[LidarSegment],
    labeling: PanopticLabeling,
    directory: PathLike,
    scan_id: str,
) -> None:
    """
    ``<scan>.label`` plus ``<scan>.tokens.bin`` (row k = instance k + 1) and
    ``<scan>.segments.json`` with provenance per instance. Empty segments are skipped.
    """
    directory = Path(directory)
    segments = [segment for segment in segments if len(segment)]
    write_labels(labeling, directory / f"{scan_id}.label")
    dim = segments[0].token.size if segments else 0
    tokens = np.stack([segment.token for segment in segments]) if segments else np.zeros((0, dim))
    write_float_rows(tokens, directory / f"{scan_id}.tokens.bin")
    table = {
        "scan_id": scan_id,
        "num_points": len(labeling),
        "segments": [
            {
                "instance_id": position + 1,
                "semantic_id": int(labeling.semantic[segment.point_indices[0]]),
                "num_points": len(segment),
                "sources": [[camera, int(mask_id)] for camera, mask_id in segment.provenance.sources],
                "refined": segment.provenance.refined,
            }
            for position, segment in enumerate(segments)
        ],
    }
    (directory / f"{scan_id}.segments.json").write_text(json.dumps(table, indent=2), encoding="utf-8")


def read_segment_table(directory: PathLike, scan_id: str):
    """Inverse of :func:`write_segment_table`: (segments, labeling)."""
    directory = Path(directory)
    labeling = read_labels(directory / f"{scan_id}.label")
    table_path = directory / f"{scan_id}.segments.json"
    try:
        table = json.loads(table_path.read_text(encoding="utf-8"))
        entries = table["segments"]
    except (KeyError, ValueError) as e:
        raise FormatError(f"Malformed segment table: {e}", path=table_path) from e
    if not entries:
        return [], labeling
    tokens = read_float_rows(directory / f"{scan_id}.tokens.bin")
    if tokens.shape[0] != len(entries):
        raise FormatError(f"{len(entries)} segments but {tokens.shape[0]} token rows", path=table_path)
    ids, groups = labeling.instance_segments()
    by_id = dict(zip(ids.tolist(), groups))
    segments = []
    for row, entry in enumerate(entries):
        indices = by_id.get(int(entry["instance_id"]), np.empty(0, dtype=np.int64))
        provenance = Provenance(
            tuple((str(camera), int(mask_id)) for camera, mask_id in entry.get("sources", [])),
            bool(entry.get("refined", False)),
        )
        segments.append(LidarSegment(indices, tokens[row], provenance))
    return segments, labeling
