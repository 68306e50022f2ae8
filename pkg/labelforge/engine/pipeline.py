"""
Label engine pipeline - turns per-camera image masks into Lidar pseudo-labels,
one scan at a time.
"""

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple
import json
import logging

from pydantic import BaseModel, Field
from tqdm import tqdm

from labelforge.config import EngineSettings, Settings, config_hash
from labelforge.core.formats import (
    load_calibration,
    load_point_cloud,
    read_float_rows,
    read_mask_set,
    write_segment_table,
)
from labelforge.core.types import CameraModel, ImageMaskSet, LidarSegment, PanopticLabeling, PointCloud
from labelforge.engine.clustering import ClusterPool, build_cluster_ensemble
from labelforge.engine.flatten import flatten_masks
from labelforge.engine.ground import remove_ground
from labelforge.engine.refine import refine_segments
from labelforge.engine.unproject import fuse_views, unproject_masks
from labelforge.errors import ConfigError, DataError, LabelForgeError
from labelforge.observability import metrics
from labelforge.zeroshot.classifier import PromptIndex, classify_segments
from labelforge.zeroshot.vocabulary import (
    Vocabulary,
    load_prompt_embeddings,
    load_vocabulary_spec,
    read_prompt_manifest,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
METRICS_NAME = "metrics.prom"


class ScanSummary(BaseModel):
    """Per-scan counts recorded in the run manifest."""

    num_points: int = 0
    masks_raw: int = 0
    masks_flattened: int = 0
    segments_unprojected: int = 0
    segments_fused: int = 0
    segments_refined: int = 0
    segments: int = 0
    clusters: int = 0
    ground_points: int = 0
    error: Optional[str] = None


class RunManifest(BaseModel):
    config_hash: str
    scans: Dict[str, ScanSummary] = Field(default_factory=dict)

    @property
    def failed(self) -> List[str]:
        return sorted(scan_id for scan_id, summary in self.scans.items() if summary.error is not None)


def discover_scans(clouds: Path) -> List[Path]:
    if not clouds.is_dir():
        raise ConfigError(f"Cloud directory not found: {clouds}")
    return sorted(clouds.glob("*.bin"))


def read_scan_masks(masks: Path, scan_id: str) -> Dict[str, ImageMaskSet]:
    """Mask sets of one scan keyed by camera id, from ``<masks>/<scan_id>/*.json`` sidecars."""
    scan_dir = masks / scan_id
    if not scan_dir.is_dir():
        raise DataError(f"No mask directory for scan {scan_id!r} under {masks}")
    mask_sets: Dict[str, ImageMaskSet] = {}
    for sidecar in sorted(scan_dir.glob("*.json")):
        if sidecar.name.endswith(".tokens.json"):
            continue
        mask_set = read_mask_set(sidecar)
        if mask_set.camera_id in mask_sets:
            raise DataError(f"Scan {scan_id!r} has two mask sets for camera {mask_set.camera_id!r}")
        mask_sets[mask_set.camera_id] = mask_set
    return mask_sets


def ground_and_clusters(cloud: PointCloud, engine: EngineSettings, workers: int = 1) -> Tuple[int, ClusterPool]:
    """Ground removal followed by the DBSCAN ensemble on the remaining points."""
    with metrics.stage_timer("ground"):
        ground = remove_ground(
            cloud,
            inlier_dist=engine.ground_inlier_dist,
            max_iters=engine.ground_max_iters,
            seed=engine.seed,
            max_tilt_deg=engine.ground_max_tilt_deg,
            score_dist=engine.ground_score_dist,
        )
    with metrics.stage_timer("clustering"):
        pool = build_cluster_ensemble(cloud, ground, engine.dbscan_epsilons, engine.dbscan_min_pts, workers)
    return int(ground.sum()), pool


class LabelEngine:
    """
    Runs the label engine on scans. Calibration and vocabulary are loaded once
    by `prepare()` and then shared read-only by all worker threads.
    """

    def __init__(self, settings: Settings, cameras: Optional[Sequence[CameraModel]] = None,
                 vocabulary: Optional[Vocabulary] = None):
        self.settings = settings
        self.cameras = sorted(cameras, key=lambda c: c.camera_id) if cameras is not None else None
        self.vocabulary = vocabulary
        self.index: Optional[PromptIndex] = None
        self.ensemble_workers = 1

    def prepare(self) -> None:
        if self.cameras is None:
            calibration = self.settings.calibration
            if calibration.path is None:
                raise ConfigError("A calibration file is required (calibration.path)")
            if not calibration.path.is_file():
                raise ConfigError(f"Calibration file not found: {calibration.path}")
            cameras = load_calibration(calibration.path, calibration.width, calibration.height, calibration.cameras)
            self.cameras = sorted(cameras, key=lambda c: c.camera_id)
            logger.info(f"Loaded calibration for cameras {[c.camera_id for c in self.cameras]}")

        vocab_settings = self.settings.vocabulary
        if self.vocabulary is None and vocab_settings.name:
            if vocab_settings.embeddings is None or not vocab_settings.embeddings.is_file():
                raise ConfigError(f"Vocabulary {vocab_settings.name!r} needs a prompt embedding blob")
            spec = load_vocabulary_spec(vocab_settings.name)
            manifest = read_prompt_manifest(vocab_settings.manifest) if vocab_settings.manifest else None
            self.vocabulary = load_prompt_embeddings(spec, read_float_rows(vocab_settings.embeddings), manifest)
        if self.vocabulary is not None and self.index is None:
            self.index = PromptIndex(self.vocabulary)

    def label_scan(
        self, cloud: PointCloud, mask_sets: Dict[str, ImageMaskSet]
    ) -> Tuple[List[LidarSegment], PanopticLabeling, ScanSummary]:
        """Flatten, unproject and fuse every camera in id order, then refine and label."""
        engine = self.settings.engine
        num_points = len(cloud)
        summary = ScanSummary(num_points=num_points)
        known = {camera.camera_id for camera in self.cameras}
        unknown = sorted(set(mask_sets) - known)
        if unknown:
            raise DataError(f"Scan {cloud.scan_id!r} has masks for uncalibrated cameras {unknown}")

        pool: Optional[ClusterPool] = None

        def cluster_pool() -> ClusterPool:
            nonlocal pool
            if pool is None:
                summary.ground_points, pool = ground_and_clusters(cloud, engine, self.ensemble_workers)
                summary.clusters = len(pool)
            return pool

        def refine(segments: List[LidarSegment]) -> List[LidarSegment]:
            if engine.refine_strategy == "none" or not segments:
                return segments
            with metrics.stage_timer("refine"):
                return refine_segments(segments, cluster_pool(), engine.refine_strategy,
                                       engine.dbscan_overlap, num_points)

        fused: List[LidarSegment] = []
        for camera in self.cameras:
            raw = mask_sets.get(camera.camera_id)
            if raw is None:
                continue
            with metrics.stage_timer("flatten"):
                flat = flatten_masks(raw, engine.nms_iou, engine.nms_order, engine.min_mask_area)
            with metrics.stage_timer("unproject"):
                segments = unproject_masks(cloud, camera, flat, engine.min_points)
            summary.masks_raw += len(raw)
            summary.masks_flattened += len(flat)
            summary.segments_unprojected += len(segments)
            if engine.refine_placement == "per_camera":
                segments = refine(segments)
            with metrics.stage_timer("fuse"):
                fused = fuse_views(fused, segments, engine.fusion_iou, num_points)

        summary.segments_fused = len(fused)
        if engine.refine_placement == "after_fusion":
            fused = refine(fused)
        segments = [segment for segment in fused if len(segment)]
        summary.segments_refined = sum(1 for s in segments if s.provenance.refined)
        summary.segments = len(segments)

        if self.vocabulary is not None and segments:
            with metrics.stage_timer("classify"):
                labeling, _ = classify_segments(segments, self.vocabulary, num_points, self.index)
        else:
            labeling = PanopticLabeling.from_segments(segments, num_points)

        metrics.record_masks("raw", summary.masks_raw)
        metrics.record_masks("flattened", summary.masks_flattened)
        metrics.record_segments("unprojected", summary.segments_unprojected)
        metrics.record_segments("fused", summary.segments_fused)
        metrics.record_segments("refined", summary.segments_refined)
        return segments, labeling, summary

    def process_scan(self, scan_path: Path) -> ScanSummary:
        """Label one scan file and write its label file and token table."""
        paths = self.settings.paths
        with metrics.stage_timer("scan"):
            cloud = load_point_cloud(scan_path)
            mask_sets = read_scan_masks(paths.masks, cloud.scan_id)
            segments, labeling, summary = self.label_scan(cloud, mask_sets)
            write_segment_table(segments, labeling, paths.output, cloud.scan_id)
        logger.info(
            f"Scan {cloud.scan_id}: {summary.masks_raw} masks -> {summary.masks_flattened} flattened -> "
            f"{summary.segments} segments ({summary.segments_refined} replaced by clusters)"
        )
        return summary


def run_pipeline(settings: Settings, engine: Optional[LabelEngine] = None) -> RunManifest:
    """
    Label every ``*.bin`` scan under ``paths.clouds``.

    A scan that fails with a library or I/O error is recorded in the manifest
    and the run continues, unless `keep_going` is off, in which case the error
    is raised (I/O errors as `DataError`). The manifest and the metrics file
    are written however the run ends.
    """
    paths = settings.paths
    if paths.clouds is None or paths.masks is None:
        raise ConfigError("Both paths.clouds and paths.masks are required")
    scans = discover_scans(paths.clouds)
    engine = engine or LabelEngine(settings)
    engine.prepare()
    paths.output.mkdir(parents=True, exist_ok=True)

    workers = max(1, min(settings.threads, len(scans)))
    engine.ensemble_workers = max(1, settings.threads // workers)
    manifest = RunManifest(config_hash=config_hash(settings))
    first_error: Optional[Exception] = None
    logger.info(f"Labeling {len(scans)} scans with {workers} workers (config {manifest.config_hash[:12]})")

    try:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            futures = [(scan, executor.submit(engine.process_scan, scan)) for scan in scans]
            for scan, future in tqdm(futures, desc="Scans", unit="scan", disable=not settings.progress):
                try:
                    manifest.scans[scan.stem] = future.result()
                    metrics.record_scan("success")
                except (LabelForgeError, OSError) as e:
                    metrics.record_scan("error")
                    manifest.scans[scan.stem] = ScanSummary(error=str(e))
                    if settings.keep_going:
                        logger.warning(f"Skipping scan {scan.stem}: {e}")
                        continue
                    logger.error(f"Scan {scan.stem} failed: {e}")
                    first_error = e
                    for _, pending in futures:
                        pending.cancel()
                    break
    finally:
        write_manifest(manifest, paths.output / MANIFEST_NAME)
        metrics.write_metrics(paths.output / METRICS_NAME)

    if first_error is not None:
        if isinstance(first_error, OSError):
            raise DataError(f"Scan failed: {first_error}") from first_error
        raise first_error
    logger.info(f"Labeled {len(manifest.scans) - len(manifest.failed)} scans, {len(manifest.failed)} failed")
    return manifest


def write_manifest(manifest: RunManifest, path: Path) -> None:
    payload = manifest.model_dump(mode="json")
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
