"""
Lidar Label Forge - command-line entry point

Every subcommand is a thin wrapper over library operations. Exit codes:
0 success, 1 configuration error, 2 data error, 3 partial failure.
"""

from functools import wraps
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple
import logging
import os

import typer
from dotenv import load_dotenv

from labelforge.augment import AugmentParams, SpatialAugmentParams, augment_sample
from labelforge.config import Settings, load_settings
from labelforge.core.formats import (
    load_calibration,
    load_point_cloud,
    read_float_rows,
    read_labels,
    read_mask_set,
    read_segment_table,
    write_labels,
    write_mask_set,
    write_point_cloud,
    write_segment_table,
)
from labelforge.core.ply import export_ply
from labelforge.core.types import PanopticLabeling
from labelforge.engine.flatten import flatten_masks
from labelforge.engine.pipeline import ground_and_clusters, run_pipeline
from labelforge.engine.refine import refine_segments
from labelforge.engine.unproject import fuse_views, unproject_masks
from labelforge.errors import ConfigError, DataError
from labelforge.evaluation import (
    PanopticEvaluator,
    apply_semantic_oracle,
    format_report,
    frustum_filter,
    merge_stuff,
    write_report,
)
from labelforge.stats import LabelStats, format_stats, write_stats
from labelforge.zeroshot import (
    PromptIndex,
    build_prompt_manifest,
    build_query_manifest,
    classify_segments,
    load_prompt_embeddings,
    load_query_embeddings,
    load_vocabulary_spec,
    map_to_super_classes,
    prompt_query,
)
from labelforge.zeroshot.vocabulary import (
    DEFAULT_TEMPLATES,
    load_super_vocabulary,
    read_prompt_manifest,
    write_prompt_manifest,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

EXIT_CONFIG_ERROR = 1
EXIT_DATA_ERROR = 2
EXIT_PARTIAL_FAILURE = 3

app = typer.Typer(help="Lift 2D instance masks into Lidar panoptic pseudo-labels, classify and evaluate them")


def handle_errors(command: Callable) -> Callable:
    """Map library errors to exit codes."""

    @wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except ConfigError as e:
            logger.error(f"Configuration error: {e}")
            raise typer.Exit(EXIT_CONFIG_ERROR)
        except DataError as e:
            logger.error(f"Data error: {e}")
            raise typer.Exit(EXIT_DATA_ERROR)

    return wrapper


@app.callback()
def main(
    ctx: typer.Context,
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="YAML config file"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Enable debug logging"),
) -> None:
    load_dotenv()
    level = logging.DEBUG if verbose else os.getenv("LLF_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)
    ctx.obj = {"config": config}


def _settings(ctx: typer.Context, **overrides: Any) -> Settings:
    return load_settings(ctx.obj.get("config") if ctx.obj else None, **overrides)


def _engine(ctx: typer.Context, **values: Any) -> Settings:
    """Settings with the given engine fields overridden where not None."""
    engine = {key: value for key, value in values.items() if value is not None}
    return _settings(ctx, engine=engine) if engine else _settings(ctx)


def _cameras(settings: Settings, calib: Optional[Path]):
    calibration = settings.calibration
    path = calib or calibration.path
    if path is None or not Path(path).is_file():
        raise ConfigError(f"Calibration file not found: {path}")
    return load_calibration(path, calibration.width, calibration.height, calibration.cameras)


def _label_files(directory: Path) -> List[Path]:
    if not directory.is_dir():
        raise ConfigError(f"Label directory not found: {directory}")
    return sorted(directory.glob("*.label"))


def _load_vocabulary(vocab: str, embeddings: Path, manifest: Optional[Path]):
    spec = load_vocabulary_spec(vocab)
    lines = read_prompt_manifest(manifest) if manifest else None
    return load_prompt_embeddings(spec, read_float_rows(embeddings), lines)


@app.command("prompt-manifest")
@handle_errors
def prompt_manifest_command(
    out: Path = typer.Option(..., "--out", "-o", help="Manifest text file to write"),
    vocab: Optional[str] = typer.Option(None, "--vocab", help="Vocabulary name or JSON file"),
    query: Optional[str] = typer.Option(None, "--query", help="Free-text query instead of a vocabulary"),
) -> None:
    """Write the sentences a text encoder must embed, one per line."""
    if query is not None:
        templates = load_vocabulary_spec(vocab).templates if vocab else DEFAULT_TEMPLATES
        manifest = build_query_manifest(query, templates)
    elif vocab is not None:
        manifest = build_prompt_manifest(load_vocabulary_spec(vocab))
    else:
        raise ConfigError("Pass --vocab or --query")
    write_prompt_manifest(manifest, out)
    typer.echo(f"Wrote {len(manifest)} prompt sentences to {out}")


@app.command("flatten-masks")
@handle_errors
def flatten_masks_command(
    ctx: typer.Context,
    sidecars: List[Path] = typer.Argument(..., help="Raw mask set sidecars"),
    out: Path = typer.Option(..., "--out", "-o", help="Directory for flattened mask sets"),
    nms_iou: Optional[float] = typer.Option(None, "--nms-iou"),
    order: Optional[str] = typer.Option(None, "--order", help="area or score"),
    min_area: Optional[int] = typer.Option(None, "--min-area"),
) -> None:
    """Turn overlapping mask sets into disjoint ones."""
    engine = _engine(ctx, nms_iou=nms_iou, nms_order=order, min_mask_area=min_area).engine
    for sidecar in sidecars:
        raw = read_mask_set(sidecar)
        flat = flatten_masks(raw, engine.nms_iou, engine.nms_order, engine.min_mask_area)
        write_mask_set(flat, out, sidecar.stem)
        typer.echo(f"{sidecar.name}: {len(raw)} -> {len(flat)} masks")


@app.command("unproject")
@handle_errors
def unproject_command(
    ctx: typer.Context,
    cloud_path: Path = typer.Option(..., "--cloud", help="Lidar scan (.bin)"),
    masks: Path = typer.Option(..., "--masks", help="Directory of flattened mask sets for this scan"),
    out: Path = typer.Option(..., "--out", "-o", help="Output directory"),
    calib: Optional[Path] = typer.Option(None, "--calib", help="Calibration file"),
    min_points: Optional[int] = typer.Option(None, "--min-points"),
    fusion_iou: Optional[float] = typer.Option(None, "--fusion-iou"),
) -> None:
    """Lift flattened masks of every camera to Lidar segments and fuse them."""
    settings = _engine(ctx, min_points=min_points, fusion_iou=fusion_iou)
    cloud = load_point_cloud(cloud_path)
    mask_sets = {}
    for sidecar in sorted(masks.glob("*.json")):
        if not sidecar.name.endswith(".tokens.json"):
            mask_set = read_mask_set(sidecar)
            mask_sets[mask_set.camera_id] = mask_set
    segments = []
    for camera in sorted(_cameras(settings, calib), key=lambda c: c.camera_id):
        if camera.camera_id in mask_sets:
            lifted = unproject_masks(cloud, camera, mask_sets[camera.camera_id], settings.engine.min_points)
            segments = fuse_views(segments, lifted, settings.engine.fusion_iou, len(cloud))
    segments = [segment for segment in segments if len(segment)]
    write_segment_table(segments, PanopticLabeling.from_segments(segments, len(cloud)), out, cloud.scan_id)
    typer.echo(f"{cloud.scan_id}: {len(segments)} segments")


@app.command("refine")
@handle_errors
def refine_command(
    ctx: typer.Context,
    cloud_path: Path = typer.Option(..., "--cloud", help="Lidar scan (.bin)"),
    segments_dir: Path = typer.Option(..., "--segments", help="Directory holding the scan's segment table"),
    out: Path = typer.Option(..., "--out", "-o", help="Output directory"),
    strategy: Optional[str] = typer.Option(None, "--strategy", help="replace, filter or none"),
    overlap: Optional[float] = typer.Option(None, "--overlap"),
    seed: Optional[int] = typer.Option(None, "--seed"),
) -> None:
    """Replace or filter segments using the DBSCAN cluster ensemble."""
    settings = _engine(ctx, refine_strategy=strategy, dbscan_overlap=overlap, seed=seed)
    cloud = load_point_cloud(cloud_path)
    segments, _ = read_segment_table(segments_dir, cloud.scan_id)
    _, pool = ground_and_clusters(cloud, settings.engine, settings.threads)
    refined = refine_segments(
        segments, pool, settings.engine.refine_strategy, settings.engine.dbscan_overlap, len(cloud)
    )
    refined = [segment for segment in refined if len(segment)]
    write_segment_table(refined, PanopticLabeling.from_segments(refined, len(cloud)), out, cloud.scan_id)
    typer.echo(f"{cloud.scan_id}: {len(segments)} -> {len(refined)} segments, {len(pool)} clusters")


@app.command("pseudo-label")
@handle_errors
def pseudo_label_command(
    ctx: typer.Context,
    clouds: Optional[Path] = typer.Option(None, "--clouds", help="Directory of .bin scans"),
    masks: Optional[Path] = typer.Option(None, "--masks", help="Directory of per-scan mask directories"),
    calib: Optional[Path] = typer.Option(None, "--calib", help="Calibration file"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Output directory"),
    threads: Optional[int] = typer.Option(None, "--threads"),
    keep_going: Optional[bool] = typer.Option(None, "--keep-going/--fail-fast"),
    vocab: Optional[str] = typer.Option(None, "--vocab", help="Classify segments with this vocabulary"),
    embeddings: Optional[Path] = typer.Option(None, "--embeddings", help="Prompt embedding blob"),
    manifest: Optional[Path] = typer.Option(None, "--manifest", help="Prompt manifest the blob was made from"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    strategy: Optional[str] = typer.Option(None, "--strategy", help="replace, filter or none"),
    placement: Optional[str] = typer.Option(None, "--placement", help="after_fusion or per_camera"),
    progress: Optional[bool] = typer.Option(None, "--progress/--no-progress"),
) -> None:
    """Run the full label engine over a directory of scans."""
    overrides: Dict[str, Any] = {}
    paths = {key: value for key, value in (("clouds", clouds), ("masks", masks), ("output", out)) if value is not None}
    if paths:
        overrides["paths"] = paths
    if calib is not None:
        overrides["calibration"] = {"path": calib}
    vocabulary = {k: v for k, v in (("name", vocab), ("embeddings", embeddings), ("manifest", manifest)) if v is not None}
    if vocabulary:
        overrides["vocabulary"] = vocabulary
    engine = {k: v for k, v in (("seed", seed), ("refine_strategy", strategy), ("refine_placement", placement)) if v is not None}
    if engine:
        overrides["engine"] = engine
    for key, value in (("threads", threads), ("keep_going", keep_going), ("progress", progress)):
        if value is not None:
            overrides[key] = value

    result = run_pipeline(_settings(ctx, **overrides))
    failed = result.failed
    typer.echo(f"Labeled {len(result.scans) - len(failed)} of {len(result.scans)} scans")
    if failed:
        typer.echo(f"Failed scans: {', '.join(failed)}", err=True)
        raise typer.Exit(EXIT_PARTIAL_FAILURE)


@app.command("classify")
@handle_errors
def classify_command(
    segments_dir: Path = typer.Option(..., "--segments", help="Directory holding the segment table"),
    scan_id: str = typer.Option(..., "--scan", help="Scan id"),
    vocab: str = typer.Option(..., "--vocab", help="Vocabulary name or JSON file"),
    embeddings: Path = typer.Option(..., "--embeddings", help="Prompt embedding blob"),
    out: Path = typer.Option(..., "--out", "-o", help="Output directory"),
    manifest: Optional[Path] = typer.Option(None, "--manifest", help="Prompt manifest the blob was made from"),
) -> None:
    """Assign every segment the vocabulary class its token matches best."""
    vocabulary = _load_vocabulary(vocab, embeddings, manifest)
    segments, labeling = read_segment_table(segments_dir, scan_id)
    segments = [segment for segment in segments if len(segment)]
    classified, scores = classify_segments(segments, vocabulary, len(labeling), PromptIndex(vocabulary))
    write_segment_table(segments, classified, out, scan_id)
    names = vocabulary.spec.names()
    for position, score in enumerate(scores):
        typer.echo(f"instance {position + 1}: {names[score.best_class_id]} ({score.best_score:.3f})")


@app.command("query")
@handle_errors
def query_command(
    segments_dir: Path = typer.Option(..., "--segments", help="Directory holding the segment table"),
    scan_id: str = typer.Option(..., "--scan", help="Scan id"),
    text: str = typer.Option(..., "--text", help="Free-text query"),
    embeddings: Path = typer.Option(..., "--embeddings", help="Embedding blob of the query manifest"),
    out: Path = typer.Option(..., "--out", "-o", help="Label file for the matching segments"),
    manifest: Optional[Path] = typer.Option(None, "--manifest", help="Query manifest the blob was made from"),
) -> None:
    """Keep the segments closer to the query text than to the background prompt."""
    lines = read_prompt_manifest(manifest) if manifest else None
    query, other = load_query_embeddings(text, read_float_rows(embeddings), DEFAULT_TEMPLATES, lines)
    segments, labeling = read_segment_table(segments_dir, scan_id)
    selected = prompt_query([segment for segment in segments if len(segment)], query, other)
    write_labels(PanopticLabeling.from_segments(selected, len(labeling)), out)
    typer.echo(f"{len(selected)} of {len(segments)} segments match {text!r}")


@app.command("evaluate")
@handle_errors
def evaluate_command(
    ctx: typer.Context,
    pred: Path = typer.Option(..., "--pred", help="Directory of predicted .label files"),
    gt: Path = typer.Option(..., "--gt", help="Directory of ground-truth .label files"),
    vocab: str = typer.Option(..., "--vocab", help="Vocabulary of the ground truth"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="JSON report to write"),
    oracle: bool = typer.Option(False, "--oracle", help="Relabel predictions with their majority GT class"),
    merge: bool = typer.Option(False, "--merge-stuff", help="One predicted instance per stuff class"),
    frustum: bool = typer.Option(False, "--frustum", help="Score only points seen by a camera"),
    super_classes: bool = typer.Option(False, "--super-classes", help="Evaluate on super classes"),
    min_gt_points: int = typer.Option(0, "--min-gt-points", min=0),
    clouds: Optional[Path] = typer.Option(None, "--clouds", help="Scans, needed for --frustum"),
    calib: Optional[Path] = typer.Option(None, "--calib", help="Calibration, needed for --frustum"),
) -> None:
    """Panoptic quality of predictions against ground truth."""
    spec = load_vocabulary_spec(vocab)
    eval_spec = load_super_vocabulary(spec) if super_classes else spec
    cameras = None
    if frustum:
        if clouds is None:
            raise ConfigError("--frustum needs --clouds")
        cameras = _cameras(_settings(ctx), calib)

    evaluator = PanopticEvaluator(eval_spec, min_gt_points=min_gt_points)
    for label_file in _label_files(pred):
        gt_file = gt / label_file.name
        if not gt_file.is_file():
            raise DataError(f"No ground truth for {label_file.stem} in {gt}")
        truth = read_labels(gt_file)
        prediction = read_labels(label_file, len(truth))
        if oracle:
            prediction = apply_semantic_oracle(prediction, truth)
        if super_classes:
            prediction = map_to_super_classes(prediction, spec)
            truth = map_to_super_classes(truth, spec)
        if merge:
            prediction = merge_stuff(prediction, eval_spec)
        mask = None
        if cameras is not None:
            mask = frustum_filter(load_point_cloud(clouds / f"{label_file.stem}.bin"), cameras)
        evaluator.add_scan(prediction, truth, mask)

    report = evaluator.report()
    report.metadata.update({
        "semantic_oracle": str(oracle).lower(),
        "stuff_merging": str(merge).lower(),
        "frustum": str(frustum).lower(),
    })
    if out is not None:
        write_report(report, out)
    typer.echo(format_report(report), nl=False)


@app.command("stats")
@handle_errors
def stats_command(
    ctx: typer.Context,
    labels: Path = typer.Option(..., "--labels", help="Directory of .label files"),
    vocab: Optional[str] = typer.Option(None, "--vocab", help="Vocabulary for thing/stuff counts"),
    clouds: Optional[Path] = typer.Option(None, "--clouds", help="Scans, to check alignment and for --frustum"),
    frustum: bool = typer.Option(False, "--frustum", help="Also report coverage inside camera frustums"),
    calib: Optional[Path] = typer.Option(None, "--calib", help="Calibration, needed for --frustum"),
    gt: Optional[Path] = typer.Option(None, "--gt", help="Ground truth: count instances by majority GT class"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="JSON report to write"),
) -> None:
    """Label coverage and instance counts of a label directory."""
    if frustum and clouds is None:
        raise ConfigError("--frustum needs --clouds")
    cameras = _cameras(_settings(ctx), calib) if frustum else None
    stats = LabelStats()
    for label_file in _label_files(labels):
        labeling = read_labels(label_file)
        cloud = load_point_cloud(clouds / f"{label_file.stem}.bin") if clouds is not None else None
        mask = frustum_filter(cloud, cameras) if cameras is not None else None
        truth = None
        if gt is not None:
            gt_file = gt / label_file.name
            if not gt_file.is_file():
                raise DataError(f"No ground truth for {label_file.stem} in {gt}")
            truth = read_labels(gt_file, len(labeling))
        stats.add_scan(labeling, cloud, mask, truth)
    report = stats.report(load_vocabulary_spec(vocab) if vocab else None)
    if out is not None:
        write_stats(report, out)
    typer.echo(format_stats(report), nl=False)


@app.command("augment")
@handle_errors
def augment_command(
    clouds: Path = typer.Option(..., "--clouds", help="Directory of .bin scans"),
    labels: Path = typer.Option(..., "--labels", help="Directory of matching .label files"),
    out: Path = typer.Option(..., "--out", "-o", help="Directory for augmented pairs"),
    seed: int = typer.Option(0, "--seed"),
    mix: bool = typer.Option(False, "--mix/--no-mix", help="Mix each scan with the next one"),
    franken: bool = typer.Option(True, "--franken-frustum/--no-franken-frustum"),
    jitter_deg: float = typer.Option(5.0, "--jitter-deg", min=0),
    rot_z: Tuple[float, float] = typer.Option((0.0, 0.0), "--rot-z", help="Yaw range in radians"),
    flip: List[str] = typer.Option([], "--flip", help="Axis to mirror at random (x or y), repeatable"),
    scale: Tuple[float, float] = typer.Option((1.0, 1.0), "--scale"),
    translate: Tuple[float, float, float] = typer.Option((0.0, 0.0, 0.0), "--translate"),
) -> None:
    """Write training samples: crop unlabeled points, mix, replicate and transform."""
    try:
        params = AugmentParams(
            franken_frustum=franken,
            jitter_deg=jitter_deg,
            spatial=SpatialAugmentParams(
                rot_z_range=rot_z, flip_axes=tuple(flip), scale_range=scale, translate_range=translate
            ),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e

    label_files = _label_files(labels)
    samples = []
    for label_file in label_files:
        cloud = load_point_cloud(clouds / f"{label_file.stem}.bin")
        samples.append((cloud, read_labels(label_file, len(cloud))))

    for position, (cloud, labeling) in enumerate(samples):
        partner = samples[(position + 1) % len(samples)] if mix and len(samples) > 1 else None
        out_cloud, out_labels = augment_sample(cloud, labeling, params, seed + position, partner)
        write_point_cloud(out_cloud, out / f"{cloud.scan_id}.bin")
        write_labels(out_labels, out / f"{cloud.scan_id}.label")
        typer.echo(f"{cloud.scan_id}: {len(cloud)} -> {len(out_cloud)} points")


@app.command("export-ply")
@handle_errors
def export_ply_command(
    cloud_path: Path = typer.Option(..., "--cloud", help="Lidar scan (.bin)"),
    out: Path = typer.Option(..., "--out", "-o", help="PLY file to write"),
    labels: Optional[Path] = typer.Option(None, "--labels", help="Label file to color by"),
    ascii_format: bool = typer.Option(False, "--ascii", help="Write ASCII instead of binary PLY"),
) -> None:
    """Colored point cloud for inspection in a viewer."""
    cloud = load_point_cloud(cloud_path)
    labeling = read_labels(labels, len(cloud)) if labels is not None else None
    export_ply(cloud, out, labeling=labeling, binary=not ascii_format)
    typer.echo(f"Wrote {out}")


if __name__ == "__main__":
    app()
