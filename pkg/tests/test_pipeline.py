import json
import os
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import numpy as np
from typer.testing import CliRunner

from labelforge.config import load_settings
from labelforge.core.formats import (
    read_labels,
    read_segment_table,
    write_float_rows,
    write_labels,
    write_mask_set,
    write_point_cloud,
)
from labelforge.core.types import ImageMaskSet
from labelforge.engine.pipeline import MANIFEST_NAME, METRICS_NAME, LabelEngine, read_scan_masks
from labelforge.errors import DataError
from labelforge.main import app
from tests.synthetic import CAR, HEIGHT, ROAD, TOKEN_DIM, WIDTH, make_camera, make_masks, make_scene, write_scene

runner = CliRunner()


def clean_environ():
    return {key: value for key, value in os.environ.items() if not key.startswith("LLF_")}


def write_ground_truth(directory: Path, scan_ids) -> Path:
    for scan_id in scan_ids:
        _, gt, _ = make_scene(scan_id)
        write_labels(gt, directory / f"{scan_id}.label")
    return directory


def write_two_class_vocabulary(root: Path):
    """Car and road prompts whose embeddings separate the synthetic tokens."""
    vocab = root / "two_classes.json"
    vocab.write_text(json.dumps({
        "name": "two_classes",
        "templates": ["a photo of a {}"],
        "classes": [
            {"class_id": CAR, "name": "car", "prompts": ["car"], "is_thing": True},
            {"class_id": ROAD, "name": "road", "prompts": ["road"]},
        ],
    }), encoding="utf-8")
    car = np.zeros(TOKEN_DIM)
    car[1:6] = 1.0
    rows = np.stack([car / np.linalg.norm(car), np.eye(TOKEN_DIM)[0]])
    embeddings = root / "prompts.bin"
    write_float_rows(rows, embeddings)
    return vocab, embeddings


def first_metric(output: str) -> str:
    """The PQ cell of a printed report; log lines may be mixed into the output."""
    lines = output.splitlines()
    header = next(i for i, line in enumerate(lines) if line.split()[:1] == ["PQ"])
    return lines[header + 1].split()[0]


class LabelEngineTests(unittest.TestCase):
    def setUp(self):
        self.environ = patch.dict(os.environ, clean_environ(), clear=True)
        self.environ.start()
        self.cloud, self.gt, self.objects = make_scene()
        self.masks = {"P2": make_masks(self.cloud, make_camera(), self.objects)}

    def tearDown(self):
        self.environ.stop()

    def engine(self, **engine) -> LabelEngine:
        settings = load_settings(engine=engine) if engine else load_settings()
        labeler = LabelEngine(settings, cameras=[make_camera()])
        labeler.prepare()
        return labeler

    def test_segments_are_the_planted_objects(self):
        segments, labeling, summary = self.engine().label_scan(self.cloud, self.masks)
        self.assertEqual(
            sorted(s.point_indices.tolist() for s in segments),
            sorted(o.tolist() for o in self.objects),
        )
        self.assertFalse((labeling.instance == 0).any())
        self.assertEqual((summary.masks_raw, summary.masks_flattened), (6, 6))
        self.assertEqual((summary.segments_unprojected, summary.segments_fused, summary.segments), (6, 6, 6))
        self.assertEqual(summary.segments_refined, 5)
        self.assertEqual(summary.clusters, 5)
        self.assertEqual(summary.ground_points, self.objects[0].size)

    def test_filter_drops_the_ground_segment(self):
        segments, _, _ = self.engine(refine_strategy="filter").label_scan(self.cloud, self.masks)
        self.assertEqual(len(segments), 5)
        self.assertFalse(any(np.isin(s.point_indices, self.objects[0]).any() for s in segments))

    def test_without_refinement_no_clusters_are_built(self):
        segments, _, summary = self.engine(refine_strategy="none").label_scan(self.cloud, self.masks)
        self.assertEqual(len(segments), 6)
        self.assertEqual((summary.clusters, summary.segments_refined), (0, 0))

    def test_per_camera_placement_gives_the_same_segments(self):
        after, _, _ = self.engine().label_scan(self.cloud, self.masks)
        per_camera, _, _ = self.engine(refine_placement="per_camera").label_scan(self.cloud, self.masks)
        self.assertEqual(
            [s.point_indices.tolist() for s in after],
            [s.point_indices.tolist() for s in per_camera],
        )

    def test_empty_mask_set_gives_void_labels(self):
        empty = {"P2": ImageMaskSet("P2", WIDTH, HEIGHT, ())}
        segments, labeling, _ = self.engine().label_scan(self.cloud, empty)
        self.assertEqual(segments, [])
        self.assertFalse(labeling.labeled.any())
        self.assertEqual(len(labeling), len(self.cloud))

    def test_masks_for_uncalibrated_camera(self):
        other = make_camera("P3")
        with self.assertRaises(DataError):
            self.engine().label_scan(self.cloud, {"P3": make_masks(self.cloud, other, self.objects)})

    def test_missing_mask_directory(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(DataError):
                read_scan_masks(Path(tmp), "000000")


class PseudoLabelCommandTests(unittest.TestCase):
    def setUp(self):
        self.environ = patch.dict(os.environ, clean_environ(), clear=True)
        self.environ.start()
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.scans = ("000000", "000001")
        self.clouds, self.masks, self.calib = write_scene(self.root, self.scans)
        self.gt = write_ground_truth(self.root / "gt", self.scans)

    def tearDown(self):
        self.tmp.cleanup()
        self.environ.stop()

    def pseudo_label(self, out: Path, *extra: str):
        return runner.invoke(app, [
            "pseudo-label",
            "--clouds", str(self.clouds),
            "--masks", str(self.masks),
            "--calib", str(self.calib),
            "--out", str(out),
            "--no-progress",
            *extra,
        ])

    def test_oracle_evaluation_is_perfect(self):
        out = self.root / "out"
        result = self.pseudo_label(out, "--threads", "1")
        self.assertEqual(result.exit_code, 0, result.output)
        for scan_id in self.scans:
            self.assertTrue((out / f"{scan_id}.label").is_file())

        report = self.root / "pq.json"
        result = runner.invoke(app, [
            "evaluate", "--pred", str(out), "--gt", str(self.gt), "--vocab", "semantickitti",
            "--oracle", "--merge-stuff", "--out", str(report),
        ])
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertEqual(first_metric(result.output), "100.0")
        payload = json.loads(report.read_text(encoding="utf-8"))
        self.assertEqual(payload["pq"], 1.0)
        self.assertEqual(payload["universe"], [CAR, ROAD])
        self.assertEqual(payload["metadata"]["semantic_oracle"], "true")
        self.assertEqual(payload["num_scans"], 2)

    def test_zero_shot_labels_are_perfect(self):
        vocab, embeddings = write_two_class_vocabulary(self.root)
        out = self.root / "out"
        result = self.pseudo_label(out, "--vocab", str(vocab), "--embeddings", str(embeddings))
        self.assertEqual(result.exit_code, 0, result.output)

        labeling = read_labels(out / "000000.label")
        _, gt, _ = make_scene()
        np.testing.assert_array_equal(labeling.semantic, gt.semantic)

        result = runner.invoke(app, [
            "evaluate", "--pred", str(out), "--gt", str(self.gt), "--vocab", "semantickitti", "--merge-stuff",
        ])
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertEqual(first_metric(result.output), "100.0")

    def test_rerun_is_byte_identical(self):
        first, second = self.root / "first", self.root / "second"
        self.assertEqual(self.pseudo_label(first, "--threads", "1").exit_code, 0)
        self.assertEqual(self.pseudo_label(second, "--threads", "4").exit_code, 0)
        names = sorted(p.name for p in first.iterdir() if p.name != METRICS_NAME)
        self.assertEqual(names, sorted(p.name for p in second.iterdir() if p.name != METRICS_NAME))
        for name in names:
            self.assertEqual((first / name).read_bytes(), (second / name).read_bytes(), name)

    def test_manifest_and_metrics(self):
        out = self.root / "out"
        self.assertEqual(self.pseudo_label(out).exit_code, 0)
        manifest = json.loads((out / MANIFEST_NAME).read_text(encoding="utf-8"))
        self.assertEqual(len(manifest["config_hash"]), 64)
        self.assertEqual(sorted(manifest["scans"]), list(self.scans))
        summary = manifest["scans"]["000000"]
        self.assertIsNone(summary["error"])
        self.assertEqual((summary["masks_raw"], summary["segments"], summary["segments_refined"]), (6, 6, 5))
        self.assertIn("labelforge_scans_total", (out / METRICS_NAME).read_text(encoding="utf-8"))

        segments, _ = read_segment_table(out, "000000")
        self.assertEqual(sum(s.provenance.refined for s in segments), 5)
        self.assertTrue(all(s.provenance.cameras == ("P2",) for s in segments))

    def test_empty_mask_set(self):
        cloud, _, _ = make_scene("000002")
        write_point_cloud(cloud, self.clouds / "000002.bin")
        write_mask_set(ImageMaskSet("P2", WIDTH, HEIGHT, ()), self.masks / "000002", "P2")
        out = self.root / "out"
        self.assertEqual(self.pseudo_label(out).exit_code, 0)
        labeling = read_labels(out / "000002.label", len(cloud))
        self.assertFalse(labeling.labeled.any())

    def test_missing_masks_keep_going(self):
        cloud, _, _ = make_scene("000002")
        write_point_cloud(cloud, self.clouds / "000002.bin")
        out = self.root / "out"
        result = self.pseudo_label(out)
        self.assertEqual(result.exit_code, 3, result.output)
        manifest = json.loads((out / MANIFEST_NAME).read_text(encoding="utf-8"))
        self.assertIn("000002", manifest["scans"]["000002"]["error"])
        self.assertIsNone(manifest["scans"]["000000"]["error"])
        self.assertTrue((out / "000001.label").is_file())

    def test_missing_masks_fail_fast(self):
        cloud, _, _ = make_scene("000002")
        write_point_cloud(cloud, self.clouds / "000002.bin")
        out = self.root / "out"
        result = self.pseudo_label(out, "--fail-fast", "--threads", "1")
        self.assertEqual(result.exit_code, 2, result.output)
        manifest = json.loads((out / MANIFEST_NAME).read_text(encoding="utf-8"))
        self.assertIsNotNone(manifest["scans"]["000002"]["error"])

    def test_failed_label_write_keep_going(self):
        out = self.root / "out"
        (out / "000001.label").mkdir(parents=True)
        result = self.pseudo_label(out)
        self.assertEqual(result.exit_code, 3, result.output)
        manifest = json.loads((out / MANIFEST_NAME).read_text(encoding="utf-8"))
        self.assertIn("000001.label", manifest["scans"]["000001"]["error"])
        self.assertIsNone(manifest["scans"]["000000"]["error"])
        self.assertTrue((out / "000000.label").is_file())
        self.assertTrue((out / METRICS_NAME).is_file())

    def test_failed_label_write_fail_fast(self):
        out = self.root / "out"
        (out / "000000.label").mkdir(parents=True)
        result = self.pseudo_label(out, "--fail-fast", "--threads", "1")
        self.assertEqual(result.exit_code, 2, result.output)
        manifest = json.loads((out / MANIFEST_NAME).read_text(encoding="utf-8"))
        self.assertIn("000000.label", manifest["scans"]["000000"]["error"])
        self.assertTrue((out / METRICS_NAME).is_file())

    def test_missing_inputs_are_configuration_errors(self):
        result = runner.invoke(app, [
            "pseudo-label", "--clouds", str(self.root / "absent"), "--masks", str(self.masks),
            "--calib", str(self.calib), "--out", str(self.root / "out"), "--no-progress",
        ])
        self.assertEqual(result.exit_code, 1)
        result = runner.invoke(app, [
            "pseudo-label", "--clouds", str(self.clouds), "--masks", str(self.masks),
            "--calib", str(self.root / "absent.json"), "--out", str(self.root / "out"), "--no-progress",
        ])
        self.assertEqual(result.exit_code, 1)

    def test_config_file_drives_the_run(self):
        config = self.root / "run.yaml"
        config.write_text(
            f"paths:\n  clouds: {self.clouds}\n  masks: {self.masks}\n  output: {self.root / 'from-config'}\n"
            f"calibration:\n  path: {self.calib}\n"
            "engine:\n  refine_strategy: filter\n"
            "progress: false\n",
            encoding="utf-8",
        )
        result = runner.invoke(app, ["--config", str(config), "pseudo-label"])
        self.assertEqual(result.exit_code, 0, result.output)
        manifest = json.loads((self.root / "from-config" / MANIFEST_NAME).read_text(encoding="utf-8"))
        self.assertEqual(manifest["scans"]["000000"]["segments"], 5)


if __name__ == "__main__":
    unittest.main()
