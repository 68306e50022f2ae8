import itertools
import json
import tempfile
import unittest
from pathlib import Path

import numpy as np

from labelforge.core.types import CameraModel, LidarSegment, PanopticLabeling, PointCloud
from labelforge.evaluation import (
    PanopticEvaluator,
    apply_semantic_oracle,
    evaluate_panoptic,
    format_report,
    frustum_filter,
    merge_stuff,
    semantic_oracle,
    write_report,
)
from labelforge.errors import DataError
from labelforge.zeroshot.vocabulary import ClassEntry, VocabularySpec

CAR, TRUCK, PERSON, ROAD, VEGETATION = 1, 2, 3, 4, 5


def five_classes() -> VocabularySpec:
    return VocabularySpec(
        name="five",
        classes=[
            ClassEntry(class_id=CAR, name="car", prompts=["car"], is_thing=True),
            ClassEntry(class_id=TRUCK, name="truck", prompts=["truck"], is_thing=True),
            ClassEntry(class_id=PERSON, name="person", prompts=["person"], is_thing=True),
            ClassEntry(class_id=ROAD, name="road", prompts=["road"]),
            ClassEntry(class_id=VEGETATION, name="vegetation", prompts=["vegetation"]),
        ],
    )


def labeling(semantic, instance) -> PanopticLabeling:
    return PanopticLabeling(np.asarray(semantic), np.asarray(instance))


def brute_force_counts(pred: PanopticLabeling, gt: PanopticLabeling, vocab: VocabularySpec):
    """Per class: (iou_sum, tp, fp, fn) from an exhaustive IoU matrix over Python sets."""
    keep = [i for i in range(len(gt)) if gt.semantic[i] != 0]

    def segments(lab, class_id):
        groups = {}
        for i in keep:
            if lab.semantic[i] == class_id:
                key = int(lab.instance[i]) if vocab.is_thing(class_id) else 0
                if vocab.is_thing(class_id) and key == 0:
                    continue
                groups.setdefault(key, set()).add(i)
        return list(groups.values())

    counts = {}
    for class_id in vocab.class_ids:
        gt_segments, pred_segments = segments(gt, class_id), segments(pred, class_id)
        iou_sum, gt_hit, pred_hit = 0.0, set(), set()
        for g, p in itertools.product(range(len(gt_segments)), range(len(pred_segments))):
            inter = len(gt_segments[g] & pred_segments[p])
            iou = inter / len(gt_segments[g] | pred_segments[p])
            if iou > 0.5:
                iou_sum += iou
                gt_hit.add(g)
                pred_hit.add(p)
        counts[class_id] = (
            iou_sum,
            len(gt_hit),
            len(pred_segments) - len(pred_hit),
            len(gt_segments) - len(gt_hit),
        )
    return counts


def ratios(iou_sum, tp, fp, fn):
    denominator = tp + 0.5 * fp + 0.5 * fn
    return (
        iou_sum / denominator if denominator else 0.0,
        iou_sum / tp if tp else 0.0,
        tp / denominator if denominator else 0.0,
    )


def random_scan(rng, vocab: VocabularySpec):
    n = int(rng.integers(1, 501))
    classes = rng.choice(vocab.class_ids, size=int(rng.integers(1, 6)), replace=False)
    gt_sem = rng.choice(np.append(classes, 0), size=n)
    gt_inst = np.where(np.isin(gt_sem, vocab.thing_ids), rng.integers(1, 9, size=n), 0)

    pred_sem, pred_inst = gt_sem.copy(), gt_inst.copy()
    noisy = rng.random(n) < rng.uniform(0.0, 0.5)
    pred_sem[noisy] = rng.choice(np.append(vocab.class_ids, 0), size=int(noisy.sum()))
    pred_inst[noisy] = rng.integers(0, 9, size=int(noisy.sum()))
    pred_inst = rng.permutation(9)[pred_inst] * (pred_sem != 0)
    return labeling(pred_sem, pred_inst), labeling(gt_sem, gt_inst)


class PanopticQualityTests(unittest.TestCase):
    def setUp(self):
        self.vocab = five_classes()

    def test_perfect_prediction(self):
        gt = labeling([1, 1, 2, 3, 4, 5, 1], [1, 1, 2, 3, 0, 0, 4])
        report = evaluate_panoptic(gt, gt, self.vocab)
        self.assertEqual(report.universe, [1, 2, 3, 4, 5])
        for metrics in report.per_class.values():
            self.assertEqual((metrics.pq, metrics.sq, metrics.rq), (1.0, 1.0, 1.0))
        self.assertEqual(report.pq, 1.0)
        self.assertEqual(report.miou, 1.0)

    def test_empty_prediction_is_all_false_negatives(self):
        gt = labeling([1, 1, 4], [1, 1, 0])
        report = evaluate_panoptic(PanopticLabeling.empty(3), gt, self.vocab)
        self.assertEqual(report.pq, 0.0)
        self.assertEqual(report.per_class[CAR].fn, 1)
        self.assertEqual(report.per_class[ROAD].fn, 1)

    def test_partial_overlap_is_a_true_positive(self):
        gt = labeling([CAR] * 10, [1] * 10)
        pred = labeling([CAR] * 8 + [0, 0], [1] * 8 + [0, 0])
        report = evaluate_panoptic(pred, gt, self.vocab)
        car = report.per_class[CAR]
        self.assertEqual((car.tp, car.fp, car.fn), (1, 0, 0))
        self.assertAlmostEqual(car.pq, 0.8, places=12)
        self.assertAlmostEqual(100 * report.pq, 80.0, places=9)

    def test_half_overlap_does_not_match(self):
        gt = labeling([CAR] * 4, [1] * 4)
        pred = labeling([CAR] * 4, [1, 1, 2, 2])
        car = evaluate_panoptic(pred, gt, self.vocab).per_class[CAR]
        self.assertEqual((car.tp, car.fp, car.fn), (0, 2, 1))

    def test_void_ground_truth_is_ignored(self):
        gt = labeling([CAR, CAR, 0, 0], [1, 1, 0, 0])
        pred = labeling([CAR] * 4, [1] * 4)
        self.assertEqual(evaluate_panoptic(pred, gt, self.vocab).pq, 1.0)
        included = evaluate_panoptic(pred, gt, self.vocab, ignore_void=False).per_class[CAR]
        self.assertEqual((included.tp, included.fp, included.fn), (0, 1, 1))

    def test_frustum_mask_restricts_counts(self):
        gt = labeling([CAR, CAR, ROAD, ROAD], [1, 1, 0, 0])
        pred = labeling([CAR, CAR, VEGETATION, VEGETATION], [1, 1, 0, 0])
        report = evaluate_panoptic(pred, gt, self.vocab, frustum_mask=np.array([1, 1, 0, 0], dtype=bool))
        self.assertEqual(report.universe, [CAR])
        self.assertEqual(report.pq, 1.0)

    def test_pq_dagger_scores_stuff_by_semantic_iou(self):
        gt = labeling([ROAD] * 4 + [CAR] * 2, [0] * 4 + [1] * 2)
        pred = labeling([ROAD] * 2 + [0] * 2 + [CAR] * 2, [0] * 4 + [1] * 2)
        report = evaluate_panoptic(pred, gt, self.vocab)
        self.assertEqual(report.per_class[ROAD].pq, 0.0)
        self.assertAlmostEqual(report.per_class[ROAD].iou, 0.5)
        self.assertAlmostEqual(report.pq_dagger, 0.75)
        self.assertAlmostEqual(report.pq_things, 1.0)
        self.assertEqual(report.pq_stuff, 0.0)

    def test_thing_points_without_instance_form_no_segment(self):
        gt = labeling([CAR] * 4 + [TRUCK] * 2, [1] * 4 + [0] * 2)
        pred = labeling([CAR] * 6, [1] * 3 + [0] * 3)
        report = evaluate_panoptic(pred, gt, self.vocab)
        car = report.per_class[CAR]
        self.assertEqual((car.tp, car.fp, car.fn), (1, 0, 0))
        self.assertAlmostEqual(car.sq, 0.75)
        truck = report.per_class[TRUCK]
        self.assertEqual((truck.tp, truck.fp, truck.fn), (0, 0, 0))
        self.assertAlmostEqual(car.iou, 4 / 6)

    def test_min_gt_points_ignores_small_objects(self):
        gt = labeling([CAR] * 5 + [TRUCK] * 2, [1] * 5 + [2] * 2)
        pred = labeling([CAR] * 5 + [TRUCK] * 2, [1] * 5 + [2] * 2)
        report = evaluate_panoptic(pred, gt, self.vocab, min_gt_points=3)
        truck = report.per_class.get(TRUCK)
        self.assertEqual((truck.tp, truck.fp, truck.fn), (0, 0, 0))

    def test_errors(self):
        with self.assertRaises(DataError):
            evaluate_panoptic(PanopticLabeling.empty(3), PanopticLabeling.empty(4), self.vocab)
        with self.assertRaises(DataError):
            evaluate_panoptic(labeling([7], [0]), labeling([1], [1]), self.vocab)

    def test_matches_brute_force_reference(self):
        rng = np.random.default_rng(2024)
        evaluator = PanopticEvaluator(self.vocab)
        totals = {c: np.zeros(4) for c in self.vocab.class_ids}
        for scan in range(200):
            pred, gt = random_scan(rng, self.vocab)
            expected = brute_force_counts(pred, gt, self.vocab)
            report = evaluate_panoptic(pred, gt, self.vocab)
            evaluator.add_scan(pred, gt)
            for class_id, counts in expected.items():
                totals[class_id] += counts
                metrics = report.per_class.get(class_id)
                if metrics is None:
                    self.assertEqual(counts[1:], (0, 0, 0), msg=f"scan {scan}, class {class_id}")
                    continue
                self.assertEqual((metrics.tp, metrics.fp, metrics.fn), counts[1:], msg=f"scan {scan}")
                for got, want in zip((metrics.pq, metrics.sq, metrics.rq), ratios(*counts)):
                    self.assertAlmostEqual(got, want, delta=1e-9, msg=f"scan {scan}, class {class_id}")

        accumulated = evaluator.report()
        self.assertEqual(accumulated.num_scans, 200)
        for class_id, metrics in accumulated.per_class.items():
            iou_sum, tp, fp, fn = totals[class_id]
            self.assertEqual((metrics.tp, metrics.fp, metrics.fn), (tp, fp, fn))
            for got, want in zip((metrics.pq, metrics.sq, metrics.rq), ratios(iou_sum, tp, fp, fn)):
                self.assertAlmostEqual(got, want, delta=1e-9)

    def test_pq_is_rq_times_sq(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            pred, gt = random_scan(rng, self.vocab)
            for metrics in evaluate_panoptic(pred, gt, self.vocab).per_class.values():
                if metrics.tp:
                    self.assertAlmostEqual(metrics.pq, metrics.rq * metrics.sq, delta=1e-12)
                for value in (metrics.pq, metrics.sq, metrics.rq, metrics.iou):
                    self.assertTrue(0.0 <= value <= 1.0)

    def test_instance_ids_can_be_permuted(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            pred, gt = random_scan(rng, self.vocab)
            permuted = labeling(pred.semantic, rng.permutation(65536)[pred.instance] * (pred.instance != 0))
            first = evaluate_panoptic(pred, gt, self.vocab)
            second = evaluate_panoptic(permuted, gt, self.vocab)
            self.assertEqual(first.universe, second.universe)
            for class_id, metrics in first.per_class.items():
                other = second.per_class[class_id]
                self.assertEqual((metrics.tp, metrics.fp, metrics.fn), (other.tp, other.fp, other.fn))
                self.assertAlmostEqual(metrics.pq, other.pq, delta=1e-12)


class OracleTests(unittest.TestCase):
    def test_majority_vote(self):
        gt = labeling([CAR, CAR, ROAD, 0, 0], [1, 1, 0, 0, 0])
        self.assertEqual(semantic_oracle([np.array([0, 1, 2]), np.array([3, 4])], gt), [CAR, 0])

    def test_ties_go_to_the_lower_class_id(self):
        gt = labeling([CAR, ROAD], [1, 0])
        self.assertEqual(semantic_oracle([np.array([0, 1])], gt), [CAR])
        gt = labeling([ROAD, CAR], [0, 1])
        self.assertEqual(semantic_oracle([LidarSegment(np.array([0, 1]), np.ones(2))], gt), [CAR])

    def test_out_of_range_segment(self):
        with self.assertRaises(DataError):
            semantic_oracle([np.array([5])], PanopticLabeling.empty(3))

    def test_relabels_prediction(self):
        gt = labeling([CAR, CAR, ROAD, 0, 0], [1, 1, 0, 0, 0])
        pred = labeling([1, 1, 1, 1, 1], [1, 1, 1, 2, 2])
        relabeled = apply_semantic_oracle(pred, gt)
        self.assertEqual(relabeled.semantic.tolist(), [CAR, CAR, CAR, 0, 0])
        self.assertEqual(relabeled.instance.tolist(), [1, 1, 1, 0, 0])

    def test_oracle_matches_at_least_as_many_segments(self):
        vocab = VocabularySpec(classes=[
            ClassEntry(class_id=k, name=str(k), prompts=[str(k)], is_thing=True) for k in (1, 2, 3)
        ])
        rng = np.random.default_rng(12)
        for _ in range(30):
            n = int(rng.integers(4, 40))
            gt = labeling(rng.integers(0, 4, size=n), rng.integers(1, 4, size=n))
            pred_instance = rng.integers(1, 5, size=n)
            segment_ids = np.unique(pred_instance)
            oracle = apply_semantic_oracle(labeling(np.ones(n), pred_instance), gt)
            best = sum(m.tp for m in evaluate_panoptic(oracle, gt, vocab).per_class.values())
            for assignment in itertools.product((1, 2, 3), repeat=segment_ids.size):
                lookup = dict(zip(segment_ids.tolist(), assignment))
                semantic = np.array([lookup[i] for i in pred_instance.tolist()])
                other = evaluate_panoptic(labeling(semantic, pred_instance), gt, vocab)
                self.assertGreaterEqual(best, sum(m.tp for m in other.per_class.values()))


class MergeStuffTests(unittest.TestCase):
    def setUp(self):
        self.vocab = five_classes()

    def test_stuff_instances_collapse(self):
        merged = merge_stuff(labeling([VEGETATION] * 4, [3, 3, 7, 7]), self.vocab)
        self.assertEqual(np.unique(merged.instance).tolist(), [3])

    def test_mixed_scan(self):
        lab = labeling([VEGETATION, VEGETATION, CAR, CAR, 0], [1, 2, 3, 4, 0])
        merged = merge_stuff(lab, self.vocab)
        self.assertEqual(merged.instance.tolist(), [1, 1, 3, 4, 0])
        self.assertEqual(merged.semantic.tolist(), lab.semantic.tolist())

    def test_stuff_without_instance_gets_a_fresh_id(self):
        merged = merge_stuff(labeling([ROAD, ROAD, CAR], [0, 0, 1]), self.vocab)
        self.assertEqual(merged.instance.tolist(), [2, 2, 1])

    def test_merging_keeps_stuff_quality(self):
        gt = labeling([VEGETATION] * 6, [1] * 6)
        pred = labeling([VEGETATION] * 5 + [0], [1, 1, 1, 2, 2, 0])
        before = evaluate_panoptic(pred, gt, self.vocab).per_class[VEGETATION]
        after = evaluate_panoptic(merge_stuff(pred, self.vocab), gt, self.vocab).per_class[VEGETATION]
        self.assertGreaterEqual(after.sq, before.sq)
        self.assertEqual(after.tp, 1)


class FrustumTests(unittest.TestCase):
    @staticmethod
    def camera(camera_id, rotation):
        transform = np.eye(4)
        transform[:3, :3] = rotation
        projection = np.array([[100.0, 0, 50, 0], [0, 100, 50, 0], [0, 0, 1, 0]])
        return CameraModel(camera_id, projection, transform, 100, 100)

    def setUp(self):
        self.front = self.camera("front", [[0, -1, 0], [0, 0, -1], [1, 0, 0]])
        self.back = self.camera("back", [[0, 1, 0], [0, 0, -1], [-1, 0, 0]])
        xyz = np.array([[10.0, 0, 0], [-10.0, 0, 0], [0, 10.0, 0]])
        self.cloud = PointCloud(np.column_stack([xyz, np.zeros(3)]))

    def test_single_camera(self):
        self.assertEqual(frustum_filter(self.cloud, [self.front]).tolist(), [True, False, False])

    def test_union_over_cameras(self):
        self.assertEqual(frustum_filter(self.cloud, [self.front, self.back]).tolist(), [True, True, False])

    def test_needs_a_camera(self):
        with self.assertRaises(DataError):
            frustum_filter(self.cloud, [])


class ReportTests(unittest.TestCase):
    def test_table_and_json(self):
        gt = labeling([CAR, CAR, ROAD], [1, 1, 0])
        report = evaluate_panoptic(gt, gt, five_classes())
        text = format_report(report)
        lines = text.splitlines()
        self.assertTrue(lines[0].split()[:3] == ["PQ", "PQ†", "RQ"])
        self.assertEqual(lines[1].split()[0], "100.0")
        self.assertIn("car", text)
        self.assertIn("pq_dagger: ", text)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "report" / "pq.json"
            write_report(report, path)
            payload = json.loads(path.read_text(encoding="utf-8"))
        self.assertEqual(payload["pq"], 1.0)
        self.assertEqual(payload["universe"], [CAR, ROAD])


if __name__ == "__main__":
    unittest.main()
