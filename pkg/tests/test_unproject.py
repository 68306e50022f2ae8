import unittest

import numpy as np

from labelforge.core.rle import RunLengthMask
from labelforge.core.types import ImageMask, ImageMaskSet, LidarSegment, PointCloud, Provenance
from labelforge.engine.flatten import flatten_masks
from labelforge.engine.unproject import fuse_views, resolve_overlaps, unproject_masks
from labelforge.errors import ConfigError, DataError
from tests.synthetic import HEIGHT, WIDTH, make_camera, make_masks, make_scene


def pixels(cols, rows):
    return [row * WIDTH + col for row in rows for col in cols]


def cloud_of(*xyz) -> PointCloud:
    xyz = np.array(xyz, dtype=np.float64)
    return PointCloud(np.column_stack([xyz, np.zeros(len(xyz))]))


def segment(indices, token, camera="P2", mask_id=1) -> LidarSegment:
    return LidarSegment(indices, token, Provenance(((camera, mask_id),)))


class UnprojectTests(unittest.TestCase):
    def setUp(self):
        self.camera = make_camera()
        # p0, p1 land on row 100 near column 500, p2 on row 110, p3 at column 450, p4 is behind
        self.cloud = cloud_of((10, 0, 0), (10, -0.02, 0), (10, 0, -0.2), (10, 1, 0), (-10, 0, 0))
        first = RunLengthMask.from_indices(pixels(range(499, 503), [100]), WIDTH, HEIGHT)
        second = RunLengthMask.from_indices(pixels([500], range(109, 112)), WIDTH, HEIGHT)
        self.masks = ImageMaskSet(
            "P2", WIDTH, HEIGHT, (ImageMask(1, first, [1.0, 0.0]), ImageMask(2, second, [0.0, 1.0]))
        )

    def test_each_mask_collects_its_points(self):
        segments = unproject_masks(self.cloud, self.camera, self.masks)
        self.assertEqual([s.point_indices.tolist() for s in segments], [[0, 1], [2]])
        self.assertEqual(segments[1].provenance.sources, (("P2", 2),))
        np.testing.assert_array_equal(segments[1].token, [0.0, 1.0])

    def test_min_points_drops_unsupported_masks(self):
        segments = unproject_masks(self.cloud, self.camera, self.masks, min_points=2)
        self.assertEqual([s.point_indices.tolist() for s in segments], [[0, 1]])

    def test_single_point_in_single_mask(self):
        masks = ImageMaskSet("P2", WIDTH, HEIGHT, self.masks.masks[1:])
        (only,) = unproject_masks(cloud_of((10, 0, -0.2)), self.camera, masks)
        self.assertEqual(only.point_indices.tolist(), [0])

    def test_point_behind_camera_is_ignored(self):
        segments = unproject_masks(cloud_of((-10, 0, 0), (-10, 0.02, 0)), self.camera, self.masks)
        self.assertEqual(segments, [])

    def test_camera_mismatch(self):
        with self.assertRaises(DataError):
            unproject_masks(self.cloud, make_camera("P3"), self.masks)

    def test_image_size_mismatch(self):
        masks = ImageMaskSet("P2", 10, 10)
        with self.assertRaises(DataError):
            unproject_masks(self.cloud, self.camera, masks)

    def test_overlapping_masks_are_rejected(self):
        mask = self.masks.masks[0]
        masks = ImageMaskSet("P2", WIDTH, HEIGHT, (mask, ImageMask(5, mask.rle, [1.0, 1.0])))
        with self.assertRaises(DataError):
            unproject_masks(self.cloud, self.camera, masks)

    def test_min_points_must_be_positive(self):
        with self.assertRaises(ConfigError):
            unproject_masks(self.cloud, self.camera, self.masks, min_points=0)

    def test_synthetic_scene_recovers_planted_objects(self):
        cloud, _, objects = make_scene()
        flat = flatten_masks(make_masks(cloud, self.camera, objects))
        self.assertEqual(len(flat), len(objects))
        segments = unproject_masks(cloud, self.camera, flat)
        self.assertLessEqual(len(segments), len(flat))
        found = sorted(s.point_indices.tolist() for s in segments)
        self.assertEqual(found, sorted(o.tolist() for o in objects))


class FuseViewsTests(unittest.TestCase):
    def test_same_segment_from_two_cameras(self):
        t1, t2 = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
        (fused,) = fuse_views([segment(range(5), t1)], [segment(range(5), t2, camera="P3")])
        np.testing.assert_allclose(fused.token, (t1 + t2) / np.linalg.norm(t1 + t2), atol=1e-12)
        self.assertEqual(fused.provenance.sources, (("P2", 1), ("P3", 1)))

    def test_running_mean_over_three_views(self):
        tokens = np.eye(3)
        fused = [segment(range(4), tokens[0])]
        fused = fuse_views(fused, [segment(range(4), tokens[1], camera="P3")])
        fused = fuse_views(fused, [segment(range(4), tokens[2], camera="P4")])
        (only,) = fused
        np.testing.assert_allclose(only.token, np.ones(3) / np.sqrt(3), atol=1e-12)
        self.assertEqual(only.provenance.views, 3)
        np.testing.assert_allclose(only.token_sum, np.ones(3), atol=1e-12)

    def test_mean_keeps_the_raw_token_sum(self):
        fused = [segment(range(4), [2.0, 0.0])]
        fused = fuse_views(fused, [segment(range(4), [0.0, 1.0], camera="P3")])
        fused = fuse_views(fused, [segment(range(4), [0.0, 1.0], camera="P4")])
        (only,) = fused
        np.testing.assert_allclose(only.token_sum, [2.0, 2.0], atol=1e-12)
        np.testing.assert_allclose(only.token, [np.sqrt(0.5), np.sqrt(0.5)], atol=1e-12)

    def test_clipped_segments_keep_their_token_sum(self):
        fused = fuse_views([segment(range(0, 6), [1.0, 0.0])], [segment(range(0, 6), [0.0, 1.0], camera="P3")])
        larger = segment(range(3, 12), [1.0, 1.0], camera="P4")
        _, clipped = resolve_overlaps([larger] + fused, 12)
        self.assertEqual(clipped.point_indices.tolist(), [0, 1, 2])
        np.testing.assert_allclose(clipped.token_sum, [1.0, 1.0], atol=1e-12)

    def test_disjoint_segments_stay_apart(self):
        a = segment(range(0, 5), [1.0, 0.0])
        b = segment(range(5, 9), [0.0, 1.0])
        fused = fuse_views([a], [b])
        self.assertEqual([s.point_indices.tolist() for s in fused], [list(range(5)), list(range(5, 9))])
        np.testing.assert_array_equal(fused[1].token, [0.0, 1.0])

    def test_partial_overlap_merges(self):
        (fused,) = fuse_views([segment(range(0, 10), [1.0, 0.0])], [segment(range(5, 15), [1.0, 0.0])])
        self.assertEqual(fused.point_indices.tolist(), list(range(15)))

    def test_sub_threshold_overlap_is_resolved_to_larger_segment(self):
        fused = fuse_views(
            [segment(range(0, 10), [1.0, 0.0])], [segment(range(8, 12), [0.0, 1.0])], fusion_iou=0.5
        )
        self.assertEqual([s.point_indices.tolist() for s in fused], [list(range(10)), [10, 11]])

    def test_empty_accumulation_is_identity(self):
        incoming = [segment([3, 4], [0.6, 0.8]), segment([0, 1, 2], [1.0, 0.0])]
        fused = fuse_views([], incoming)
        self.assertEqual(len(fused), 2)
        for a, b in zip(fused, incoming):
            np.testing.assert_array_equal(a.point_indices, b.point_indices)
            np.testing.assert_allclose(a.token, b.token, atol=1e-12)

    def test_random_fusions_are_disjoint_unit_and_cover_union(self):
        rng = np.random.default_rng(5)
        n = 60
        for _ in range(50):
            accumulated = []
            for _ in range(3):
                views = [
                    segment(np.unique(rng.integers(0, n, size=rng.integers(1, 15))), rng.normal(size=4))
                    for _ in range(rng.integers(0, 5))
                ]
                views = resolve_overlaps(views, n)
                expected = set().union(*(set(s.point_indices.tolist()) for s in accumulated + views))
                accumulated = fuse_views(accumulated, views, num_points=n)
                covered = [set(s.point_indices.tolist()) for s in accumulated]
                self.assertEqual(set().union(*covered), expected)
                self.assertEqual(sum(len(c) for c in covered), len(expected))
                for s in accumulated:
                    self.assertAlmostEqual(float(np.linalg.norm(s.token)), 1.0, delta=1e-9)

    def test_index_outside_scan(self):
        with self.assertRaises(DataError):
            fuse_views([], [segment([0, 9], [1.0])], num_points=5)

    def test_threshold_must_be_a_ratio(self):
        with self.assertRaises(ConfigError):
            fuse_views([], [], fusion_iou=0.0)


if __name__ == "__main__":
    unittest.main()
