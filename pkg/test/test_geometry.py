import math
import unittest

import numpy as np

from trafficflow.errors import DegenerateDirection, GeometryError, OutOfCapture
from trafficflow.geometry import (FrenetFrame, GridFrame, OrientedBox, Polygon, Polyline,
                                  Pose2, RoiSpec, circular_mean, normalize_angle,
                                  polygon_edge_crossing, rasterize_box)
from trafficflow.util import compare_arrays, make_rng


class TestAngles(unittest.TestCase):

    def test_normalize_angle(self):
        assert normalize_angle(math.pi) == math.pi
        assert normalize_angle(-math.pi) == math.pi
        assert abs(normalize_angle(3 * math.pi / 2) + math.pi / 2) < 1e-12
        wrapped = normalize_angle(np.array([0.0, 2 * math.pi, -5.0]))
        assert compare_arrays(wrapped, [0.0, 0.0, -5.0 + 2 * math.pi])

    def test_pose_normalizes_theta(self):
        pose = Pose2(1, 2, 3 * math.pi)
        assert pose.theta == math.pi

    def test_circular_mean(self):
        assert compare_arrays(circular_mean([(1, 0), (1, 0)]), [1, 0])
        half = math.sqrt(2) / 2
        assert compare_arrays(circular_mean([(1, 0), (0, 1)]), [half, half])

    def test_circular_mean_of_perturbed_headings(self):
        rng = make_rng(3)
        angles = np.radians(30 + rng.uniform(-10, 10, size=100))
        directions = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        resultant = directions.sum(axis=0)
        expected = math.atan2(resultant[1], resultant[0])
        mean = circular_mean(directions)
        assert abs(math.atan2(mean[1], mean[0]) - expected) < math.radians(2)
        assert abs(math.degrees(math.atan2(mean[1], mean[0])) - 30) < 2

    def test_circular_mean_degenerate(self):
        with self.assertRaises(DegenerateDirection):
            circular_mean([(1, 0), (-1, 0)])
        with self.assertRaises(DegenerateDirection):
            circular_mean([])


class TestRasterize(unittest.TestCase):

    def test_axis_aligned_box(self):
        box = OrientedBox(Pose2(0, 0, 0), 4.0, 2.0)
        assert len(rasterize_box(box, 0.2)) == 200

    def test_rotated_box(self):
        box = OrientedBox(Pose2(0, 0, math.pi / 2), 4.0, 2.0)
        cells = rasterize_box(box, 0.2)
        assert len(cells) == 200
        centers = GridFrame(0.2).cell_centers(cells)
        assert np.all(np.abs(centers[:, 0]) < 1.0)
        assert np.all(np.abs(centers[:, 1]) < 2.0)

    def test_diagonal_box_matches_point_test(self):
        box = OrientedBox(Pose2(0.37, -1.21, math.pi / 4), 4.5, 1.8)
        frame = GridFrame(0.2)
        cells = rasterize_box(box, 0.2)
        span = np.arange(-25, 25)
        grid_i, grid_j = np.meshgrid(span, span, indexing='ij')
        candidates = np.stack([grid_i.ravel(), grid_j.ravel()], axis=1)
        inside = box.contains(frame.cell_centers(candidates))
        expected = candidates[inside]
        expected = expected[np.lexsort((expected[:, 1], expected[:, 0]))]
        assert np.array_equal(cells, expected)

    def test_batch_matches_point_test(self):
        rng = make_rng(4)
        frame = GridFrame(0.2)
        count = 30
        centers = rng.uniform(-20, 20, size=(count, 2))
        headings = rng.uniform(-math.pi, math.pi, size=count)
        widths = rng.uniform(0.5, 2.5, size=count)
        lengths = widths + rng.uniform(0.0, 4.0, size=count)
        cells, owner = frame.rasterize_boxes(centers, headings, lengths, widths)
        span = np.arange(-20, 21)
        grid_i, grid_j = np.meshgrid(span, span, indexing='ij')
        window = np.stack([grid_i.ravel(), grid_j.ravel()], axis=1)
        for k in range(count):
            box = OrientedBox(Pose2(centers[k, 0], centers[k, 1], headings[k]), lengths[k], widths[k])
            candidates = frame.cell_of(centers[k]) + window
            expected = candidates[box.contains(frame.cell_centers(candidates))]
            got = cells[owner == k]
            assert sorted(map(tuple, got.tolist())) == sorted(map(tuple, expected.tolist()))

    def test_box_rejects_width_above_length(self):
        with self.assertRaises(GeometryError):
            OrientedBox(Pose2(0, 0, 0), 1.0, 2.0)


class TestPolyline(unittest.TestCase):

    def setUp(self):
        self.line = Polyline([(0, 0), (10, 0), (10, 10)])

    def test_arclength(self):
        assert self.line.length == 20.0
        assert compare_arrays(self.line.point_at(np.array([5.0, 15.0])), [[5, 0], [10, 5]])

    def test_duplicate_points_dropped(self):
        line = Polyline([(0, 0), (0, 0), (1, 0)])
        assert len(line) == 2
        with self.assertRaises(GeometryError):
            Polyline([(1, 1), (1, 1)])

    def test_sample_stations(self):
        assert compare_arrays(Polyline([(0, 0), (30, 0)]).sample_stations(3.0), np.arange(0, 31, 3))
        stations = Polyline([(0, 0), (31, 0)]).sample_stations(3.0)
        assert len(stations) == 12
        assert stations[-1] == 31.0

    def test_closest(self):
        s, d, dist, beyond = self.line.closest([(5, 1), (12, 5), (-1, 0)])
        assert compare_arrays(s, [5.0, 15.0, 0.0])
        assert compare_arrays(d, [1.0, -2.0, 1.0])
        assert list(beyond) == [False, False, True]
        assert compare_arrays(dist, [1.0, 2.0, 1.0])

    def test_between(self):
        part = self.line.between(5.0, 15.0)
        assert part.length == 10.0
        assert compare_arrays(part.points, [[5, 0], [10, 0], [10, 5]])

    def test_offset_straight(self):
        line = Polyline([(0, 0), (5, 0), (10, 0)])
        assert compare_arrays(line.offset([1.0, 1.0, 1.0]).points, [[0, 1], [5, 1], [10, 1]])


class TestFrenetFrame(unittest.TestCase):

    def setUp(self):
        self.frame = FrenetFrame(Polyline([(0, 0), (10, 0)]))

    def test_project(self):
        assert self.frame.project((5, 2)) == (5.0, 2.0)
        assert self.frame.project((5, 0)) == (5.0, 0.0)
        assert self.frame.project((5, -3)) == (5.0, -3.0)

    def test_out_of_capture(self):
        with self.assertRaises(OutOfCapture):
            self.frame.project((5, 20))

    def test_to_cartesian(self):
        assert compare_arrays(self.frame.to_cartesian(np.array([3.0]), np.array([-1.5])), [[3.0, -1.5]])

    def test_quarter_circle(self):
        angles = np.linspace(0, math.pi / 2, 2001)
        reference = Polyline(10 * np.stack([np.cos(angles), np.sin(angles)], axis=1))
        frame = FrenetFrame(reference)
        point = 12 * np.array([math.cos(math.pi / 4), math.sin(math.pi / 4)])
        s, d = frame.project(point)
        samples = reference.point_at(np.linspace(0, reference.length, 100001))
        gaps = np.hypot(*(samples - point).T)
        best = int(np.argmin(gaps))
        assert abs(s - best * reference.length / 100000) < 1e-3
        assert abs(abs(d) - gaps[best]) < 1e-3
        assert d < 0

    def test_station_round_trip(self):
        rng = make_rng(8)
        for _ in range(10):
            x = np.cumsum(rng.uniform(1.0, 5.0, size=8))
            reference = Polyline(np.stack([x, rng.uniform(-3.0, 3.0, size=8)], axis=1))
            frame = FrenetFrame(reference)
            stations = reference.sample_stations(0.2)
            s, d, _ = frame.project_many(frame.to_cartesian(stations, np.zeros(len(stations))))
            assert np.max(np.abs(s - stations)) < 0.1
            assert np.max(np.abs(d)) < 1e-6

    def test_self_intersecting_reference(self):
        with self.assertRaises(GeometryError):
            FrenetFrame(Polyline([(0, 0), (10, 0), (10, 10), (5, -5)]))


class TestPolygon(unittest.TestCase):

    def setUp(self):
        self.square = Polygon([(0, 0), (1, 0), (1, 1), (0, 1)])

    def test_clockwise_input_reversed(self):
        polygon = Polygon([(0, 1), (1, 1), (1, 0), (0, 0)])
        assert polygon.area == 1.0
        assert polygon.shape.exterior.is_ccw

    def test_self_intersecting_rejected(self):
        with self.assertRaises(GeometryError):
            Polygon([(0, 0), (1, 1), (1, 0), (0, 1)])

    def test_edge_crossing(self):
        edge, point = polygon_edge_crossing(self.square, ((-1, 0.5), (0.5, 0.5)))
        assert edge == 3
        assert compare_arrays(point, [0, 0.5])
        assert polygon_edge_crossing(self.square, ((0.2, 0.2), (0.8, 0.7))) is None

    def test_edge_crossing_travel_order(self):
        edge, point = polygon_edge_crossing(self.square, ((0.5, -1), (0.5, 2)))
        assert edge == 0
        assert compare_arrays(point, [0.5, 0])

    def test_edge_crossing_against_sampling(self):
        rng = make_rng(11)
        for _ in range(1000):
            a, b = rng.uniform(-1, 2, size=(2, 2))
            hit = polygon_edge_crossing(self.square, (a, b))
            t = np.linspace(0, 1, 2001)
            inside = self.square.contains(a + t[:, None] * (b - a))
            changes = np.flatnonzero(np.diff(inside.astype(int)))
            if len(changes) == 0:
                continue
            assert hit is not None
            first = a + t[changes[0]] * (b - a)
            assert np.hypot(*(hit[1] - first)) < 2e-3 * np.hypot(*(b - a)) + 1e-9

    def test_roi_edges(self):
        roi = RoiSpec(self.square)
        assert roi.num_edges == 4
        assert compare_arrays(roi.inward_normal(0), [0, 1])
        assert compare_arrays(roi.edge_midpoint(1), [1, 0.5])
        restored = RoiSpec.from_record(roi.to_record())
        assert compare_arrays(restored.edges, roi.edges)


if __name__ == "__main__":
    unittest.main()
