import json
import unittest
from collections import Counter

import numpy as np

from test.test_trajectory import square_roi, straight_trace
from trafficflow.errors import EmptyField
from trafficflow.field import (ChangeConfig, FieldSettings, FlowField, RoiFlowStore,
                               RoiRegistry, detect_change, synthesize_field, update_fifo)
from trafficflow.geometry import Polygon, Polyline, RoiSpec, rasterize_box
from trafficflow.grouping import Channel, ChannelPartition, EntryPoint, GoalPair
from trafficflow.synth import ScenarioSpec, generate_traces
from trafficflow.trajectory import FilterConfig, Trace, TraceSet, filter_traces
from trafficflow.util import make_rng


def single_channel(traces):
    entry = EntryPoint((0.0, 0.0), 0.0, len(traces), 3)
    return ChannelPartition([Channel('c', GoalPair(3, 1), entry, tuple(t.vehicle_id for t in traces))])


def box_trace(vehicle_id, length=4.0, width=2.0):
    times = np.arange(0.0, 2.01, 0.1)
    x = 10.0 * times
    return Trace(vehicle_id, times, x, np.full(len(times), 0.05), np.zeros(len(times)), length, width)


class TestSynthesize(unittest.TestCase):

    def test_single_straight_trace(self):
        trace = box_trace('a')
        field = synthesize_field(single_channel([trace]), TraceSet([trace]))
        cells, density, direction = field.layer_cells('c')
        assert len(cells) > 0
        assert np.all(density == 1)
        assert np.allclose(direction, [1.0, 0.0])
        assert field.trip_count == 1
        assert field.cell('c', cells[0][0], cells[0][1]).density == 1
        assert field.cell('c', 10000, 10000).density == 0

    def test_identical_traces_double(self):
        one = box_trace('a')
        both = [box_trace('a'), box_trace('b')]
        single = synthesize_field(single_channel([one]), TraceSet([one]))
        double = synthesize_field(single_channel(both), TraceSet(both))
        _, d1, v1 = single.layer_cells('c')
        _, d2, v2 = double.layer_cells('c')
        assert np.array_equal(d2, 2 * d1)
        assert np.allclose(v1, v2)

    def test_dwelling_vehicle_counts_once(self):
        times = np.arange(0.0, 5.0, 0.1)
        x = np.minimum(times, 1.0) * 5.0
        trace = Trace('slow', times, x, np.zeros(len(times)), np.zeros(len(times)), 4.5, 1.8)
        field = synthesize_field(single_channel([trace]), TraceSet([trace]))
        assert field.layer('c').density.max() == 1

    def test_counting_oracle(self):
        for seed in range(10):
            spec = ScenarioSpec(seed=seed, lanes=1, traces_per_movement=2)
            traces, _ = generate_traces(spec)
            field = synthesize_field(single_channel(list(traces)), traces)
            counts = Counter()
            for trace in traces:
                covered = set()
                for i in range(len(trace)):
                    covered.update(map(tuple, rasterize_box(trace.box(i), 0.2)))
                counts.update(covered)
            cells, density, _ = field.layer_cells('c')
            assert dict(zip(map(tuple, cells.tolist()), density.tolist())) == dict(counts)
            assert field.stored_cells == len(counts)

    def test_record_round_trip(self):
        traces = [box_trace('a'), box_trace('b', 4.5, 1.8)]
        field = synthesize_field(single_channel(traces), TraceSet(traces), roi_id='r')
        restored = FlowField.from_records(json.loads(json.dumps(field.to_records())))
        assert restored.equals(field)
        assert restored.roi_id == 'r'
        assert restored.trip_count == 2


class TestFifo(unittest.TestCase):

    def setUp(self):
        self.roi = square_roi()
        pool = [straight_trace('t{:02d}'.format(k), -30, 30, 10.0, y=-4.0 + 0.8 * k, t0=k)
                for k in range(10)]
        self.pool = filter_traces(TraceSet(pool), self.roi, FilterConfig()).kept

    def batch(self, ids):
        return self.pool.subset(ids)

    def test_arrival_order(self):
        store = RoiFlowStore(self.roi, FieldSettings(capacity=10))
        store = update_fifo(store, self.batch(['t00', 't01', 't02']))
        store = update_fifo(store, self.batch(['t03', 't04', 't05']))
        assert store.queue == ['t00', 't01', 't02', 't03', 't04', 't05']

    def test_eviction(self):
        store = RoiFlowStore(self.roi, FieldSettings(capacity=5))
        ids = ['t0{}'.format(k) for k in range(7)]
        store = update_fifo(store, self.batch(ids))
        assert store.queue == ids[2:]
        assert len(store) == 5
        assert store.field.trip_count == 5

    def test_rebuild_equivalence(self):
        rng = make_rng(2)
        settings = FieldSettings(capacity=4)
        for _ in range(50):
            store = RoiFlowStore(self.roi, settings)
            expected = []
            for _ in range(3):
                size = int(rng.integers(1, 4))
                chosen = sorted(rng.choice(self.pool.ids, size=size, replace=False).tolist())
                store = update_fifo(store, self.batch(chosen))
                expected = [vid for vid in expected if vid not in chosen] + chosen
                expected = expected[-settings.capacity:]
            assert store.queue == expected
            fresh = RoiFlowStore(self.roi, settings,
                                 TraceSet([self.pool[vid] for vid in expected],
                                          {vid: self.pool.meta(vid) for vid in expected}))
            assert store.field.equals(fresh.field)
            assert store.partition == fresh.partition

    def test_registry(self):
        registry = RoiRegistry(FieldSettings(capacity=10))
        registry.register(self.roi)
        registry.register(RoiSpec(Polygon([(100, 100), (120, 100), (120, 120), (100, 120)]), 'far'))
        assert registry.locate((0.0, 0.0)) == 'square'
        assert registry.locate((110.0, 110.0)) == 'far'
        assert registry.locate((50.0, 50.0)) is None
        raw = TraceSet([self.pool[vid] for vid in ['t00', 't01']])
        registry.update_all(raw, FilterConfig())
        assert registry['square'].queue == ['t00', 't01']
        assert len(registry['far']) == 0


class TestChangeDetection(unittest.TestCase):

    def setUp(self):
        traces = [straight_trace('t{}'.format(k), -30, 30, 10.0, y=0.1 * (k - 2)) for k in range(5)]
        self.field = synthesize_field(single_channel(traces), TraceSet(traces))

    def test_on_reference(self):
        report = detect_change(self.field, [Polyline([(-40, 0), (40, 0)])])
        assert report.divergence_score < 1e-9
        assert not report.triggered

    def test_displaced_reference(self):
        report = detect_change(self.field, [Polyline([(-40, 5), (40, 5)])])
        assert report.divergence_score == 1.0
        assert report.triggered
        assert report.mismatched_cells == report.considered_cells

    def test_opposite_direction(self):
        report = detect_change(self.field, [Polyline([(40, 0), (-40, 0)])])
        assert report.divergence_score == 1.0

    def test_no_support(self):
        with self.assertRaises(EmptyField):
            detect_change(self.field, [Polyline([(-40, 0), (40, 0)])], ChangeConfig(support=50))

    def test_reroute_fractions(self):
        scores = []
        for fraction in (0.0, 0.25, 0.5, 0.75, 1.0):
            spec = ScenarioSpec(seed=4, lanes=1, traces_per_movement=12, margin=10.0,
                                obstacles=False, reroute_fraction=fraction)
            traces, truth = generate_traces(spec)
            kept = filter_traces(traces, truth.roi, FilterConfig()).kept
            store = RoiFlowStore(truth.roi, FieldSettings(), kept)
            report = detect_change(store.field, list(truth.centerlines.values()))
            scores.append(report.divergence_score)
        assert scores[0] < 0.05
        assert all(s > 0.2 for s in scores[2:])
        assert all(b >= a - 1e-9 for a, b in zip(scores, scores[1:]))


if __name__ == "__main__":
    unittest.main()
