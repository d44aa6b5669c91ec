import itertools
import unittest

import numpy as np

from test.test_field import single_channel
from test.test_trajectory import square_roi, straight_trace
from trafficflow.errors import ConfigError, EmptyStation, NoPath, TooShort
from trafficflow.evaluation import displacement_errors
from trafficflow.field import FieldSettings, FlowField, RoiFlowStore, synthesize_field
from trafficflow.geometry import FrenetFrame, GridFrame, Polyline
from trafficflow.grouping import GoalPair, preprocess
from trafficflow.search import (CandidatePath, LateralCluster, LatticeCosts, SearchConfig,
                                StationLattice, build_lattice, dp_search, initial_guess_search,
                                lateral_clusters, non_maximum_suppress, sample_stations,
                                search_channel, search_field)
from trafficflow.synth import ScenarioSpec, generate_traces
from trafficflow.trajectory import FilterConfig, TraceSet, filter_traces
from trafficflow.util import compare_arrays, make_rng


def lane_traces(ys, prefix='s'):
    return [straight_trace('{}{}'.format(prefix, k), -30, 30, 10.0, y=y) for k, y in enumerate(ys)]


def candidate(offsets, cost, stations=None):
    offsets = tuple(float(d) for d in offsets)
    if stations is None:
        stations = tuple(3.0 * k for k in range(len(offsets)))
    return CandidatePath('c', Polyline(np.stack([stations, offsets], axis=1)), cost, offsets, stations)


def clusters_at(offsets, supports):
    return [LateralCluster(d, s, (1.0, 0.0), 1) for d, s in zip(offsets, supports)]


class TestStations(unittest.TestCase):

    def test_even_length(self):
        stations = sample_stations(Polyline([(0, 0), (30, 0)]))
        assert len(stations) == 11
        assert compare_arrays(stations, np.arange(0, 31, 3))

    def test_remainder(self):
        stations = sample_stations(Polyline([(0, 0), (31, 0)]))
        assert compare_arrays(stations, list(range(0, 31, 3)) + [31])

    def test_too_short(self):
        with self.assertRaises(TooShort):
            sample_stations(Polyline([(0, 0), (2.5, 0)]))

    def test_spacing_property(self):
        rng = make_rng(8)
        cfg = SearchConfig()
        for _ in range(100):
            length = rng.uniform(3.0, 80.0)
            stations = sample_stations(Polyline([(0, 0), (length, 0)]), cfg)
            gaps = np.diff(stations)
            assert stations[0] == 0.0
            assert abs(stations[-1] - length) < 1e-9
            assert np.allclose(gaps[:-1], cfg.station_spacing)
            assert 0 < gaps[-1] <= cfg.station_spacing + 1e-9

    def test_config_validation(self):
        with self.assertRaises(ConfigError):
            SearchConfig(station_spacing=0)
        with self.assertRaises(ConfigError):
            SearchConfig(density_weight=0, direction_weight=0)


class TestInitialGuess(unittest.TestCase):

    def test_straight_lane(self):
        roi = square_roi()
        kept = filter_traces(TraceSet(lane_traces([-0.2, -0.1, 0.0, 0.1, 0.2])), roi, FilterConfig()).kept
        refined, partition = preprocess(kept, roi)
        channel, = partition
        field = synthesize_field(partition, kept)
        l_init = initial_guess_search(field, channel.channel_id, channel.entry_point, refined,
                                      channel.goal_pair)
        assert compare_arrays(l_init.start, channel.entry_point.position)
        assert np.all(np.abs(l_init.points[:, 1]) <= 0.2 + 1e-9)
        assert l_init.end[0] >= 10.0

    def test_corridor(self):
        spec = ScenarioSpec(seed=3, arms=(0, 1), movements=('right',), lanes=1, traces_per_movement=10)
        traces, truth = generate_traces(spec)
        kept = filter_traces(traces, truth.roi, FilterConfig()).kept
        store = RoiFlowStore(truth.roi, FieldSettings(), kept)
        channel, = store.partition
        field = store.field
        l_init = initial_guess_search(field, channel.channel_id, channel.entry_point,
                                      store.refined_roi, channel.goal_pair)
        density, _ = field.query_points(channel.channel_id, l_init.points[1:])
        assert np.all(density >= 1)
        # leaves through the east edge
        assert l_init.end[0] >= spec.half_size - 0.2

    def test_empty_channel(self):
        field = FlowField.empty(GridFrame(0.2), ['c'])
        entry = single_channel(lane_traces([0.0])).channel('c').entry_point
        with self.assertRaises(NoPath):
            initial_guess_search(field, 'c', entry, square_roi(), GoalPair(3, 1))


class TestLateralClusters(unittest.TestCase):

    def setUp(self):
        traces = lane_traces([0.0, 0.0, 0.1, 3.5, 3.5, 3.6])
        self.field = synthesize_field(single_channel(traces), TraceSet(traces))
        self.frame = FrenetFrame(Polyline([(-10, 0), (10, 0)]))

    def test_single_lane(self):
        traces = lane_traces([-0.1, 0.0, 0.1])
        field = synthesize_field(single_channel(traces), TraceSet(traces))
        for station in (0.0, 6.0, 15.0):
            found = lateral_clusters(field, 'c', self.frame, station)
            assert len(found) == 1
            assert abs(found[0].offset) < 0.15
            assert found[0].support == 3

    def test_two_lanes(self):
        found = lateral_clusters(self.field, 'c', self.frame, 5.0)
        assert len(found) == 2
        assert abs(found[0].offset) < 0.2
        assert abs(found[1].offset - found[0].offset - 3.5) < 0.2

    def test_empty_band(self):
        frame = FrenetFrame(Polyline([(-10, 20), (10, 20)]))
        with self.assertRaises(EmptyStation):
            lateral_clusters(self.field, 'c', frame, 5.0)

    def test_lattice_too_short(self):
        with self.assertRaises(NoPath):
            build_lattice(self.field, 'c', Polyline([(0, 0), (2, 0)]))


class TestDynamicProgramming(unittest.TestCase):

    def setUp(self):
        traces = lane_traces([0.0, 1.0, 2.0])
        self.field = synthesize_field(single_channel(traces), TraceSet(traces))
        self.frame = FrenetFrame(Polyline([(0, 0), (9, 0)]))

    def lattice(self, clusters):
        return StationLattice(self.frame, np.array([0.0, 3.0, 6.0, 9.0]), clusters)

    def test_forced_chain(self):
        lattice = self.lattice([clusters_at([0.0], [1])] + [clusters_at([1.0], [2])] * 3)
        candidates = dp_search(lattice, self.field, 'c')
        assert len(candidates) == 1
        assert candidates[0].offsets == (0.0, 1.0, 1.0, 1.0)
        assert np.isfinite(candidates[0].cost)
        assert compare_arrays(candidates[0].polyline.points, [[0, 0], [3, 1], [6, 1], [9, 1]])

    def test_matches_enumeration(self):
        lattice = self.lattice([clusters_at([0.0, 2.0], [3, 1]),
                                clusters_at([0.0, 1.0, 2.0], [3, 2, 1]),
                                clusters_at([0.5, 1.5, 5.0], [2, 2, 1]),
                                clusters_at([0.0, 1.0, 2.0], [1, 3, 2])])
        costs = LatticeCosts(lattice, self.field, 'c')
        enumerated = {}
        for chain in itertools.product(*[range(n) for n in lattice.shape]):
            cost = costs.chain_cost(chain)
            if np.isfinite(cost):
                enumerated[costs.offsets(chain)] = cost
        best = min(enumerated.values())
        candidates = dp_search(lattice, self.field, 'c')
        assert abs(candidates[0].cost - best) < 1e-9
        assert abs(enumerated[candidates[0].offsets] - best) < 1e-9
        for found in candidates:
            assert abs(enumerated[found.offsets] - found.cost) < 1e-9
        assert [c.cost for c in candidates] == sorted(c.cost for c in candidates)
        # the unsupported cluster at 5 m never appears
        assert all(c.offsets[2] != 5.0 for c in candidates)

    def test_random_lattices_match_enumeration(self):
        rng = make_rng(21)
        for _ in range(100):
            count = int(rng.integers(2, 5))
            clusters = []
            for _ in range(count):
                width = int(rng.integers(1, 4))
                offsets = np.sort(rng.uniform(-0.5, 2.5, size=width))
                clusters.append(clusters_at(offsets.tolist(), rng.integers(1, 4, size=width).tolist()))
            lattice = StationLattice(self.frame, np.array([0.0, 3.0, 6.0, 9.0])[:count], clusters)
            costs = LatticeCosts(lattice, self.field, 'c')
            best = min(costs.chain_cost(chain)
                       for chain in itertools.product(*[range(n) for n in lattice.shape]))
            found = dp_search(lattice, self.field, 'c')[0]
            assert abs(found.cost - best) < 1e-9

    def test_no_complete_chain(self):
        lattice = self.lattice([clusters_at([0.0], [1]), clusters_at([10.0], [1]),
                                clusters_at([0.0], [1]), clusters_at([0.0], [1])])
        with self.assertRaises(NoPath):
            dp_search(lattice, self.field, 'c')


class TestSuppression(unittest.TestCase):

    def test_close_candidates(self):
        kept = non_maximum_suppress([candidate([0.3] * 5, 2.0), candidate([0.0] * 5, 1.0)])
        assert [c.cost for c in kept] == [1.0]

    def test_distant_candidates(self):
        kept = non_maximum_suppress([candidate([0.0] * 5, 1.0), candidate([4.0] * 5, 2.0)])
        assert len(kept) == 2

    def test_fraction_threshold(self):
        base = candidate([0.0] * 8, 1.0)
        quarter = candidate([0, 0, 0, 3, 3, 0, 0, 0], 2.0)
        eighth = candidate([0, 0, 0, 3, 0, 0, 0, 0], 1.5)
        kept = non_maximum_suppress([quarter, eighth, base])
        assert [c.cost for c in kept] == [1.0, 2.0]
        # exactly 20 % of stations does not count as different
        fifth = candidate([0, 0, 3, 0, 0], 2.0)
        assert len(non_maximum_suppress([candidate([0.0] * 5, 1.0), fifth])) == 1

    def test_compares_against_every_kept_path(self):
        kept = non_maximum_suppress([candidate([0.0] * 5, 1.0), candidate([4.0] * 5, 2.0),
                                     candidate([3.8] * 5, 3.0)])
        assert [c.cost for c in kept] == [1.0, 2.0]


class TestChannelSearch(unittest.TestCase):

    def test_straight_lane(self):
        roi = square_roi()
        kept = filter_traces(TraceSet(lane_traces([-0.2, -0.1, 0.0, 0.1, 0.2])), roi, FilterConfig()).kept
        refined, partition = preprocess(kept, roi)
        channel, = partition
        field = synthesize_field(partition, kept)
        result = search_channel(field, channel, refined)
        assert all(n == 1 for n in result.lattice.shape)
        assert len(result.candidates) == 1
        path, = result.kept
        assert compare_arrays(path.polyline.start, channel.entry_point.position)
        assert np.all(np.abs(path.polyline.points[:, 1]) < 0.3)
        s = np.arange(0.025, path.polyline.length, 0.05)
        density, _ = field.query_points(channel.channel_id, path.polyline.point_at(s))
        assert np.all(density >= 1)
        restored = CandidatePath.from_record(path.to_record())
        assert restored.offsets == path.offsets
        assert compare_arrays(restored.polyline.points, path.polyline.points)

    def test_bimodal_left_turn(self):
        spec = ScenarioSpec(seed=1, arms=(0, 3), movements=('left',), lanes=1,
                            traces_per_movement=20, bimodal=('S0-left',), obstacles=False)
        traces, truth = generate_traces(spec)
        kept = filter_traces(traces, truth.roi, FilterConfig()).kept
        assert len(kept) == 20
        store = RoiFlowStore(truth.roi, FieldSettings(), kept)
        results, failures = search_field(store.field, store.partition, store.refined_roi)
        assert failures == {}
        result, = results.values()
        assert len(result.kept) == 2
        cfg = SearchConfig()
        a, b = result.kept
        apart = np.abs(np.array(a.offsets) - np.array(b.offsets)) > cfg.nms_lateral_threshold
        assert np.mean(apart) > cfg.nms_fraction
        # each driving mode is followed by its own kept path
        matched = []
        for reference in truth.references:
            ades = [displacement_errors(path.polyline, reference.polyline).ade for path in result.kept]
            assert min(ades) < 0.8
            matched.append(int(np.argmin(ades)))
        assert sorted(matched) == [0, 1]

    def test_missing_layer_reported(self):
        roi = square_roi()
        kept = filter_traces(TraceSet(lane_traces([0.0, 0.1])), roi, FilterConfig()).kept
        refined, partition = preprocess(kept, roi)
        field = FlowField.empty(GridFrame(0.2))
        results, failures = search_field(field, partition, refined)
        assert results == {}
        assert list(failures) == partition.channel_ids
        assert all(isinstance(err, NoPath) for err in failures.values())


if __name__ == "__main__":
    unittest.main()
