"""
Preprocessing of the flow: refine ROI edges against observed crossings, group
filtered traces by (entry edge, exit edge), and split every group into lane-level
channels by clustering entry offsets along the refined entry edge.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from trafficflow.errors import DegenerateDirection, EmptyInput, MalformedRecord
from trafficflow.geometry import circular_mean


logger = logging.getLogger(__name__)

DEFAULT_ENTRY_GAP = 1.75
LOW_CONFIDENCE_SUPPORT = 3


@dataclass(frozen=True, order=True)
class GoalPair:
    g_in: int
    g_out: int

    @property
    def u_turn(self):
        return self.g_in == self.g_out

    def __str__(self):
        return '{}-{}'.format(self.g_in, self.g_out)


@dataclass(frozen=True)
class EntryPoint:
    position: tuple
    lateral_offset: float
    member_count: int
    edge: int

    def to_record(self):
        return {'position': list(self.position), 'lateral_offset': self.lateral_offset,
                'member_count': self.member_count, 'edge': self.edge}

    @staticmethod
    def from_record(record):
        return EntryPoint(tuple(record['position']), float(record['lateral_offset']),
                          int(record['member_count']), int(record['edge']))


@dataclass(frozen=True)
class Channel:
    channel_id: str
    goal_pair: GoalPair
    entry_point: EntryPoint
    trace_ids: tuple
    low_confidence: bool = False

    def to_record(self):
        return {'channel': self.channel_id,
                'goal': [self.goal_pair.g_in, self.goal_pair.g_out],
                'entry': self.entry_point.to_record(),
                'traces': list(self.trace_ids),
                'low_confidence': self.low_confidence}

    @staticmethod
    def from_record(record):
        try:
            return Channel(record['channel'], GoalPair(*record['goal']),
                           EntryPoint.from_record(record['entry']),
                           tuple(record['traces']), bool(record.get('low_confidence', False)))
        except (KeyError, TypeError) as err:
            raise MalformedRecord('bad partition record: {}'.format(err))


@dataclass
class ChannelPartition:
    channels: list = field(default_factory=list)

    def __len__(self):
        return len(self.channels)

    def __iter__(self):
        return iter(self.channels)

    def channel(self, channel_id):
        for channel in self.channels:
            if channel.channel_id == channel_id:
                return channel
        raise KeyError(channel_id)

    @property
    def channel_ids(self):
        return [channel.channel_id for channel in self.channels]

    def trace_ids(self):
        return [vid for channel in self.channels for vid in channel.trace_ids]

    def to_records(self):
        return [channel.to_record() for channel in self.channels]

    @staticmethod
    def from_records(records):
        return ChannelPartition([Channel.from_record(record) for record in records])


def _inward_crossing_directions(traces, edge_index):
    directions = []
    for trace, meta in traces.items():
        if meta is None:
            continue
        if meta.entry_edge == edge_index:
            directions.append(meta.entry_direction)
        if meta.exit_edge == edge_index:
            directions.append(tuple(-v for v in meta.exit_direction))
    return np.array(directions).reshape(-1, 2)


def refine_roi_edges(roi, traces):
    """
    Rotates every crossed edge about its midpoint so that it is perpendicular to the
    circular mean of the crossing directions (exits counted reversed). Edge length
    and counterclockwise sense are kept.
    """
    edges = roi.edges.copy()
    refined = list(roi.refined)
    for index in range(roi.num_edges):
        directions = _inward_crossing_directions(traces, index)
        if len(directions) == 0:
            logger.info('edge %d has no crossings, left unrefined', index)
            continue
        try:
            inward = circular_mean(directions)
        except DegenerateDirection:
            logger.warning('edge %d: crossing directions cancel out, left unrefined', index)
            continue
        along = np.array([inward[1], -inward[0]])
        half = roi.edge_length(index) / 2
        mid = roi.edge_midpoint(index)
        edges[index] = [mid - half * along, mid + half * along]
        refined[index] = True
    return roi.with_edges(edges, refined)


def group_by_goal(traces):
    groups = {}
    for trace, meta in traces.items():
        if meta is None:
            raise EmptyInput('trace {} has no entry/exit meta'.format(trace.vehicle_id))
        groups.setdefault(GoalPair(meta.entry_edge, meta.exit_edge), []).append(trace.vehicle_id)
    return {pair: sorted(groups[pair]) for pair in sorted(groups)}


def gap_cluster(values, gap):
    """
    1D gap split: sort, then cut wherever consecutive values differ by more than gap.

    Returns index arrays into `values`, ordered by ascending value.
    """
    values = np.asarray(values, dtype=float)
    if len(values) == 0:
        return []
    order = np.argsort(values, kind='stable')
    cuts = np.flatnonzero(np.diff(values[order]) > gap) + 1
    return np.split(order, cuts)


def cluster_entry_points(offsets, edge_index, roi, gap=DEFAULT_ENTRY_GAP):
    """Returns [(EntryPoint, member indices)] for the given 1D offsets along the entry edge."""
    offsets = np.asarray(offsets, dtype=float)
    result = []
    for members in gap_cluster(offsets, gap):
        center = float(offsets[members].mean())
        position = tuple(float(v) for v in roi.point_on_edge(edge_index, center))
        result.append((EntryPoint(position, center, len(members), edge_index), members))
    return result


def build_partition(traces, roi, gap=DEFAULT_ENTRY_GAP, low_confidence_support=LOW_CONFIDENCE_SUPPORT):
    """Channels ordered by goal pair, then by entry offset; `roi` should already be refined."""
    if len(traces) == 0:
        raise EmptyInput('no traces survived filtering')
    channels = []
    for pair, vehicle_ids in group_by_goal(traces).items():
        starts = np.array([traces.meta(vid).start_point for vid in vehicle_ids])
        offsets = roi.edge_offset(pair.g_in, starts)
        for k, (entry, members) in enumerate(cluster_entry_points(offsets, pair.g_in, roi, gap)):
            member_ids = tuple(sorted(vehicle_ids[m] for m in members))
            low = len(member_ids) < low_confidence_support
            channel = Channel('{}-{}'.format(pair, k), pair, entry, member_ids, low)
            if low:
                logger.warning('channel %s has only %d traces (low confidence)',
                               channel.channel_id, len(member_ids))
            channels.append(channel)
    logger.info('partition: %d channels over %d goal pairs from %d traces',
                len(channels), len({c.goal_pair for c in channels}), len(traces))
    return ChannelPartition(channels)


def preprocess(traces, roi, gap=DEFAULT_ENTRY_GAP, low_confidence_support=LOW_CONFIDENCE_SUPPORT):
    """Edge refinement followed by partitioning; returns (refined roi, partition)."""
    refined = refine_roi_edges(roi, traces)
    return refined, build_partition(traces, refined, gap, low_confidence_support)
