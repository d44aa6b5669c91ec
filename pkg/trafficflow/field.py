"""
The multi-channel traffic flow field.

Every channel of a partition becomes one sparse layer over a shared grid window.
A stored cell holds the number of distinct member traces whose box footprint
covers it and the circular mean of their headings there, one heading per trace.
"""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from trafficflow.errors import EmptyField, MalformedRecord
from trafficflow.geometry import DEGENERATE_NORM, GridFrame, Polyline
from trafficflow.grouping import ChannelPartition, preprocess
from trafficflow.trajectory import TraceSet, filter_traces


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FieldCell:
    density: int
    direction: tuple = None


class ChannelLayer:
    """Sparse cells of one channel, sorted by key."""

    def __init__(self, channel_id, keys, density, direction, trip_count=0):
        self.channel_id = channel_id
        self.keys = np.asarray(keys, dtype=np.int64).reshape(-1)
        self.density = np.asarray(density, dtype=np.int64).reshape(-1)
        self.direction = np.asarray(direction, dtype=float).reshape(-1, 2)
        self.trip_count = int(trip_count)

    def __len__(self):
        return len(self.keys)

    def lookup(self, keys):
        """Row index of each key, or -1 where the key is not stored."""
        keys = np.asarray(keys, dtype=np.int64)
        if len(self.keys) == 0:
            return np.full(keys.shape, -1, dtype=np.int64)
        pos = np.clip(np.searchsorted(self.keys, keys), 0, len(self.keys) - 1)
        return np.where(self.keys[pos] == keys, pos, -1)


class FlowField:

    def __init__(self, frame, window, layers, roi_id=None):
        self.frame = frame
        self.ix0, self.iy0, self.ncols, self.nrows = (int(v) for v in window)
        self.layers = OrderedDict((layer.channel_id, layer) for layer in layers)
        self.roi_id = roi_id

    @staticmethod
    def empty(frame, channel_ids=(), roi_id=None):
        layers = [ChannelLayer(cid, [], [], np.zeros((0, 2))) for cid in channel_ids]
        return FlowField(frame, (0, 0, 0, 0), layers, roi_id)

    @property
    def resolution(self):
        return self.frame.resolution

    @property
    def window(self):
        return (self.ix0, self.iy0, self.ncols, self.nrows)

    @property
    def channel_ids(self):
        return list(self.layers.keys())

    @property
    def stored_cells(self):
        return sum(len(layer) for layer in self.layers.values())

    @property
    def trip_count(self):
        return sum(layer.trip_count for layer in self.layers.values())

    def layer(self, channel_id):
        return self.layers[channel_id]

    def key_of(self, cells):
        cells = np.asarray(cells, dtype=np.int64)
        return (cells[..., 1] - self.iy0) * self.ncols + (cells[..., 0] - self.ix0)

    def cell_of_key(self, keys):
        keys = np.asarray(keys, dtype=np.int64)
        return np.stack([keys % self.ncols + self.ix0, keys // self.ncols + self.iy0], axis=-1)

    def in_window(self, cells):
        cells = np.asarray(cells, dtype=np.int64)
        i = cells[..., 0] - self.ix0
        j = cells[..., 1] - self.iy0
        return (i >= 0) & (j >= 0) & (i < self.ncols) & (j < self.nrows)

    def cell(self, channel_id, ix, iy):
        layer = self.layers[channel_id]
        if not self.in_window([ix, iy]):
            return FieldCell(0)
        row = int(layer.lookup(self.key_of([ix, iy])))
        if row < 0:
            return FieldCell(0)
        return FieldCell(int(layer.density[row]), tuple(float(v) for v in layer.direction[row]))

    def query(self, channel_id, cells):
        """Density and direction for an array of cells; unstored cells have density 0."""
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
        layer = self.layers[channel_id]
        density = np.zeros(len(cells), dtype=np.int64)
        direction = np.zeros((len(cells), 2))
        inside = self.in_window(cells)
        rows = np.full(len(cells), -1)
        if inside.any():
            rows[inside] = layer.lookup(self.key_of(cells[inside]))
        hit = rows >= 0
        density[hit] = layer.density[rows[hit]]
        direction[hit] = layer.direction[rows[hit]]
        return density, direction

    def query_points(self, channel_id, points):
        return self.query(channel_id, self.frame.cell_of(np.asarray(points).reshape(-1, 2)))

    def layer_cells(self, channel_id):
        layer = self.layers[channel_id]
        return self.cell_of_key(layer.keys).reshape(-1, 2), layer.density, layer.direction

    def dense(self, channel_id):
        """Dense (ncols, nrows) density and (ncols, nrows, 2) direction arrays of a channel."""
        layer = self.layers[channel_id]
        density = np.zeros((self.ncols, self.nrows), dtype=np.int64)
        direction = np.zeros((self.ncols, self.nrows, 2))
        cells = self.cell_of_key(layer.keys).reshape(-1, 2)
        i = cells[:, 0] - self.ix0
        j = cells[:, 1] - self.iy0
        density[i, j] = layer.density
        direction[i, j] = layer.direction
        return density, direction

    def equals(self, other, atol=1e-12):
        if (self.frame != other.frame or self.window != other.window or
                self.channel_ids != other.channel_ids):
            return False
        for cid in self.channel_ids:
            mine, theirs = self.layers[cid], other.layers[cid]
            if not (np.array_equal(mine.keys, theirs.keys) and
                    np.array_equal(mine.density, theirs.density) and
                    np.allclose(mine.direction, theirs.direction, atol=atol, rtol=0)):
                return False
        return True

    def to_records(self):
        """A header record, then one record per channel with [key, density, dx, dy] rows."""
        header = {'kind': 'header',
                  'roi': self.roi_id,
                  'origin': [self.frame.origin_x, self.frame.origin_y],
                  'resolution': self.frame.resolution,
                  'window': list(self.window),
                  'channels': [{'id': cid, 'trips': layer.trip_count, 'cells': len(layer)}
                               for cid, layer in self.layers.items()]}
        records = [header]
        for cid, layer in self.layers.items():
            rows = [[int(k), int(d), float(v[0]), float(v[1])]
                    for k, d, v in zip(layer.keys, layer.density, layer.direction)]
            records.append({'kind': 'channel', 'channel': cid, 'cells': rows})
        return records

    @staticmethod
    def from_records(records):
        records = list(records)
        if not records or records[0].get('kind') != 'header':
            raise MalformedRecord('field file must start with a header record')
        header = records[0]
        frame = GridFrame(header['resolution'], *header['origin'])
        trips = {entry['id']: entry['trips'] for entry in header['channels']}
        layers = []
        for record in records[1:]:
            rows = np.array(record['cells'], dtype=float).reshape(-1, 4)
            layers.append(ChannelLayer(record['channel'], rows[:, 0].astype(np.int64),
                                       rows[:, 1].astype(np.int64), rows[:, 2:],
                                       trips.get(record['channel'], 0)))
        if [layer.channel_id for layer in layers] != [entry['id'] for entry in header['channels']]:
            raise MalformedRecord('field channel table does not match its channel records')
        return FlowField(frame, header['window'], layers, header.get('roi'))


def _unit_rows(vectors, fallback):
    norms = np.hypot(vectors[:, 0], vectors[:, 1])
    good = norms > DEGENERATE_NORM
    result = np.array(fallback, dtype=float)
    result[good] = vectors[good] / norms[good][:, None]
    return result


def _unique_cells(cells):
    """Like np.unique(cells, axis=0) with return_index and return_inverse, on scalar keys."""
    lo = cells.min(axis=0)
    height = int(cells[:, 1].max() - lo[1]) + 1
    keys = (cells[:, 0] - lo[0]) * height + (cells[:, 1] - lo[1])
    _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    return cells[first], first, inverse.reshape(-1)


def trace_cell_headings(trace, frame):
    """Cells covered by one trace, each with the trace's mean heading over the covering samples."""
    cells, owner = trace.footprint(frame)
    if len(cells) == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros((0, 2))
    unique, first, inverse = _unique_cells(cells)
    headings = trace.headings[owner]
    summed = np.stack([np.bincount(inverse, weights=headings[:, 0], minlength=len(unique)),
                       np.bincount(inverse, weights=headings[:, 1], minlength=len(unique))], axis=1)
    return unique, _unit_rows(summed, headings[first])


def _aggregate_channel(per_trace):
    """Combines per-trace (cells, headings) into unique cells with density and mean direction."""
    cells = np.concatenate([c for c, _ in per_trace]) if per_trace else np.zeros((0, 2))
    if len(cells) == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros((0, 2))
    headings = np.concatenate([h for _, h in per_trace])
    unique, first, inverse = _unique_cells(cells)
    density = np.bincount(inverse, minlength=len(unique))
    summed = np.stack([np.bincount(inverse, weights=headings[:, 0], minlength=len(unique)),
                       np.bincount(inverse, weights=headings[:, 1], minlength=len(unique))], axis=1)
    return unique, density, _unit_rows(summed, headings[first])


def synthesize_field(partition, traces, resolution=0.2, origin=(0.0, 0.0), roi_id=None):
    frame = GridFrame(resolution, origin[0], origin[1])
    aggregated = []
    for channel in partition:
        members = [traces[vid] for vid in channel.trace_ids if vid in traces]
        per_trace = [trace_cell_headings(trace, frame) for trace in members]
        aggregated.append((channel.channel_id, len(members), _aggregate_channel(per_trace)))
    covered = [cells for _, _, (cells, _, _) in aggregated if len(cells)]
    if not covered:
        logger.warning('flow field is empty')
        return FlowField.empty(frame, [cid for cid, _, _ in aggregated], roi_id)
    everything = np.concatenate(covered)
    lo = everything.min(axis=0)
    hi = everything.max(axis=0)
    result = FlowField(frame, (lo[0], lo[1], hi[0] - lo[0] + 1, hi[1] - lo[1] + 1), [], roi_id)
    for cid, trips, (cells, density, direction) in aggregated:
        keys = result.key_of(cells) if len(cells) else np.zeros(0, dtype=np.int64)
        order = np.argsort(keys, kind='stable')
        result.layers[cid] = ChannelLayer(cid, keys[order], density[order], direction[order], trips)
    logger.info('field: %d channels, %d stored cells, %d trips',
                len(result.layers), result.stored_cells, result.trip_count)
    return result


@dataclass(frozen=True)
class FieldSettings:
    resolution: float = 0.2
    capacity: int = 400
    entry_gap: float = 1.75
    low_confidence_support: int = 3


class RoiFlowStore:
    """
    A bounded FIFO of filtered traces for one ROI together with the refined ROI,
    partition and field rebuilt from exactly the queued traces.
    """

    def __init__(self, roi, settings=FieldSettings(), traces=None):
        self.roi = roi
        self.settings = settings
        self.traces = traces if traces is not None else TraceSet()
        if len(self.traces) > settings.capacity:
            self.traces = self.traces.subset(self.traces.ids[-settings.capacity:])
        frame = GridFrame(settings.resolution)
        if len(self.traces) == 0:
            self.refined_roi = roi
            self.partition = ChannelPartition([])
            self.field = FlowField.empty(frame, roi_id=roi.roi_id)
        else:
            self.refined_roi, self.partition = preprocess(
                self.traces, roi, settings.entry_gap, settings.low_confidence_support)
            self.field = synthesize_field(self.partition, self.traces, settings.resolution,
                                          roi_id=roi.roi_id)

    @property
    def queue(self):
        return self.traces.ids

    @property
    def capacity(self):
        return self.settings.capacity

    def __len__(self):
        return len(self.traces)


def update_fifo(store, new_traces):
    """Appends new traces (a re-sent id moves to the back), evicts the oldest beyond capacity."""
    merged = store.traces.merged(new_traces)
    evicted = max(0, len(merged) - store.capacity)
    if evicted:
        logger.info('roi %s: evicting %d oldest traces', store.roi.roi_id, evicted)
    queued = merged.subset(merged.ids[evicted:])
    return RoiFlowStore(store.roi, store.settings, queued)


class RoiRegistry:
    """One flow store per ROI id, looked up by id or by a point inside the ROI."""

    def __init__(self, settings=FieldSettings()):
        self.settings = settings
        self.stores = OrderedDict()

    def register(self, roi):
        if roi.roi_id not in self.stores:
            self.stores[roi.roi_id] = RoiFlowStore(roi, self.settings)
        return self.stores[roi.roi_id]

    def __getitem__(self, roi_id):
        return self.stores[roi_id]

    def __len__(self):
        return len(self.stores)

    def locate(self, point):
        """Id of the first registered ROI (in id order) containing the point, or None."""
        for roi_id in sorted(self.stores):
            if self.stores[roi_id].roi.polygon.contains(point)[0]:
                return roi_id
        return None

    def update(self, roi_id, traces):
        self.stores[roi_id] = update_fifo(self.stores[roi_id], traces)
        return self.stores[roi_id]

    def update_all(self, traces, filter_cfg):
        """Filters the traces against every registered ROI and feeds each store its kept set."""
        for roi_id in list(self.stores):
            kept = filter_traces(traces, self.stores[roi_id].roi, filter_cfg).kept
            if len(kept):
                self.update(roi_id, kept)
        return self


@dataclass(frozen=True)
class ChangeConfig:
    support: int = 3
    distance: float = 1.5
    angle_deg: float = 30.0
    trigger: float = 0.2
    sample_step: float = 0.1


@dataclass
class ChangeReport:
    divergence_score: float
    triggered: bool
    considered_cells: int
    mismatched_cells: int
    channels: dict = field(default_factory=dict)

    def to_record(self):
        return {'divergence_score': self.divergence_score,
                'triggered': self.triggered,
                'considered_cells': self.considered_cells,
                'mismatched_cells': self.mismatched_cells,
                'channels': self.channels}


def _reference_samples(references, step):
    points, tangents = [], []
    for reference in references:
        stations = np.append(np.arange(0.0, reference.length, step), reference.length)
        points.append(reference.point_at(stations))
        tangents.append(reference.tangent_at(stations))
    return np.concatenate(points), np.concatenate(tangents)


def detect_change(field, references, cfg=ChangeConfig()):
    """
    Density-weighted fraction of well-supported cells that no reference explains.

    A cell is explained when a reference sample lies within `distance` of its center
    and the reference direction there is within `angle_deg` of the cell direction.
    """
    references = [r if isinstance(r, Polyline) else Polyline(r) for r in references]
    tree = None
    if references:
        ref_points, ref_tangents = _reference_samples(references, cfg.sample_step)
        tree = cKDTree(ref_points)
    min_cos = math.cos(math.radians(cfg.angle_deg))
    total_weight = 0.0
    mismatch_weight = 0.0
    considered = mismatched = 0
    channels = {}
    for cid in field.channel_ids:
        cells, density, direction = field.layer_cells(cid)
        supported = density >= cfg.support
        if not supported.any():
            continue
        centers = field.frame.cell_centers(cells[supported])
        weights = density[supported].astype(float)
        matched = np.zeros(len(centers), dtype=bool)
        if tree is not None:
            neighbours = tree.query_ball_point(centers, r=cfg.distance)
            lengths = np.array([len(n) for n in neighbours])
            if lengths.sum():
                rows = np.repeat(np.arange(len(centers)), lengths)
                cols = np.concatenate([n for n in neighbours if len(n)]).astype(np.int64)
                agree = (direction[supported][rows] * ref_tangents[cols]).sum(axis=1) >= min_cos - 1e-12
                matched[rows[agree]] = True
        off = ~matched
        total_weight += weights.sum()
        mismatch_weight += weights[off].sum()
        considered += len(centers)
        mismatched += int(off.sum())
        channels[cid] = {'cells': int(len(centers)), 'mismatched': int(off.sum()),
                         'score': float(weights[off].sum() / weights.sum())}
    if considered == 0:
        raise EmptyField('no cell reaches the support threshold of {}'.format(cfg.support))
    score = float(mismatch_weight / total_weight)
    report = ChangeReport(score, score > cfg.trigger, considered, mismatched, channels)
    logger.info('change detection: score %.3f over %d cells (%s)', score, considered,
                'triggered' if report.triggered else 'not triggered')
    return report
