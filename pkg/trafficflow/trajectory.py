import logging
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import shapely

from trafficflow.errors import ConfigError, GeometryError, MalformedRecord
from trafficflow.geometry import (GridFrame, OrientedBox, Polygon, Pose2,
                                  normalize_angle, polygon_edge_crossing)


logger = logging.getLogger(__name__)

LOG_FIELDS = ('t', 'id', 'x', 'y', 'theta', 'l', 'w')


class Trace:
    """
    One tracked vehicle: strictly increasing timestamps, each with an oriented box.

    Samples are stored column-wise; `samples` rebuilds the (timestamp, box) view.
    """

    def __init__(self, vehicle_id, timestamps, x, y, theta, length, width):
        self.vehicle_id = str(vehicle_id)
        self.timestamps = np.array(timestamps, dtype=float)
        n = len(self.timestamps)
        self.x = np.array(x, dtype=float).reshape(n)
        self.y = np.array(y, dtype=float).reshape(n)
        self.theta = normalize_angle(np.asarray(theta, dtype=float).reshape(n))
        self.length = np.broadcast_to(np.asarray(length, dtype=float), (n,)).copy()
        self.width = np.broadcast_to(np.asarray(width, dtype=float), (n,)).copy()
        if n < 2:
            raise MalformedRecord('trace {} has fewer than 2 samples'.format(self.vehicle_id))
        if np.any(np.diff(self.timestamps) <= 0):
            raise MalformedRecord('timestamps of {} are not strictly increasing'.format(
                self.vehicle_id))
        if np.any(self.width <= 0) or np.any(self.length < self.width):
            raise MalformedRecord('trace {} has a box with length < width or width <= 0'.format(
                self.vehicle_id))
        for values in (self.timestamps, self.x, self.y, self.theta, self.length, self.width):
            values.flags.writeable = False

    def __len__(self):
        return len(self.timestamps)

    def __repr__(self):
        return 'Trace({}, {} samples)'.format(self.vehicle_id, len(self))

    @property
    def centers(self):
        return np.stack([self.x, self.y], axis=1)

    @property
    def headings(self):
        return np.stack([np.cos(self.theta), np.sin(self.theta)], axis=1)

    @property
    def lifetime(self):
        return float(self.timestamps[-1] - self.timestamps[0])

    @property
    def travel_distance(self):
        steps = np.diff(self.centers, axis=0)
        return float(np.hypot(steps[:, 0], steps[:, 1]).sum())

    def box(self, index):
        return OrientedBox(Pose2(self.x[index], self.y[index], self.theta[index]),
                           self.length[index], self.width[index])

    @property
    def samples(self):
        return [(float(t), self.box(i)) for i, t in enumerate(self.timestamps)]

    def footprint(self, frame):
        """Grid cells covered by any sample's box, with the index of the covering sample."""
        return frame.rasterize_boxes(self.centers, self.theta, self.length, self.width)

    def to_record(self):
        return {'id': self.vehicle_id,
                't': self.timestamps.tolist(),
                'x': self.x.tolist(),
                'y': self.y.tolist(),
                'theta': self.theta.tolist(),
                'l': self.length.tolist(),
                'w': self.width.tolist()}

    @staticmethod
    def from_record(record):
        try:
            return Trace(record['id'], record['t'], record['x'], record['y'],
                         record['theta'], record['l'], record['w'])
        except KeyError as err:
            raise MalformedRecord('trace record missing field {}'.format(err))


@dataclass(frozen=True)
class TraceMeta:
    entry_edge: int
    exit_edge: int
    start_point: tuple
    end_point: tuple
    entry_direction: tuple
    exit_direction: tuple

    @property
    def u_turn(self):
        return self.entry_edge == self.exit_edge

    def to_record(self):
        return {'entry_edge': self.entry_edge,
                'exit_edge': self.exit_edge,
                'start_point': list(self.start_point),
                'end_point': list(self.end_point),
                'entry_direction': list(self.entry_direction),
                'exit_direction': list(self.exit_direction),
                'u_turn': self.u_turn}

    @staticmethod
    def from_record(record):
        return TraceMeta(int(record['entry_edge']), int(record['exit_edge']),
                         tuple(record['start_point']), tuple(record['end_point']),
                         tuple(record['entry_direction']), tuple(record['exit_direction']))


class TraceSet:
    """An ordered collection of traces with unique vehicle ids, each with optional meta."""

    def __init__(self, traces=(), metas=None):
        self._traces = OrderedDict()
        self._metas = {}
        metas = metas or {}
        for trace in traces:
            if trace.vehicle_id in self._traces:
                raise MalformedRecord('duplicate vehicle id: {}'.format(trace.vehicle_id))
            self._traces[trace.vehicle_id] = trace
            if trace.vehicle_id in metas:
                self._metas[trace.vehicle_id] = metas[trace.vehicle_id]

    def __len__(self):
        return len(self._traces)

    def __iter__(self):
        return iter(self._traces.values())

    def __contains__(self, vehicle_id):
        return vehicle_id in self._traces

    def __getitem__(self, vehicle_id):
        return self._traces[vehicle_id]

    @property
    def ids(self):
        return list(self._traces.keys())

    def meta(self, vehicle_id):
        return self._metas.get(vehicle_id)

    def items(self):
        return [(trace, self._metas.get(vid)) for vid, trace in self._traces.items()]

    def subset(self, vehicle_ids):
        wanted = set(vehicle_ids)
        return TraceSet([t for t in self if t.vehicle_id in wanted], self._metas)

    def with_meta(self, metas):
        merged = dict(self._metas)
        merged.update(metas)
        return TraceSet(list(self), merged)

    def merged(self, other):
        """Traces of self followed by the traces of other; ids in both keep other's version."""
        mine = [t for t in self if t.vehicle_id not in other]
        metas = dict(self._metas)
        metas.update(other._metas)
        return TraceSet(mine + list(other), metas)

    def to_records(self):
        records = []
        for trace, meta in self.items():
            record = trace.to_record()
            record['meta'] = None if meta is None else meta.to_record()
            records.append(record)
        return records

    @staticmethod
    def from_records(records):
        traces = []
        metas = {}
        for record in records:
            trace = Trace.from_record(record)
            traces.append(trace)
            if record.get('meta') is not None:
                metas[trace.vehicle_id] = TraceMeta.from_record(record['meta'])
        return TraceSet(traces, metas)


def assemble_traces(log):
    """
    Groups log records ({"t", "id", "x", "y", "theta", "l", "w"}) into one trace per id.

    Records of one id must already be in time order. Ids seen only once are skipped.
    Traces come out sorted by vehicle id.
    """
    columns = {}
    for line_no, record in enumerate(log):
        missing = [key for key in LOG_FIELDS if key not in record]
        if missing:
            raise MalformedRecord('log record {} is missing {}'.format(line_no, ', '.join(missing)))
        vid = str(record['id'])
        rows = columns.setdefault(vid, [])
        if rows and record['t'] <= rows[-1][0]:
            raise MalformedRecord('non-monotone timestamp {} for id {}'.format(record['t'], vid))
        rows.append(tuple(float(record[key]) for key in ('t', 'x', 'y', 'theta', 'l', 'w')))
    traces = []
    for vid in sorted(columns):
        rows = np.array(columns[vid])
        if len(rows) < 2:
            logger.warning('skipping id %s: single sample', vid)
            continue
        traces.append(Trace(vid, *rows.T))
    logger.info('assembled %d traces from %d ids', len(traces), len(columns))
    return TraceSet(traces)


def to_log_records(traces):
    """Flattens traces back into log records, ordered by (t, id)."""
    records = []
    for trace in traces:
        for i in range(len(trace)):
            records.append({'t': float(trace.timestamps[i]), 'id': trace.vehicle_id,
                            'x': float(trace.x[i]), 'y': float(trace.y[i]),
                            'theta': float(trace.theta[i]),
                            'l': float(trace.length[i]), 'w': float(trace.width[i])})
    records.sort(key=lambda r: (r['t'], r['id']))
    return records


class OccupancyGrid:
    """Boolean occupancy over a window of a grid frame; cells outside the window are free."""

    def __init__(self, frame, ix0, iy0, mask):
        self.frame = frame
        self.ix0 = int(ix0)
        self.iy0 = int(iy0)
        self.mask = np.asarray(mask, dtype=bool)

    @staticmethod
    def empty(frame):
        return OccupancyGrid(frame, 0, 0, np.zeros((0, 0), dtype=bool))

    @property
    def resolution(self):
        return self.frame.resolution

    @property
    def count(self):
        return int(self.mask.sum())

    def is_occupied(self, cells):
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
        i = cells[:, 0] - self.ix0
        j = cells[:, 1] - self.iy0
        inside = (i >= 0) & (j >= 0) & (i < self.mask.shape[0]) & (j < self.mask.shape[1])
        result = np.zeros(len(cells), dtype=bool)
        result[inside] = self.mask[i[inside], j[inside]]
        return result

    def occupied_cells(self):
        i, j = np.nonzero(self.mask)
        return np.stack([i + self.ix0, j + self.iy0], axis=1)

    def to_record(self):
        return {'resolution': self.frame.resolution,
                'origin': [self.frame.origin_x, self.frame.origin_y],
                'cells': self.occupied_cells().tolist()}


def build_obstacle_grid(obstacles, resolution=0.2, inflation=0.9, origin=(0.0, 0.0)):
    """Marks every cell whose center lies within `inflation` of an obstacle polygon."""
    if inflation < 0:
        raise ConfigError('obstacle inflation must be non-negative: {}'.format(inflation))
    frame = GridFrame(resolution, origin[0], origin[1])
    shapes = [(ob if isinstance(ob, Polygon) else Polygon(ob)).shape for ob in obstacles]
    if not shapes:
        return OccupancyGrid.empty(frame)
    union = shapely.union_all(shapes)
    xmin, ymin, xmax, ymax = union.bounds
    margin = inflation + resolution
    lo = frame.cell_of([xmin - margin, ymin - margin])
    hi = frame.cell_of([xmax + margin, ymax + margin])
    ix = np.arange(lo[0], hi[0] + 1)
    iy = np.arange(lo[1], hi[1] + 1)
    grid_i, grid_j = np.meshgrid(ix, iy, indexing='ij')
    centers = frame.cell_centers(np.stack([grid_i.ravel(), grid_j.ravel()], axis=1))
    distances = shapely.distance(union, shapely.points(centers))
    mask = (distances <= inflation + 1e-12).reshape(grid_i.shape)
    grid = OccupancyGrid(frame, lo[0], lo[1], mask)
    logger.info('obstacle grid: %d occupied cells from %d polygons', grid.count, len(shapes))
    return grid


class RejectReason(Enum):
    ShortLifetime = 'ShortLifetime'
    ShortTravel = 'ShortTravel'
    AbnormalDrift = 'AbnormalDrift'
    ObstacleCollision = 'ObstacleCollision'
    NoClearCrossing = 'NoClearCrossing'


@dataclass
class FilterConfig:
    min_lifetime: float = 4.0
    min_travel: float = 10.0
    max_heading_rate: float = 1.2
    heading_window: float = 0.5
    min_penetration: float = 2.0
    obstacle_grid: OccupancyGrid = None

    def __post_init__(self):
        for name in ('min_lifetime', 'min_travel', 'max_heading_rate',
                     'heading_window', 'min_penetration'):
            if not getattr(self, name) > 0:
                raise ConfigError('filter threshold {} must be positive: {}'.format(
                    name, getattr(self, name)))


@dataclass
class FilterResult:
    kept: TraceSet
    rejected: list = field(default_factory=list)
    reason_counts: dict = field(default_factory=dict)

    def rejection_records(self):
        return [{'id': vid, 'reason': reason.value} for vid, reason in self.rejected]


def max_heading_rate(trace, window=0.5):
    """
    Largest heading change rate, measured from each sample to the first sample at
    least `window` seconds later. Traces shorter than the window use consecutive samples.
    """
    t = trace.timestamps
    later = np.searchsorted(t, t + window - 1e-9, side='left')
    valid = later < len(t)
    if not valid.any():
        start = np.arange(len(t) - 1)
        later = start + 1
    else:
        start = np.flatnonzero(valid)
        later = later[valid]
    dtheta = np.abs(normalize_angle(trace.theta[later] - trace.theta[start]))
    return float(np.max(dtheta / (t[later] - t[start])))


def collides(trace, grid):
    if grid is None or grid.count == 0:
        return False
    cells, _ = trace.footprint(grid.frame)
    return bool(grid.is_occupied(cells).any())


def boundary_crossings(trace, roi, min_penetration=2.0):
    """
    Entry/exit meta of a trace that starts and ends outside the ROI and crosses its
    boundary exactly once inward and once outward, or None.
    """
    polygon = roi.polygon
    centers = trace.centers
    inside = polygon.contains(centers)
    if inside[0] or inside[-1]:
        return None
    steps = np.diff(inside.astype(np.int8))
    inward = np.flatnonzero(steps == 1)
    outward = np.flatnonzero(steps == -1)
    if len(inward) != 1 or len(outward) != 1 or inward[0] >= outward[0]:
        return None
    depth = polygon.boundary_distance(centers[inside])
    if depth.max() < min_penetration:
        return None
    i, k = inward[0], outward[0]
    entry_edge, start_point = _crossing(polygon, centers[i], centers[i + 1])
    exit_edge, end_point = _crossing(polygon, centers[k], centers[k + 1])
    return TraceMeta(entry_edge, exit_edge,
                     tuple(float(v) for v in start_point), tuple(float(v) for v in end_point),
                     _direction(centers[i], centers[i + 1]), _direction(centers[k], centers[k + 1]))


def _crossing(polygon, a, b):
    hit = polygon_edge_crossing(polygon, (a, b))
    if hit is not None:
        return hit
    # numerically grazing: fall back to the edge nearest the segment midpoint
    mid = (a + b) / 2
    starts, ends = polygon.edge_arrays()
    seg = ends - starts
    t = np.clip(((mid - starts) * seg).sum(axis=1) / (seg ** 2).sum(axis=1), 0, 1)
    feet = starts + t[:, None] * seg
    nearest = int(np.argmin(np.hypot(*(feet - mid).T)))
    return nearest, feet[nearest]


def _direction(a, b):
    vec = b - a
    vec = vec / np.hypot(vec[0], vec[1])
    return (float(vec[0]), float(vec[1]))


def evaluate_trace(trace, roi, cfg):
    """Returns (reason, meta): the first failed criterion (or None) and the crossing meta."""
    if trace.lifetime < cfg.min_lifetime:
        return RejectReason.ShortLifetime, None
    if trace.travel_distance < cfg.min_travel:
        return RejectReason.ShortTravel, None
    if max_heading_rate(trace, cfg.heading_window) > cfg.max_heading_rate:
        return RejectReason.AbnormalDrift, None
    if collides(trace, cfg.obstacle_grid):
        return RejectReason.ObstacleCollision, None
    try:
        meta = boundary_crossings(trace, roi, cfg.min_penetration)
    except GeometryError:
        meta = None
    if meta is None:
        return RejectReason.NoClearCrossing, None
    return None, meta


def filter_traces(traces, roi, cfg):
    kept = []
    metas = {}
    rejected = []
    for trace in traces:
        reason, meta = evaluate_trace(trace, roi, cfg)
        if reason is None:
            kept.append(trace)
            metas[trace.vehicle_id] = meta
        else:
            logger.debug('rejected %s: %s', trace.vehicle_id, reason.value)
            rejected.append((trace.vehicle_id, reason))
    counts = Counter(reason.value for _, reason in rejected)
    logger.info('filter: kept %d of %d traces (%s)', len(kept), len(traces),
                ', '.join('{}={}'.format(k, counts[k]) for k in sorted(counts)) or 'no rejections')
    return FilterResult(TraceSet(kept, metas), rejected, dict(counts))
