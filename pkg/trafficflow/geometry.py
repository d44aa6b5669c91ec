"""
Planar primitives shared by every stage of the pipeline: poses, oriented boxes,
polylines with arc-length tables, frenet frames, polygons with indexed edges,
circular means and grid rasterization.

All coordinates are meters in one local metric frame.
"""

import math
from dataclasses import dataclass

import numpy as np
import shapely
from shapely.geometry import LineString
from shapely.geometry import Polygon as ShapelyPolygon

from trafficflow.errors import DegenerateDirection, GeometryError, OutOfCapture


DEFAULT_CAPTURE_RANGE = 15.0
DEGENERATE_NORM = 1e-9
_BOUNDARY_EPS = 1e-9
_PROJECTION_CHUNK = 4096


def normalize_angle(theta):
    """Wraps an angle (scalar or array) into (-pi, pi]."""
    wrapped = np.mod(np.asarray(theta, dtype=float) + np.pi, 2 * np.pi) - np.pi
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2 * np.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def heading_vector(theta):
    theta = np.asarray(theta, dtype=float)
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def cross2(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def circular_mean(directions):
    """
    Vector-sum circular mean of a collection of unit vectors.

    Raises DegenerateDirection when the collection is empty or the
    resultant vanishes (perfectly opposing flows).
    """
    directions = np.asarray(directions, dtype=float).reshape(-1, 2)
    if len(directions) == 0:
        raise DegenerateDirection('cannot average an empty set of directions')
    return _normalized_resultant(directions.sum(axis=0))


def weighted_circular_mean(directions, weights):
    directions = np.asarray(directions, dtype=float).reshape(-1, 2)
    weights = np.asarray(weights, dtype=float).reshape(-1)
    if len(directions) == 0:
        raise DegenerateDirection('cannot average an empty set of directions')
    return _normalized_resultant((directions * weights[:, None]).sum(axis=0))


def _normalized_resultant(resultant):
    norm = float(np.hypot(resultant[0], resultant[1]))
    if norm <= DEGENERATE_NORM:
        raise DegenerateDirection('resultant norm {:.3g} is degenerate'.format(norm))
    return resultant / norm


@dataclass(frozen=True)
class Pose2:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, 'x', float(self.x))
        object.__setattr__(self, 'y', float(self.y))
        object.__setattr__(self, 'theta', normalize_angle(self.theta))

    @property
    def position(self):
        return np.array([self.x, self.y])

    @property
    def heading(self):
        return heading_vector(self.theta)


@dataclass(frozen=True)
class OrientedBox:
    pose: Pose2
    length: float
    width: float

    def __post_init__(self):
        if not (self.width > 0 and self.length >= self.width):
            raise GeometryError('box needs length >= width > 0, got {}x{}'.format(
                self.length, self.width))

    @property
    def center(self):
        return self.pose.position

    def corners(self):
        """Corners in counterclockwise order, starting at the rear right."""
        forward = self.pose.heading * (self.length / 2)
        left = np.array([-self.pose.heading[1], self.pose.heading[0]]) * (self.width / 2)
        c = self.center
        return np.array([c - forward - left, c + forward - left,
                         c + forward + left, c - forward + left])

    def contains(self, points):
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        rel = points - self.center
        h = self.pose.heading
        u = rel @ h
        v = rel @ np.array([-h[1], h[0]])
        return ((np.abs(u) <= self.length / 2 + _BOUNDARY_EPS) &
                (np.abs(v) <= self.width / 2 + _BOUNDARY_EPS))


@dataclass(frozen=True)
class GridFrame:
    """A regular grid; cell (i, j) has its center at origin + ((i + .5) r, (j + .5) r)."""
    resolution: float = 0.2
    origin_x: float = 0.0
    origin_y: float = 0.0

    def __post_init__(self):
        if not self.resolution > 0:
            raise GeometryError('grid resolution must be positive: {}'.format(self.resolution))

    @property
    def origin(self):
        return np.array([self.origin_x, self.origin_y])

    def cell_of(self, points):
        points = np.asarray(points, dtype=float)
        return np.floor((points - self.origin) / self.resolution).astype(np.int64)

    def cell_centers(self, cells):
        cells = np.asarray(cells, dtype=float)
        return self.origin + (cells + 0.5) * self.resolution

    def rasterize_boxes(self, centers, headings, lengths, widths):
        """
        Rasterizes a batch of oriented boxes at once.

        Returns (cells, owner): an (m, 2) array of cell indices whose centers lie
        inside (or on the boundary of) a box, and for each row the index of the
        box that covers it. A cell covered by several boxes appears once per box.
        """
        centers = np.asarray(centers, dtype=float).reshape(-1, 2)
        headings = np.asarray(headings, dtype=float).reshape(-1)
        lengths = np.broadcast_to(np.asarray(lengths, dtype=float), headings.shape)
        widths = np.broadcast_to(np.asarray(widths, dtype=float), headings.shape)
        if len(centers) == 0:
            return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
        cos_h = np.cos(headings)
        sin_h = np.sin(headings)
        # each box scans only the cells around its own axis-aligned bounds
        half_x = 0.5 * (lengths * np.abs(cos_h) + widths * np.abs(sin_h))
        half_y = 0.5 * (lengths * np.abs(sin_h) + widths * np.abs(cos_h))
        nx = np.ceil(half_x / self.resolution).astype(np.int64) + 1
        ny = np.ceil(half_y / self.resolution).astype(np.int64) + 1
        counts = (2 * nx + 1) * (2 * ny + 1)
        owner = np.repeat(np.arange(len(centers)), counts)
        local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        height = 2 * ny[owner] + 1
        offsets = np.stack([local // height - nx[owner], local % height - ny[owner]], axis=1)
        candidates = self.cell_of(centers)[owner] + offsets
        rel = self.cell_centers(candidates) - centers[owner]
        u = rel[:, 0] * cos_h[owner] + rel[:, 1] * sin_h[owner]
        v = -rel[:, 0] * sin_h[owner] + rel[:, 1] * cos_h[owner]
        inside = ((np.abs(u) <= lengths[owner] / 2 + _BOUNDARY_EPS) &
                  (np.abs(v) <= widths[owner] / 2 + _BOUNDARY_EPS))
        return candidates[inside], owner[inside]


def rasterize_box(box, resolution, origin=(0.0, 0.0)):
    """Cells whose centers lie inside the box, sorted by (i, j)."""
    frame = GridFrame(resolution, origin[0], origin[1])
    cells, _ = frame.rasterize_boxes(box.center, box.pose.theta, box.length, box.width)
    order = np.lexsort((cells[:, 1], cells[:, 0]))
    return cells[order]


class Polyline:

    def __init__(self, points):
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        if len(points) == 0:
            raise GeometryError('a polyline needs at least 2 distinct points')
        kept = [points[0]]
        for point in points[1:]:
            if np.hypot(*(point - kept[-1])) > 1e-9:
                kept.append(point)
        if len(kept) < 2:
            raise GeometryError('a polyline needs at least 2 distinct points')
        self.points = np.array(kept)
        self.points.flags.writeable = False
        self.segments = np.diff(self.points, axis=0)
        self.segment_lengths = np.hypot(self.segments[:, 0], self.segments[:, 1])
        self.arclength = np.concatenate([[0.0], np.cumsum(self.segment_lengths)])
        self.arclength.flags.writeable = False

    def __len__(self):
        return len(self.points)

    def __repr__(self):
        return 'Polyline({} points, {:.2f} m)'.format(len(self.points), self.length)

    @property
    def length(self):
        return float(self.arclength[-1])

    @property
    def start(self):
        return self.points[0]

    @property
    def end(self):
        return self.points[-1]

    def _segment_index(self, s):
        idx = np.searchsorted(self.arclength, s, side='right') - 1
        return np.clip(idx, 0, len(self.segments) - 1)

    def point_at(self, s):
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        idx = self._segment_index(s)
        t = (s - self.arclength[idx]) / self.segment_lengths[idx]
        return self.points[idx] + t[..., None] * self.segments[idx]

    def tangent_at(self, s):
        idx = self._segment_index(np.clip(np.asarray(s, dtype=float), 0.0, self.length))
        return self.segments[idx] / self.segment_lengths[idx][..., None]

    def normal_at(self, s):
        tangent = self.tangent_at(s)
        return np.stack([-tangent[..., 1], tangent[..., 0]], axis=-1)

    def heading_at(self, s):
        tangent = self.tangent_at(s)
        return np.arctan2(tangent[..., 1], tangent[..., 0])

    def resample(self, spacing):
        """Equally spaced points (spacing at most `spacing`), both endpoints included."""
        count = max(1, int(math.ceil(self.length / spacing - 1e-9)))
        return self.point_at(np.linspace(0.0, self.length, count + 1))

    def sample_stations(self, step):
        """Arc lengths 0, step, 2 step, ... plus the end when it is not already a multiple."""
        count = int(math.floor(self.length / step + 1e-9))
        stations = [k * step for k in range(count + 1)]
        if self.length - stations[-1] > 1e-6:
            stations.append(self.length)
        return np.array(stations)

    def closest(self, points):
        """
        Projects points onto the polyline.

        Returns (s, d, distance, beyond): arc length of the nearest point, signed
        lateral offset (positive to the left of travel), distance, and whether the
        nearest point is an endpoint approached from outside the polyline's span.
        Ties between segments resolve to the smaller arc length.
        """
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        results = [self._closest_chunk(points[i:i + _PROJECTION_CHUNK])
                   for i in range(0, len(points), _PROJECTION_CHUNK)]
        if not results:
            empty = np.zeros(0)
            return empty, empty, empty, np.zeros(0, dtype=bool)
        return tuple(np.concatenate(parts) for parts in zip(*results))

    def _closest_chunk(self, points):
        starts = self.points[:-1]
        seg = self.segments
        rel = points[:, None, :] - starts[None, :, :]
        raw_t = (rel * seg[None]).sum(axis=-1) / (self.segment_lengths ** 2)[None]
        t = np.clip(raw_t, 0.0, 1.0)
        foot = starts[None] + t[..., None] * seg[None]
        dist_sq = ((points[:, None, :] - foot) ** 2).sum(axis=-1)
        best = np.argmin(dist_sq, axis=1)
        rows = np.arange(len(points))
        best_t = t[rows, best]
        s = self.arclength[best] + best_t * self.segment_lengths[best]
        dist = np.sqrt(dist_sq[rows, best])
        side = cross2(seg[best], points - foot[rows, best])
        d = np.where(side < 0, -dist, dist)
        beyond = (((best == 0) & (raw_t[rows, best] < 0)) |
                  ((best == len(seg) - 1) & (raw_t[rows, best] > 1)))
        return s, d, dist, beyond

    def distance_to(self, points):
        return self.closest(points)[2]

    def between(self, s0, s1):
        """The part of the polyline between two arc lengths (clamped to the polyline)."""
        s0 = max(0.0, float(s0))
        s1 = min(self.length, float(s1))
        if s1 <= s0:
            raise GeometryError('empty arc-length interval [{}, {}]'.format(s0, s1))
        inner = (self.arclength > s0) & (self.arclength < s1)
        return Polyline(np.concatenate([self.point_at(np.array([s0])), self.points[inner],
                                        self.point_at(np.array([s1]))]))

    def offset(self, offsets):
        """Moves every vertex sideways along the averaged left normal by its offset."""
        points = self.points
        tangents = np.empty_like(points)
        tangents[1:-1] = points[2:] - points[:-2]
        tangents[0] = points[1] - points[0]
        tangents[-1] = points[-1] - points[-2]
        tangents /= np.hypot(tangents[:, 0], tangents[:, 1])[:, None]
        normals = np.stack([-tangents[:, 1], tangents[:, 0]], axis=1)
        return Polyline(points + np.asarray(offsets, dtype=float).reshape(-1, 1) * normals)

    def translated(self, shift):
        return Polyline(self.points + np.asarray(shift, dtype=float))

    def reversed(self):
        return Polyline(self.points[::-1])

    def to_list(self):
        return [[float(x), float(y)] for x, y in self.points]


class FrenetFrame:
    """
    Curvilinear (s, d) coordinates attached to a reference polyline.

    References whose capture regions could overlap themselves (self-intersecting
    polylines) are rejected.
    """

    def __init__(self, reference, capture_range=DEFAULT_CAPTURE_RANGE):
        if not isinstance(reference, Polyline):
            reference = Polyline(reference)
        if not LineString(reference.points).is_simple:
            raise GeometryError('frenet reference must not intersect itself')
        self.reference = reference
        self.capture_range = capture_range

    @property
    def length(self):
        return self.reference.length

    def project(self, point):
        s, d, dist, _ = self.reference.closest(np.asarray(point, dtype=float).reshape(1, 2))
        if dist[0] > self.capture_range:
            raise OutOfCapture('point {} is {:.2f} m from the reference (capture {:.2f} m)'.format(
                tuple(np.round(point, 3)), dist[0], self.capture_range))
        return float(s[0]), float(d[0])

    def project_many(self, points):
        """Returns (s, d, captured) where captured excludes points past either end."""
        s, d, dist, beyond = self.reference.closest(points)
        return s, d, (dist <= self.capture_range) & ~beyond

    def to_cartesian(self, s, d):
        s = np.asarray(s, dtype=float)
        d = np.asarray(d, dtype=float)
        return self.reference.point_at(s) + d[..., None] * self.reference.normal_at(s)

    def tangent_at(self, s):
        return self.reference.tangent_at(s)


class Polygon:
    """A simple polygon, stored counterclockwise; edge i runs from vertex i to vertex i + 1."""

    def __init__(self, vertices):
        vertices = np.array(vertices, dtype=float).reshape(-1, 2)
        if len(vertices) > 3 and np.allclose(vertices[0], vertices[-1]):
            vertices = vertices[:-1]
        if len(vertices) < 3:
            raise GeometryError('a polygon needs at least 3 vertices')
        shape = ShapelyPolygon(vertices)
        if not shape.is_valid or shape.area <= 0:
            raise GeometryError('polygon is not simple')
        if not shape.exterior.is_ccw:
            vertices = vertices[::-1]
            shape = ShapelyPolygon(vertices)
        self.vertices = vertices
        self.vertices.flags.writeable = False
        self.shape = shape

    @property
    def num_edges(self):
        return len(self.vertices)

    def edge(self, index):
        return self.vertices[index], self.vertices[(index + 1) % len(self.vertices)]

    def edge_arrays(self):
        return self.vertices, np.roll(self.vertices, -1, axis=0)

    def contains(self, points):
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        return shapely.contains_xy(self.shape, points[:, 0], points[:, 1])

    def boundary_distance(self, points):
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        return shapely.distance(self.shape.exterior, shapely.points(points))

    @property
    def area(self):
        return self.shape.area

    @property
    def bounds(self):
        return self.shape.bounds

    def to_list(self):
        return [[float(x), float(y)] for x, y in self.vertices]


def polygon_edge_crossing(polygon, segment):
    """
    First polygon edge crossed by a directed segment, in travel order.

    Returns (edge index, crossing point) or None. Parallel overlaps are not
    crossings; simultaneous hits (at a vertex) go to the lower edge index.
    """
    p = np.asarray(segment[0], dtype=float)
    r = np.asarray(segment[1], dtype=float) - p
    starts, ends = polygon.edge_arrays()
    e = ends - starts
    denom = cross2(r[None, :], e)
    ap = starts - p
    with np.errstate(divide='ignore', invalid='ignore'):
        t = cross2(ap, e) / denom
        u = cross2(ap, r[None, :]) / denom
    tol = 1e-12
    valid = ((np.abs(denom) > 1e-12) & (t >= -tol) & (t <= 1 + tol) &
             (u >= -tol) & (u <= 1 + tol))
    if not valid.any():
        return None
    candidates = np.flatnonzero(valid)
    best = candidates[np.argmin(t[candidates])]
    return int(best), p + t[best] * r


class RoiSpec:
    """
    A region of interest: the polygon plus one (possibly refined) segment per edge.

    Refined edges keep their index, midpoint and length but may be rotated; edge
    directions keep the polygon's counterclockwise sense, so the left normal of
    every edge points into the region.
    """

    def __init__(self, polygon, roi_id='roi', edges=None, refined=None):
        if not isinstance(polygon, Polygon):
            polygon = Polygon(polygon)
        self.polygon = polygon
        self.roi_id = roi_id
        if edges is None:
            starts, ends = polygon.edge_arrays()
            edges = np.stack([starts, ends], axis=1)
        self.edges = np.asarray(edges, dtype=float).reshape(-1, 2, 2)
        if len(self.edges) != polygon.num_edges:
            raise GeometryError('expected {} edges, got {}'.format(polygon.num_edges,
                                                                   len(self.edges)))
        if refined is None:
            refined = [False] * len(self.edges)
        self.refined = tuple(bool(flag) for flag in refined)

    @property
    def num_edges(self):
        return len(self.edges)

    def edge(self, index):
        return self.edges[index][0], self.edges[index][1]

    def edge_midpoint(self, index):
        return self.edges[index].mean(axis=0)

    def edge_length(self, index):
        a, b = self.edge(index)
        return float(np.hypot(*(b - a)))

    def edge_direction(self, index):
        a, b = self.edge(index)
        return (b - a) / np.hypot(*(b - a))

    def inward_normal(self, index):
        direction = self.edge_direction(index)
        return np.array([-direction[1], direction[0]])

    def outward_normal(self, index):
        return -self.inward_normal(index)

    def edge_offset(self, index, points):
        points = np.asarray(points, dtype=float)
        return (points - self.edge_midpoint(index)) @ self.edge_direction(index)

    def point_on_edge(self, index, offset):
        return self.edge_midpoint(index) + offset * self.edge_direction(index)

    def with_edges(self, edges, refined):
        return RoiSpec(self.polygon, self.roi_id, edges, refined)

    def to_record(self):
        return {'id': self.roi_id,
                'vertices': self.polygon.to_list(),
                'edges': [[[float(v) for v in p] for p in edge] for edge in self.edges],
                'refined': list(self.refined)}

    @staticmethod
    def from_record(record):
        return RoiSpec(Polygon(record['vertices']),
                       record.get('id', 'roi'),
                       record.get('edges'),
                       record.get('refined'))
