"""
Path generation on a flow field, channel by channel:

    1. a cheapest 8-connected grid path from the entry point to the exit edge
       (the initial guess) becomes the frenet reference,
    2. stations are sampled along it and supported cells near each station are
       clustered laterally,
    3. dynamic programming over the station x cluster lattice yields ranked
       candidate paths,
    4. non-maximum suppression keeps the laterally distinct ones.
"""

import heapq
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra
from shapely.geometry import LineString

from trafficflow.errors import (ConfigError, DegenerateDirection, EmptyStation,
                                GeometryError, NoPath, TooShort, TrafficFlowError)
from trafficflow.geometry import FrenetFrame, Polyline, weighted_circular_mean
from trafficflow.grouping import gap_cluster


logger = logging.getLogger(__name__)

GOAL_MARGIN = 2.0
START_SNAP = 1.0
EDGE_SAMPLE_STEP = 0.05
_NEIGHBOURS = np.array([(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)])


@dataclass(frozen=True)
class SearchConfig:
    station_spacing: float = 3.0
    density_weight: float = 1.0
    direction_weight: float = 2.0
    nms_lateral_threshold: float = 2.0
    nms_fraction: float = 0.2
    min_cell_density: int = 1
    lateral_gap: float = 1.75
    station_band: float = 0.5
    lateral_range: float = 8.0
    jump_weight: float = 0.5
    beam_width: int = 5
    max_candidates: int = 20
    capture_range: float = 15.0

    def __post_init__(self):
        if not self.station_spacing > 0:
            raise ConfigError('station_spacing must be positive: {}'.format(self.station_spacing))
        if self.density_weight < 0 or self.direction_weight < 0:
            raise ConfigError('search weights must be non-negative')
        if self.density_weight == 0 and self.direction_weight == 0:
            raise ConfigError('density_weight and direction_weight cannot both be zero')
        if not 0 <= self.nms_fraction <= 1:
            raise ConfigError('nms_fraction must lie in [0, 1]: {}'.format(self.nms_fraction))
        if self.min_cell_density < 1:
            raise ConfigError('min_cell_density must be at least 1')
        if self.beam_width < 1 or self.max_candidates < 1:
            raise ConfigError('beam_width and max_candidates must be at least 1')

    def density_cost(self, density):
        """Bounded, decreasing in support; infinite below the minimum density."""
        density = np.asarray(density, dtype=float)
        with np.errstate(divide='ignore'):
            cost = self.density_weight / (1.0 + density)
        return np.where(density < self.min_cell_density, np.inf, cost)

    def direction_cost(self, cosine):
        return self.direction_weight * (1.0 - np.asarray(cosine, dtype=float))


@dataclass(frozen=True)
class LateralCluster:
    offset: float
    support: int
    direction: tuple
    cell_count: int


@dataclass
class StationLattice:
    frame: FrenetFrame
    stations: np.ndarray
    clusters: list

    def __len__(self):
        return len(self.stations)

    @property
    def shape(self):
        return [len(c) for c in self.clusters]


@dataclass
class CandidatePath:
    channel_id: str
    polyline: Polyline
    cost: float
    offsets: tuple
    stations: tuple

    def to_record(self):
        return {'channel': self.channel_id, 'cost': self.cost,
                'offsets': list(self.offsets), 'stations': list(self.stations),
                'vertices': self.polyline.to_list()}

    @staticmethod
    def from_record(record):
        return CandidatePath(record['channel'], Polyline(record['vertices']), float(record['cost']),
                             tuple(record['offsets']), tuple(record['stations']))


@dataclass
class ChannelSearch:
    channel_id: str
    initial_guess: Polyline
    lattice: StationLattice
    candidates: list
    kept: list = field(default_factory=list)


def _supported_cells(field, channel_id, cfg):
    cells, density, direction = field.layer_cells(channel_id)
    mask = density >= cfg.min_cell_density
    return cells[mask], density[mask], direction[mask]


def _goal_mask(centers, roi, goal_pair, entry, cfg):
    exit_edge = goal_pair.g_out
    rel = centers - roi.edge_midpoint(exit_edge)
    beyond = rel @ roi.outward_normal(exit_edge) >= 0
    along = rel @ roi.edge_direction(exit_edge)
    mask = beyond & (np.abs(along) <= roi.edge_length(exit_edge) / 2 + GOAL_MARGIN)
    if goal_pair.u_turn:
        mask &= np.abs(along - entry.lateral_offset) >= cfg.lateral_gap
    return mask


def initial_guess_search(field, channel_id, entry, roi, goal_pair, cfg=SearchConfig()):
    """
    Cheapest path over supported cells (8-connected) from the entry point to a
    supported cell beyond the exit edge, returned as a simplified polyline that
    starts exactly at the entry point.

    A step from cell u to cell v of length h costs h times the mean of the two
    cells' density and direction costs, the direction cost using the step heading.
    """
    cells, density, direction = _supported_cells(field, channel_id, cfg)
    if len(cells) == 0:
        raise NoPath('channel {} has no supported cells'.format(channel_id), channel_id)
    res = field.resolution
    centers = field.frame.cell_centers(cells)
    keys = field.key_of(cells)

    start_position = np.asarray(entry.position, dtype=float)
    gaps = np.hypot(*(centers - start_position).T)
    start = int(np.argmin(gaps))
    if gaps[start] > START_SNAP + res:
        raise NoPath('entry point of {} is {:.2f} m from supported cells'.format(
            channel_id, gaps[start]), channel_id)
    goals = np.flatnonzero(_goal_mask(centers, roi, goal_pair, entry, cfg))
    if len(goals) == 0:
        raise NoPath('channel {} has no supported cells beyond exit edge {}'.format(
            channel_id, goal_pair.g_out), channel_id)

    sources, targets, weights = [], [], []
    base = cfg.density_cost(density)
    for offset in _NEIGHBOURS:
        neighbours = cells + offset
        rows = np.full(len(cells), -1)
        inside = np.flatnonzero(field.in_window(neighbours))
        wanted = field.key_of(neighbours[inside])
        pos = np.clip(np.searchsorted(keys, wanted), 0, len(keys) - 1)
        rows[inside] = np.where(keys[pos] == wanted, pos, -1)
        u = np.flatnonzero(rows >= 0)
        v = rows[u]
        step = float(np.hypot(*offset)) * res
        heading = offset / np.hypot(*offset)
        cost_u = base[u] + cfg.direction_cost(direction[u] @ heading)
        cost_v = base[v] + cfg.direction_cost(direction[v] @ heading)
        sources.append(u)
        targets.append(v)
        weights.append(step * 0.5 * (cost_u + cost_v) + 1e-9)
    graph = csr_matrix((np.concatenate(weights), (np.concatenate(sources), np.concatenate(targets))),
                       shape=(len(cells), len(cells)))
    dist, predecessors = dijkstra(graph, directed=True, indices=start, return_predecessors=True)
    reachable = goals[np.isfinite(dist[goals])]
    if len(reachable) == 0:
        raise NoPath('no exit reachable in channel {}'.format(channel_id), channel_id)
    goal = int(reachable[np.lexsort((keys[reachable], dist[reachable]))[0]])

    node = goal
    chain = [node]
    while node != start:
        node = int(predecessors[node])
        chain.append(node)
    points = centers[chain[::-1]]
    points[0] = start_position
    if len(points) < 2:
        raise NoPath('initial guess of {} degenerates to a point'.format(channel_id), channel_id)
    simplified = LineString(points).simplify(res, preserve_topology=False)
    logger.debug('initial guess %s: %d cells, cost %.3f', channel_id, len(chain), dist[goal])
    return Polyline(np.asarray(simplified.coords))


def sample_stations(l_init, cfg=SearchConfig()):
    if l_init.length < cfg.station_spacing:
        raise TooShort('reference of {:.2f} m is shorter than the station spacing {:.2f} m'.format(
            l_init.length, cfg.station_spacing))
    return l_init.sample_stations(cfg.station_spacing)


@dataclass
class ProjectedCells:
    s: np.ndarray
    d: np.ndarray
    density: np.ndarray
    direction: np.ndarray


def project_cells(field, channel_id, frame, cfg=SearchConfig()):
    """Supported cells of a channel in frenet coordinates, restricted to the capture region."""
    cells, density, direction = _supported_cells(field, channel_id, cfg)
    s, d, captured = frame.project_many(field.frame.cell_centers(cells))
    keep = captured & (np.abs(d) <= cfg.lateral_range)
    return ProjectedCells(s[keep], d[keep], density[keep], direction[keep])


def _valley_split(offsets, weights, bin_width):
    """
    Splits one gap-cluster at density valleys: a bin whose profile (max density)
    falls below half of the highest bin on both of its sides separates two clusters.
    Returns index arrays in ascending offset order.
    """
    order = np.argsort(offsets, kind='stable')
    bins = np.floor((offsets - offsets.min()) / bin_width).astype(int)
    profile = np.zeros(bins.max() + 1)
    np.maximum.at(profile, bins, weights)
    pieces = [(0, len(profile))]
    cuts = []
    while pieces:
        lo, hi = pieces.pop()
        piece = profile[lo:hi]
        if len(piece) < 3:
            continue
        left = np.maximum.accumulate(piece)[:-2]
        right = np.maximum.accumulate(piece[::-1])[::-1][2:]
        lower = np.minimum(left, right)
        with np.errstate(divide='ignore', invalid='ignore'):
            ratio = np.where(lower > 0, piece[1:-1] / lower, np.inf)
        k = int(np.argmin(ratio))
        if ratio[k] < 0.5:
            best = lo + 1 + k
            cuts.append(best)
            pieces.append((lo, best))
            pieces.append((best + 1, hi))
    cuts.sort()
    groups = []
    ordered_bins = bins[order]
    edges = [-1] + cuts + [len(profile)]
    for a, b in zip(edges[:-1], edges[1:]):
        # the valley bin itself joins the cluster on its left
        mask = (ordered_bins > a) & (ordered_bins <= b)
        if mask.any():
            groups.append(order[mask])
    return groups


def lateral_clusters(field, channel_id, frame, station, cfg=SearchConfig(), projected=None):
    """Lateral clusters of supported cells within the band around one station."""
    if projected is None:
        projected = project_cells(field, channel_id, frame, cfg)
    band = np.abs(projected.s - station) <= cfg.station_band
    if not band.any():
        raise EmptyStation('no supported cells of {} near s={:.2f}'.format(channel_id, station))
    offsets = projected.d[band]
    weights = projected.density[band]
    directions = projected.direction[band]
    tangent = frame.tangent_at(station)
    clusters = []
    for coarse in gap_cluster(offsets, cfg.lateral_gap):
        for part in _valley_split(offsets[coarse], weights[coarse], 2 * field.resolution):
            members = coarse[part]
            w = weights[members].astype(float)
            try:
                mean_dir = weighted_circular_mean(directions[members], w)
            except DegenerateDirection:
                mean_dir = tangent
            clusters.append(LateralCluster(float(np.dot(offsets[members], w) / w.sum()),
                                           int(weights[members].max()),
                                           (float(mean_dir[0]), float(mean_dir[1])),
                                           len(members)))
    return clusters


def _entry_cluster(projected, frame, cfg):
    near = (np.abs(projected.s) <= cfg.station_band) & (np.abs(projected.d) <= cfg.lateral_gap)
    support = int(projected.density[near].max()) if near.any() else cfg.min_cell_density
    tangent = frame.tangent_at(0.0)
    return LateralCluster(0.0, support, (float(tangent[0]), float(tangent[1])), int(near.sum()))


def build_lattice(field, channel_id, l_init, cfg=SearchConfig()):
    try:
        frame = FrenetFrame(l_init, cfg.capture_range)
    except GeometryError as err:
        raise NoPath('initial guess of {} is unusable: {}'.format(channel_id, err), channel_id)
    try:
        stations = sample_stations(l_init, cfg)
    except TooShort as err:
        raise NoPath(str(err), channel_id)
    projected = project_cells(field, channel_id, frame, cfg)
    kept_stations = [0.0]
    clusters = [[_entry_cluster(projected, frame, cfg)]]
    for station in stations[1:]:
        try:
            found = lateral_clusters(field, channel_id, frame, station, cfg, projected)
        except EmptyStation as err:
            logger.warning('dropping station: %s', err)
            continue
        kept_stations.append(float(station))
        clusters.append(found)
    if len(kept_stations) < 2:
        raise NoPath('channel {} has fewer than 2 usable stations'.format(channel_id), channel_id)
    return StationLattice(frame, np.array(kept_stations), clusters)


class LatticeCosts:
    """
    Node and edge costs of a lattice. node[i][a] is the cost of cluster a at
    station i; edge[i][a, b] the cost of joining cluster a at station i to cluster
    b at station i + 1 (infinite when the joining segment leaves supported cells).
    """

    def __init__(self, lattice, field, channel_id, cfg=SearchConfig()):
        self.lattice = lattice
        frame = lattice.frame
        self.points = []
        self.node = []
        for station, clusters in zip(lattice.stations, lattice.clusters):
            offsets = np.array([c.offset for c in clusters])
            self.points.append(frame.to_cartesian(np.full(len(offsets), station), offsets))
            tangent = frame.tangent_at(station)
            support = np.array([c.support for c in clusters])
            cosine = np.array([c.direction for c in clusters]) @ tangent
            self.node.append(cfg.density_cost(support) + cfg.direction_cost(cosine))
        self.edge = []
        for i in range(len(lattice) - 1):
            self.edge.append(self._edge_costs(i, field, channel_id, cfg))

    def _edge_costs(self, i, field, channel_id, cfg):
        p = self.points[i][:, None, :]
        q = self.points[i + 1][None, :, :]
        delta = q - p
        length = np.hypot(delta[..., 0], delta[..., 1])
        steps = max(1, int(math.ceil(length.max() / EDGE_SAMPLE_STEP)))
        t = (np.arange(steps) + 0.5) / steps
        samples = p[..., None, :] + t[:, None] * delta[..., None, :]
        density, direction = field.query_points(channel_id, samples.reshape(-1, 2))
        density = density.reshape(samples.shape[:-1])
        direction = direction.reshape(samples.shape)
        with np.errstate(invalid='ignore', divide='ignore'):
            heading = delta / length[..., None]
        cosine = (direction * heading[..., None, :]).sum(axis=-1)
        per_sample = cfg.density_cost(density) + cfg.direction_cost(cosine)
        cost = (length / steps) * per_sample.sum(axis=-1)
        offsets_a = np.array([c.offset for c in self.lattice.clusters[i]])
        offsets_b = np.array([c.offset for c in self.lattice.clusters[i + 1]])
        jump = cfg.jump_weight * (offsets_b[None, :] - offsets_a[:, None]) ** 2
        return np.where(length > 0, cost, 0.0) + jump

    def chain_cost(self, chain):
        total = sum(self.node[i][c] for i, c in enumerate(chain))
        total += sum(self.edge[i][chain[i], chain[i + 1]] for i in range(len(chain) - 1))
        return float(total)

    def offsets(self, chain):
        return tuple(self.lattice.clusters[i][c].offset for i, c in enumerate(chain))


def _label_key(costs, label):
    cost, chain = label
    return (cost, costs.offsets(chain))


def dp_search(lattice, field, channel_id, cfg=SearchConfig()):
    """
    Exact dynamic programming over cluster choices, keeping the beam_width best
    labels per node. Candidates are the terminal labels plus the best complete
    chain through every node, ranked by (cost, offsets) and capped at max_candidates.
    """
    costs = LatticeCosts(lattice, field, channel_id, cfg)
    n = len(lattice)
    labels = [[[(float(costs.node[0][a]), (a,))] for a in range(len(lattice.clusters[0]))]]
    for i in range(1, n):
        layer = []
        for b in range(len(lattice.clusters[i])):
            merged = []
            for a, previous in enumerate(labels[i - 1]):
                step = costs.edge[i - 1][a, b] + costs.node[i][b]
                if not np.isfinite(step):
                    continue
                merged.extend((cost + float(step), chain + (b,)) for cost, chain in previous)
            layer.append(heapq.nsmallest(cfg.beam_width, merged,
                                         key=lambda label: _label_key(costs, label)))
        labels.append(layer)

    backward = [np.zeros(len(c)) for c in lattice.clusters]
    after = [np.full(len(c), -1) for c in lattice.clusters]
    for i in range(n - 2, -1, -1):
        through = costs.edge[i] + (costs.node[i + 1] + backward[i + 1])[None, :]
        offsets_next = np.array([c.offset for c in lattice.clusters[i + 1]])
        for a in range(len(lattice.clusters[i])):
            order = np.lexsort((offsets_next, through[a]))
            after[i][a] = order[0]
            backward[i][a] = through[a][order[0]]

    found = {}
    for terminal in labels[-1]:
        for cost, chain in terminal:
            found[chain] = cost
    for i in range(n):
        for a, node_labels in enumerate(labels[i]):
            if not node_labels or not np.isfinite(backward[i][a]):
                continue
            _, head = node_labels[0]
            chain = list(head)
            for j in range(i, n - 1):
                chain.append(int(after[j][chain[-1]]))
            chain = tuple(chain)
            if chain not in found:
                found[chain] = costs.chain_cost(chain)
    if not found:
        raise NoPath('no complete station chain in channel {}'.format(channel_id), channel_id)
    ranked = sorted(found.items(), key=lambda item: (item[1], costs.offsets(item[0])))
    ranked = ranked[:cfg.max_candidates]
    frame = lattice.frame
    stations = tuple(float(s) for s in lattice.stations)
    result = []
    for chain, cost in ranked:
        offsets = costs.offsets(chain)
        points = frame.to_cartesian(lattice.stations, np.array(offsets))
        result.append(CandidatePath(channel_id, Polyline(points), float(cost), offsets, stations))
    logger.debug('dp %s: %d candidates, best cost %.3f', channel_id, len(result), result[0].cost)
    return result


def non_maximum_suppress(candidates, cfg=SearchConfig()):
    ranked = sorted(candidates, key=lambda c: (c.cost, c.offsets))
    kept = []
    for candidate in ranked:
        if not kept:
            kept.append(candidate)
            continue
        offsets = np.array(candidate.offsets)
        nearest = np.min([np.abs(offsets - np.array(k.offsets)) for k in kept], axis=0)
        if np.mean(nearest > cfg.nms_lateral_threshold) > cfg.nms_fraction:
            kept.append(candidate)
    return kept


def search_channel(field, channel, roi, cfg=SearchConfig()):
    l_init = initial_guess_search(field, channel.channel_id, channel.entry_point, roi,
                                  channel.goal_pair, cfg)
    lattice = build_lattice(field, channel.channel_id, l_init, cfg)
    candidates = dp_search(lattice, field, channel.channel_id, cfg)
    kept = non_maximum_suppress(candidates, cfg)
    logger.info('channel %s: %d stations, %d candidates, %d kept', channel.channel_id,
                len(lattice), len(candidates), len(kept))
    return ChannelSearch(channel.channel_id, l_init, lattice, candidates, kept)


def search_field(field, partition, roi, cfg=SearchConfig()):
    """Searches every channel; returns (results by channel id, errors by channel id)."""
    results = {}
    failures = {}
    for channel in partition:
        if channel.channel_id not in field.layers:
            failures[channel.channel_id] = NoPath('channel {} is not in the field'.format(
                channel.channel_id), channel.channel_id)
            continue
        try:
            results[channel.channel_id] = search_channel(field, channel, roi, cfg)
        except TrafficFlowError as err:
            logger.warning('search failed for channel %s: %s', channel.channel_id, err)
            failures[channel.channel_id] = err
    return results, failures
