"""
Synthetic intersection traffic with known answers.

A square ROI of half-size H = lanes * lane_width + margin sits at the origin.
Arm a in (0, 1, 2, 3) = (S, E, N, W) enters through ROI edge a. Traffic keeps
right; lane j of an approach lies (j + 1/2) * lane_width right of the road axis
and always exits to lane j. Turns are circular fillets between the entry and
exit lane lines. Every trace follows its lane centerline with AR(1) lateral and
white heading noise; defects, reroutes and a second driving mode are layered on
top with labels kept in the ground truth.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from trafficflow.errors import ConfigError
from trafficflow.evaluation import ReferencePath, classify_turn
from trafficflow.geometry import Polygon, Polyline, RoiSpec, normalize_angle
from trafficflow.trajectory import Trace, TraceSet, to_log_records
from trafficflow.util import make_rng


logger = logging.getLogger(__name__)

ARM_NAMES = ('S', 'E', 'N', 'W')
MOVEMENTS = {'right': 1, 'straight': 2, 'left': 3}
TRAVEL_MARGIN = 3.0
ARC_STEP = math.radians(2.0)
FRAGMENT_DURATION = 2.0
DRIFT_JUMP = 1.0
DRIFT_SAMPLES = 3
REFERENCE_EXTENSION = 3.0
MODE_SPACING = 0.25
MODE_FADE = 0.5


@dataclass(frozen=True)
class ScenarioSpec:
    seed: int = 0
    arms: tuple = (0, 1, 2, 3)
    lanes: int = 2
    lane_width: float = 3.5
    margin: float = 5.0
    approach_length: float = 30.0
    movements: tuple = ('right', 'straight', 'left')
    traces_per_movement: int = 15
    lateral_sigma: float = 0.2
    heading_sigma: float = 0.02
    ar_coefficient: float = 0.95
    sample_rate: float = 5.0
    max_speed: float = 10.0
    max_yaw_rate: float = 0.6
    box_length: float = 4.5
    box_width: float = 1.8
    fragment_rate: float = 0.0
    drift_rate: float = 0.0
    collide_rate: float = 0.0
    reroute_fraction: float = 0.0
    reroute_shift: float = 6.0
    bimodal: tuple = ()
    bimodal_separation: float = 4.0
    obstacles: bool = True

    def __post_init__(self):
        rates = (self.fragment_rate, self.drift_rate, self.collide_rate, self.reroute_fraction)
        if any(not 0 <= r <= 1 for r in rates):
            raise ConfigError('scenario rates must lie in [0, 1]')
        if self.fragment_rate + self.drift_rate + self.collide_rate > 1:
            raise ConfigError('defect rates sum to more than 1')
        if len(set(self.arms)) < 2 or any(a not in range(4) for a in self.arms):
            raise ConfigError('arms must be at least two distinct indices in 0..3')
        if self.lanes < 1 or self.traces_per_movement < 1:
            raise ConfigError('need at least one lane and one trace per movement')
        unknown = set(self.movements) - set(MOVEMENTS)
        if unknown:
            raise ConfigError('unknown movements: {}'.format(sorted(unknown)))

    @property
    def half_size(self):
        return self.lanes * self.lane_width + self.margin


@dataclass(frozen=True)
class Movement:
    entry_arm: int
    exit_arm: int
    lane: int
    turn: str

    @property
    def tag(self):
        return '{}{}-{}'.format(ARM_NAMES[self.entry_arm], self.lane, self.turn)


@dataclass
class TraceLabel:
    movement: Movement
    defect: str = None
    rerouted: bool = False
    mode: int = 0

    def to_record(self, vehicle_id):
        return {'kind': 'trace', 'id': vehicle_id, 'tag': self.movement.tag,
                'goal': [self.movement.entry_arm, self.movement.exit_arm],
                'lane': self.movement.lane, 'turn': self.movement.turn,
                'defect': self.defect, 'rerouted': self.rerouted, 'mode': self.mode}


@dataclass
class GroundTruth:
    spec: ScenarioSpec
    roi: RoiSpec
    labels: dict = field(default_factory=dict)
    centerlines: dict = field(default_factory=dict)
    references: list = field(default_factory=list)
    topology: list = field(default_factory=list)
    obstacles: list = field(default_factory=list)

    def clean_ids(self):
        return sorted(vid for vid, label in self.labels.items() if label.defect is None)

    def to_records(self):
        records = [{'kind': 'channel', **entry} for entry in self.topology]
        records += [{'kind': 'centerline', 'tag': tag, 'vertices': line.to_list()}
                    for tag, line in self.centerlines.items()]
        records += [label.to_record(vid) for vid, label in sorted(self.labels.items())]
        return records


def approach_direction(arm):
    """Unit travel direction of vehicles entering from `arm` (pointing into the ROI)."""
    angle = math.pi / 2 * (arm + 1)
    return np.array([math.cos(angle), math.sin(angle)])


def _right_of(direction):
    return np.array([direction[1], -direction[0]])


def lane_centerline(spec, movement):
    h = spec.half_size
    reach = h + spec.approach_length
    u = approach_direction(movement.entry_arm)
    v = -approach_direction(movement.exit_arm)
    lateral = (movement.lane + 0.5) * spec.lane_width
    entry_axis = lateral * _right_of(u)
    exit_axis = lateral * _right_of(v)
    start = entry_axis - reach * u
    end = exit_axis + reach * v
    if movement.turn == 'straight':
        return Polyline([start, end])
    # corner where the two lane lines meet
    t_in = np.linalg.solve(np.stack([u, -v], axis=1), exit_axis - entry_axis)[0]
    corner = entry_axis + t_in * u
    turn = math.atan2(u[0] * v[1] - u[1] * v[0], u @ v)
    d_in = np.linalg.norm(corner - (entry_axis - h * u))
    d_out = np.linalg.norm((exit_axis + h * v) - corner)
    tangent_length = 0.9 * min(d_in, d_out)
    radius = tangent_length / math.tan(abs(turn) / 2)
    p_in = corner - tangent_length * u
    normal = np.array([-u[1], u[0]]) * math.copysign(1.0, turn)
    center = p_in + radius * normal
    start_angle = math.atan2(*(p_in - center)[::-1])
    steps = max(2, int(math.ceil(abs(turn) / ARC_STEP)))
    angles = start_angle + np.linspace(0.0, turn, steps + 1)
    arc = center + radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return Polyline(np.concatenate([[start], arc, [end]]))


def _smooth_step(u):
    return 0.5 * (1.0 - np.cos(np.pi * np.clip(u, 0.0, 1.0)))


def second_mode(spec, centerline, movement):
    """
    Same entry point and exit arm, but the turn swings `bimodal_separation` wider.
    The swing rises from the entry edge to the middle of the turn, holds until the
    ROI is left and fades back into the exit lane along the exit leg.
    """
    dense = Polyline(centerline.resample(MODE_SPACING))
    s = dense.arclength
    s_in = spec.approach_length
    s_out = dense.length - spec.approach_length
    rise = _smooth_step((s - s_in) / (0.5 * (s_out - s_in)))
    fall = 1.0 - _smooth_step((s - s_out) / (MODE_FADE * spec.approach_length))
    # wider means right of travel for left turns, left of travel for right turns
    sign = -1.0 if movement.turn == 'left' else 1.0
    return dense.offset(sign * spec.bimodal_separation * np.minimum(rise, fall))


def max_curvature(polyline):
    headings = np.arctan2(polyline.segments[:, 1], polyline.segments[:, 0])
    turns = np.abs(normalize_angle(np.diff(headings)))
    spans = 0.5 * (polyline.segment_lengths[:-1] + polyline.segment_lengths[1:])
    return float(np.max(turns / spans, initial=0.0))


def _ar1(rng, count, sigma, rho):
    shocks = rng.standard_normal(count)
    noise = np.empty(count)
    noise[0] = sigma * shocks[0]
    scale = sigma * math.sqrt(1 - rho ** 2)
    for k in range(1, count):
        noise[k] = rho * noise[k - 1] + scale * shocks[k]
    return np.clip(noise, -3 * sigma, 3 * sigma)


def obstacle_blocks(spec):
    """One 2 m x 2 m block off the right curb of every approach, outside the ROI."""
    h = spec.half_size
    curb = spec.lanes * spec.lane_width
    blocks = []
    for arm in spec.arms:
        u = approach_direction(arm)
        r = _right_of(u)
        near, far = -(h + 8.0), -(h + 6.0)
        inner, outer = curb + 2.5, curb + 4.5
        corners = [near * u + inner * r, far * u + inner * r, far * u + outer * r, near * u + outer * r]
        blocks.append(Polygon(corners))
    return blocks


def _collision_offsets(spec, stations, lane):
    """Sideways bump to the right that reaches the approach block and is gone before the ROI."""
    center = spec.approach_length - 7.0
    half_span = 6.0
    needed = spec.lanes * spec.lane_width + 2.5 - (lane + 0.5) * spec.lane_width
    u = (stations - (center - half_span)) / (2 * half_span)
    bump = np.where((u > 0) & (u < 1), np.sin(np.pi * np.clip(u, 0, 1)) ** 2, 0.0)
    return -needed * bump


def movements(spec):
    result = []
    for arm in spec.arms:
        for turn in spec.movements:
            exit_arm = (arm + MOVEMENTS[turn]) % 4
            if exit_arm not in spec.arms:
                continue
            for lane in range(spec.lanes):
                result.append(Movement(arm, exit_arm, lane, turn))
    return result


def generate(spec):
    """Returns (log records sorted by (t, id), ground truth)."""
    traces, truth = generate_traces(spec)
    return to_log_records(traces), truth


def generate_traces(spec):
    rng = make_rng(spec.seed)
    h = spec.half_size
    roi = RoiSpec(Polygon([(-h, -h), (h, -h), (h, h), (-h, h)]), 'roi')
    truth = GroundTruth(spec, roi)
    if spec.obstacles:
        truth.obstacles = obstacle_blocks(spec)
    traces = []
    count = 0
    for movement in movements(spec):
        base = lane_centerline(spec, movement)
        modes = [base]
        truth.centerlines[movement.tag] = base
        if movement.tag in spec.bimodal and movement.turn != 'straight':
            modes.append(second_mode(spec, base, movement))
            truth.centerlines[movement.tag + '/1'] = modes[1]
        for mode_index, line in enumerate(modes):
            inside = line.between(spec.approach_length,
                                  line.length - spec.approach_length + REFERENCE_EXTENSION)
            tag = movement.tag if mode_index == 0 else movement.tag + '/1'
            truth.references.append(ReferencePath(tag, classify_turn(inside), inside))
        entry = roi.edge_offset(movement.entry_arm, base.point_at(spec.approach_length))
        truth.topology.append({'goal': [movement.entry_arm, movement.exit_arm], 'lane': movement.lane,
                               'entry_offset': float(entry), 'tag': movement.tag})
        for k in range(spec.traces_per_movement):
            mode_index = k % len(modes)
            vehicle_id = 'v{:05d}'.format(count)
            trace, label = _make_trace(spec, rng, vehicle_id, count, movement, modes[mode_index])
            label.mode = mode_index
            traces.append(trace)
            truth.labels[vehicle_id] = label
            count += 1
    defects = sum(1 for label in truth.labels.values() if label.defect)
    logger.info('generated %d traces over %d movements (%d defects, %d rerouted)', count,
                len(truth.topology), defects,
                sum(1 for label in truth.labels.values() if label.rerouted))
    return TraceSet(traces), truth


def _make_trace(spec, rng, vehicle_id, index, movement, centerline):
    # draws happen in the same order for every trace so seeds stay comparable across rates
    defect_draw, reroute_draw, fragment_draw = rng.random(3)
    speed = min(spec.max_speed, spec.max_yaw_rate / max(max_curvature(centerline), 1e-9))
    travel = centerline.length - 2 * TRAVEL_MARGIN
    times = np.arange(0.0, travel / speed, 1.0 / spec.sample_rate)
    stations = TRAVEL_MARGIN + speed * times
    lateral = _ar1(rng, len(times), spec.lateral_sigma, spec.ar_coefficient)
    heading_noise = np.clip(rng.standard_normal(len(times)) * spec.heading_sigma,
                            -3 * spec.heading_sigma, 3 * spec.heading_sigma)

    label = TraceLabel(movement)
    if defect_draw < spec.fragment_rate:
        label.defect = 'fragment'
    elif defect_draw < spec.fragment_rate + spec.drift_rate:
        label.defect = 'drift'
    elif defect_draw < spec.fragment_rate + spec.drift_rate + spec.collide_rate:
        label.defect = 'collide'
    label.rerouted = bool(reroute_draw < spec.reroute_fraction)

    if label.defect == 'collide':
        lateral = lateral + _collision_offsets(spec, stations, movement.lane)
    positions = centerline.point_at(stations) + lateral[:, None] * centerline.normal_at(stations)
    headings = centerline.heading_at(stations) + heading_noise
    if label.rerouted:
        positions = positions + spec.reroute_shift * _right_of(approach_direction(movement.entry_arm))
    if label.defect == 'drift':
        middle = len(times) // 2
        headings = headings.copy()
        headings[middle:middle + DRIFT_SAMPLES] += DRIFT_JUMP
    timestamps = index * 1.0 + times
    keep = slice(None)
    if label.defect == 'fragment':
        window = int(FRAGMENT_DURATION * spec.sample_rate)
        first = int(fragment_draw * max(1, len(times) - window))
        keep = slice(first, first + window)
    trace = Trace(vehicle_id, timestamps[keep], positions[keep, 0], positions[keep, 1],
                  headings[keep], spec.box_length, spec.box_width)
    return trace, label
