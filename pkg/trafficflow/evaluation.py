"""
Comparison of generated paths with reference centerlines: average, maximum and
at-distance displacement errors, aggregated per turn type.
"""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from trafficflow.errors import MalformedRecord, NoReference
from trafficflow.geometry import Polyline, normalize_angle


logger = logging.getLogger(__name__)

TURN_TYPES = ('left', 'right', 'straight')
HEADING_SPAN = 2.0


@dataclass(frozen=True)
class EvaluationConfig:
    sample_step: float = 0.5
    distances: tuple = (5.0, 35.0, 55.0)
    max_heading_diff_deg: float = 45.0


def _end_heading(polyline, at_start):
    span = min(HEADING_SPAN, polyline.length / 4)
    if at_start:
        a, b = polyline.point_at(0.0), polyline.point_at(span)
    else:
        a, b = polyline.point_at(polyline.length - span), polyline.point_at(polyline.length)
    return math.atan2(b[1] - a[1], b[0] - a[0])


def heading_change(polyline):
    return normalize_angle(_end_heading(polyline, False) - _end_heading(polyline, True))


def classify_turn(polyline, threshold_deg=45.0):
    change = math.degrees(heading_change(polyline))
    if change > threshold_deg:
        return 'left'
    if change < -threshold_deg:
        return 'right'
    return 'straight'


@dataclass
class ReferencePath:
    tag: str
    turn_type: str
    polyline: Polyline

    def to_record(self):
        return {'tag': self.tag, 'turn': self.turn_type, 'vertices': self.polyline.to_list()}

    @staticmethod
    def from_record(record):
        try:
            polyline = Polyline(record['vertices'])
            turn = record.get('turn') or classify_turn(polyline)
            if turn not in TURN_TYPES:
                raise MalformedRecord('unknown turn type: {}'.format(turn))
            return ReferencePath(str(record['tag']), turn, polyline)
        except KeyError as err:
            raise MalformedRecord('reference record missing field {}'.format(err))


def _as_polyline(path):
    return path if isinstance(path, Polyline) else path.polyline


@dataclass
class Alignment:
    pairs: dict = field(default_factory=dict)
    unpaired: dict = field(default_factory=dict)


def align_reference(candidates, references, cfg=EvaluationConfig()):
    """
    Pairs each channel with the reference whose start is nearest the channel's entry
    point, among references whose exit heading is within the configured angle of
    the channel's. `candidates` maps channel id to its paths, best first.
    """
    max_diff = math.radians(cfg.max_heading_diff_deg)
    starts = np.array([r.polyline.start for r in references]).reshape(-1, 2)
    exits = np.array([_end_heading(r.polyline, False) for r in references])
    alignment = Alignment()
    for channel_id in sorted(candidates):
        paths = candidates[channel_id]
        if not paths:
            alignment.unpaired[channel_id] = NoReference(
                'channel {} has no paths'.format(channel_id), channel_id)
            continue
        lead = _as_polyline(paths[0])
        admissible = np.abs(normalize_angle(exits - _end_heading(lead, False))) <= max_diff
        if len(references) == 0 or not np.any(admissible):
            alignment.unpaired[channel_id] = NoReference(
                'no reference agrees with the exit heading of channel {}'.format(channel_id),
                channel_id)
            continue
        gaps = np.hypot(*(starts - lead.start).T)
        choices = np.flatnonzero(admissible)
        best = min(choices, key=lambda i: (gaps[i], references[i].tag))
        alignment.pairs[channel_id] = references[best]
    if alignment.unpaired:
        logger.warning('%d channels without a reference: %s', len(alignment.unpaired),
                       ', '.join(sorted(alignment.unpaired)))
    return alignment


@dataclass
class DisplacementErrors:
    ade: float
    mde: float
    at_distance: dict
    displacements: np.ndarray

    def de(self, x):
        return self.at_distance.get(float(x))


def displacement_errors(flow, ref, cfg=EvaluationConfig()):
    """
    Samples the flow path every sample_step meters (and at its end) and measures the
    distance of every sample to the nearest point of the reference.
    """
    stations = flow.sample_stations(cfg.sample_step)
    displacements = ref.distance_to(flow.point_at(stations))
    at_distance = {}
    for x in cfg.distances:
        if flow.length + 1e-9 >= x:
            at_distance[float(x)] = float(ref.distance_to(flow.point_at(np.array([x])))[0])
        else:
            at_distance[float(x)] = None
    return DisplacementErrors(float(displacements.mean()), float(displacements.max()),
                              at_distance, displacements)


def _summary(values):
    values = [v for v in values if v is not None]
    if not values:
        return {'avg': None, 'std': None, 'count': 0}
    std = float(np.std(values, ddof=1)) if len(values) >= 2 else None
    return {'avg': float(np.mean(values)), 'std': std, 'count': len(values)}


@dataclass
class Pairing:
    channel_id: str
    turn_type: str
    errors: DisplacementErrors

    def to_record(self):
        return {'channel': self.channel_id, 'turn': self.turn_type,
                'ade': self.errors.ade, 'mde': self.errors.mde,
                'de': {'{:g}'.format(x): v for x, v in self.errors.at_distance.items()}}


@dataclass
class MetricsReport:
    distances: tuple
    rows: OrderedDict
    pairings: list

    def format_table(self):
        headers = ['Type', 'Paths', 'ADE avg', 'ADE std', 'MDE avg', 'MDE std']
        for x in self.distances:
            headers += ['DE@{:g} avg'.format(x), 'DE@{:g} std'.format(x)]
        lines = [headers]
        for turn, row in self.rows.items():
            line = [turn.capitalize(), str(row['count'])]
            for key in ['ade', 'mde'] + ['de@{:g}'.format(x) for x in self.distances]:
                line += [_cell(row[key]['avg']), _cell(row[key]['std'])]
            lines.append(line)
        widths = [max(len(line[i]) for line in lines) for i in range(len(headers))]
        return '\n'.join('  '.join(cell.rjust(w) for cell, w in zip(line, widths))
                         for line in lines) + '\n'

    def to_records(self):
        records = []
        for turn, row in self.rows.items():
            record = {'kind': 'summary', 'turn': turn}
            record.update(row)
            records.append(record)
        for pairing in self.pairings:
            record = {'kind': 'candidate'}
            record.update(pairing.to_record())
            records.append(record)
        return records


def _cell(value):
    return '-' if value is None else '{:.2f}'.format(value)


def build_report(pairings, cfg=EvaluationConfig()):
    """Per turn type, mean and sample std over candidates; '-' where undefined."""
    rows = OrderedDict()
    turns = [t for t in TURN_TYPES if any(p.turn_type == t for p in pairings)]
    for turn in turns:
        members = [p for p in pairings if p.turn_type == turn]
        row = {'count': len(members),
               'ade': _summary([p.errors.ade for p in members]),
               'mde': _summary([p.errors.mde for p in members])}
        for x in cfg.distances:
            row['de@{:g}'.format(x)] = _summary([p.errors.de(x) for p in members])
        rows[turn] = row
    return MetricsReport(tuple(cfg.distances), rows, list(pairings))


def evaluate(candidates, references, cfg=EvaluationConfig()):
    """Aligns channels with references and measures every path of every paired channel."""
    alignment = align_reference(candidates, references, cfg)
    pairings = []
    for channel_id, reference in alignment.pairs.items():
        for path in candidates[channel_id]:
            errors = displacement_errors(_as_polyline(path), reference.polyline, cfg)
            pairings.append(Pairing(channel_id, reference.turn_type, errors))
    logger.info('evaluated %d paths over %d channels', len(pairings), len(alignment.pairs))
    return build_report(pairings, cfg), alignment
