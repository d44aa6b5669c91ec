"""
Command-line pipeline over a workspace directory.

Every subcommand reads the artifacts of the stages before it from the workspace
and writes its own:

    synth         log.jsonl roi.json references.jsonl map.jsonl groundtruth.jsonl
    ingest        log.jsonl -> traces.jsonl
    filter        traces.jsonl roi.json -> filtered.jsonl rejections.jsonl
    partition     filtered.jsonl roi.json -> roi.refined.json partition.jsonl
    build-field   filtered.jsonl roi.json -> fifo.jsonl roi.refined.json partition.jsonl field.jsonl
    update-field  fifo.jsonl + new traces -> the same four artifacts
    search        field.jsonl partition.jsonl roi.refined.json -> candidates.jsonl
    smooth        candidates.jsonl -> smoothed.jsonl
    eval          smoothed.jsonl references.jsonl -> report.txt report.jsonl
    diff-map      field.jsonl map.jsonl -> change.json
    render        field.jsonl roi.refined.json [candidates, smoothed] -> render.svg

Exit status: 0 on success, 2 for a missing artifact, 3 for a bad config, 4 for
any other pipeline error.
"""

import argparse
import logging
import os
import sys
from collections import OrderedDict

from trafficflow import records
from trafficflow.config import PipelineConfig
from trafficflow.errors import ConfigError, MissingArtifact, TooShort, TrafficFlowError
from trafficflow.evaluation import ReferencePath, evaluate
from trafficflow.field import FlowField, RoiFlowStore, detect_change, update_fifo
from trafficflow.geometry import Polygon, RoiSpec
from trafficflow.grouping import ChannelPartition, preprocess
from trafficflow.render import render_svg
from trafficflow.search import CandidatePath, search_field
from trafficflow.smoothing import SmoothedPath, smooth_path
from trafficflow.synth import ScenarioSpec, generate
from trafficflow.trajectory import TraceSet, assemble_traces, build_obstacle_grid, filter_traces
from trafficflow.util import configure_logging


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_MISSING = 2
EXIT_CONFIG = 3
EXIT_PIPELINE = 4

LOG = 'log.jsonl'
ROI = 'roi.json'
TRACES = 'traces.jsonl'
FILTERED = 'filtered.jsonl'
REJECTIONS = 'rejections.jsonl'
REFINED_ROI = 'roi.refined.json'
PARTITION = 'partition.jsonl'
FIFO = 'fifo.jsonl'
FIELD = 'field.jsonl'
CANDIDATES = 'candidates.jsonl'
SMOOTHED = 'smoothed.jsonl'
REFERENCES = 'references.jsonl'
MAP = 'map.jsonl'
GROUND_TRUTH = 'groundtruth.jsonl'
REPORT = 'report.txt'
REPORT_RECORDS = 'report.jsonl'
CHANGE = 'change.json'
RENDER = 'render.svg'


class SearchFailures(TrafficFlowError):
    """NoPath (or another search error) for one or more channels."""

    def __init__(self, failures):
        self.failures = failures
        super(SearchFailures, self).__init__('no path for channels: {}'.format(
            ', '.join(sorted(failures))))


class Workspace:

    def __init__(self, directory, roi_path=None):
        self.directory = directory
        self.roi_path = roi_path
        os.makedirs(directory, exist_ok=True)

    def path(self, name):
        return os.path.join(self.directory, name)

    def read(self, name):
        return records.read_records(self.path(name))

    def write(self, name, rows):
        records.write_records(self.path(name), rows)
        logger.info('wrote %s', self.path(name))

    def read_roi(self, refined=False):
        if refined:
            path = self.path(REFINED_ROI)
        else:
            path = self.roi_path or self.path(ROI)
        return RoiSpec.from_record(records.read_json(path)), path

    def read_obstacles(self):
        data = records.read_json(self.roi_path or self.path(ROI))
        return [Polygon(vertices) for vertices in data.get('obstacles', [])]

    def write_roi(self, name, roi, obstacles=()):
        data = roi.to_record()
        data['obstacles'] = [polygon.to_list() for polygon in obstacles]
        records.write_json(self.path(name), data)


def load_config(args):
    config = PipelineConfig.from_json(args.config) if args.config else PipelineConfig()
    overrides = [('grid', 'resolution', args.resolution),
                 ('grid', 'inflation', args.inflation),
                 ('field', 'capacity', args.capacity),
                 ('search', 'station_spacing', args.station_spacing),
                 ('search', 'nms_lateral_threshold', args.nms_threshold),
                 ('search', 'nms_fraction', args.nms_fraction),
                 ('change', 'trigger', args.trigger)]
    for section, key, value in overrides:
        if value is not None:
            config = config.replace(section, key, value)
    return config


def _filter_config(config, workspace):
    grid = build_obstacle_grid(workspace.read_obstacles(), config.get_resolution(),
                               config.get_inflation())
    return config.create_filter_config(grid)


def _write_store(workspace, store, obstacles):
    workspace.write(FIFO, store.traces.to_records())
    workspace.write_roi(REFINED_ROI, store.refined_roi, obstacles)
    workspace.write(PARTITION, store.partition.to_records())
    workspace.write(FIELD, store.field.to_records())
    logger.info('field: %d channels, %d stored cells, %d trips', len(store.field.channel_ids),
                store.field.stored_cells, store.field.trip_count)


def _paths_by_channel(rows, factory):
    paths = OrderedDict()
    for row in rows:
        path = factory(row)
        paths.setdefault(path.channel_id, []).append(path)
    return paths


def cmd_synth(args, config, workspace):
    spec = ScenarioSpec(seed=args.seed, lanes=args.lanes,
                        traces_per_movement=args.traces_per_movement,
                        lateral_sigma=args.lateral_sigma, heading_sigma=args.heading_sigma,
                        fragment_rate=args.fragment_rate, drift_rate=args.drift_rate,
                        collide_rate=args.collide_rate, reroute_fraction=args.reroute_fraction,
                        margin=args.margin, bimodal=tuple(args.bimodal or ()),
                        obstacles=not args.no_obstacles)
    log, truth = generate(spec)
    workspace.write(LOG, log)
    workspace.write_roi(ROI, truth.roi, truth.obstacles)
    workspace.write(REFERENCES, [ref.to_record() for ref in truth.references])
    workspace.write(MAP, [{'tag': tag, 'vertices': line.to_list()}
                          for tag, line in truth.centerlines.items()])
    workspace.write(GROUND_TRUTH, truth.to_records())


def cmd_ingest(args, config, workspace):
    traces = assemble_traces(records.read_records(args.log or workspace.path(LOG)))
    workspace.write(TRACES, traces.to_records())


def cmd_filter(args, config, workspace):
    roi, _ = workspace.read_roi()
    traces = TraceSet.from_records(workspace.read(TRACES))
    result = filter_traces(traces, roi, _filter_config(config, workspace))
    workspace.write(FILTERED, result.kept.to_records())
    workspace.write(REJECTIONS, result.rejection_records())


def cmd_partition(args, config, workspace):
    roi, _ = workspace.read_roi()
    traces = TraceSet.from_records(workspace.read(FILTERED))
    settings = config.create_field_settings()
    refined, partition = preprocess(traces, roi, settings.entry_gap, settings.low_confidence_support)
    workspace.write_roi(REFINED_ROI, refined, workspace.read_obstacles())
    workspace.write(PARTITION, partition.to_records())


def cmd_build_field(args, config, workspace):
    roi, _ = workspace.read_roi()
    traces = TraceSet.from_records(workspace.read(FILTERED))
    store = RoiFlowStore(roi, config.create_field_settings(), traces)
    _write_store(workspace, store, workspace.read_obstacles())


def cmd_update_field(args, config, workspace):
    roi, _ = workspace.read_roi()
    store = RoiFlowStore(roi, config.create_field_settings(),
                         TraceSet.from_records(workspace.read(FIFO)))
    incoming = TraceSet.from_records(records.read_records(args.traces))
    kept = filter_traces(incoming, roi, _filter_config(config, workspace)).kept
    _write_store(workspace, update_fifo(store, kept), workspace.read_obstacles())


def cmd_search(args, config, workspace):
    field = FlowField.from_records(workspace.read(FIELD))
    partition = ChannelPartition.from_records(workspace.read(PARTITION))
    roi, _ = workspace.read_roi(refined=True)
    results, failures = search_field(field, partition, roi, config.create_search_config())
    rows = []
    for channel_id in partition.channel_ids:
        if channel_id in results:
            rows.extend(path.to_record() for path in results[channel_id].kept)
    workspace.write(CANDIDATES, rows)
    if failures:
        raise SearchFailures(failures)


def cmd_smooth(args, config, workspace):
    cfg = config.create_smooth_config()
    rows = []
    for paths in _paths_by_channel(workspace.read(CANDIDATES), CandidatePath.from_record).values():
        for path in paths:
            try:
                rows.append(smooth_path(path, cfg).to_record())
            except TooShort as err:
                logger.warning('skipping a path of channel %s: %s', path.channel_id, err)
    workspace.write(SMOOTHED, rows)


def cmd_eval(args, config, workspace):
    if args.paths == 'candidates':
        paths = _paths_by_channel(workspace.read(CANDIDATES), CandidatePath.from_record)
    else:
        paths = _paths_by_channel(workspace.read(SMOOTHED), SmoothedPath.from_record)
    references = [ReferencePath.from_record(row)
                  for row in records.read_records(args.references or workspace.path(REFERENCES))]
    report, _ = evaluate(paths, references, config.create_evaluation_config())
    table = report.format_table()
    with open(workspace.path(REPORT), 'w') as writer:
        writer.write(table)
    workspace.write(REPORT_RECORDS, report.to_records())
    print(table, end='')


def cmd_diff_map(args, config, workspace):
    field = FlowField.from_records(workspace.read(FIELD))
    rows = records.read_records(args.map or workspace.path(MAP))
    references = [ReferencePath.from_record(row).polyline for row in rows]
    report = detect_change(field, references, config.create_change_config())
    records.write_json(workspace.path(CHANGE), report.to_record())
    print('divergence {:.4f} ({})'.format(report.divergence_score,
                                          'update triggered' if report.triggered else 'no update'))


def cmd_render(args, config, workspace):
    field = FlowField.from_records(workspace.read(FIELD))
    roi = None
    if os.path.exists(workspace.path(REFINED_ROI)):
        roi, _ = workspace.read_roi(refined=True)
    paths, smoothed = [], []
    if os.path.exists(workspace.path(CANDIDATES)):
        paths = [CandidatePath.from_record(row).polyline for row in workspace.read(CANDIDATES)]
    if os.path.exists(workspace.path(SMOOTHED)):
        smoothed = [SmoothedPath.from_record(row).polyline for row in workspace.read(SMOOTHED)]
    render_svg(args.output or workspace.path(RENDER), field, roi, paths, smoothed)


COMMANDS = OrderedDict([('synth', cmd_synth),
                        ('ingest', cmd_ingest),
                        ('filter', cmd_filter),
                        ('partition', cmd_partition),
                        ('build-field', cmd_build_field),
                        ('update-field', cmd_update_field),
                        ('search', cmd_search),
                        ('smooth', cmd_smooth),
                        ('eval', cmd_eval),
                        ('diff-map', cmd_diff_map),
                        ('render', cmd_render)])


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON config file (defaults apply to missing keys)')
    common.add_argument('--workspace', default='.', help='artifact directory')
    common.add_argument('--roi', help='ROI file (default: <workspace>/roi.json)')
    common.add_argument('--seed', type=int, default=0)
    common.add_argument('-v', '--verbose', action='count', default=0)
    common.add_argument('--resolution', type=float, help='grid resolution in meters')
    common.add_argument('--inflation', type=float, help='obstacle inflation in meters')
    common.add_argument('--capacity', type=int, help='FIFO capacity per ROI')
    common.add_argument('--station-spacing', type=float)
    common.add_argument('--nms-threshold', type=float, help='NMS lateral threshold in meters')
    common.add_argument('--nms-fraction', type=float)
    common.add_argument('--trigger', type=float, help='map-change trigger score')

    parser = argparse.ArgumentParser(prog='trafficflow', description=__doc__.split('\n\n')[0])
    subparsers = parser.add_subparsers(dest='command', required=True)
    synth = subparsers.add_parser('synth', parents=[common], help='generate a synthetic intersection')
    synth.add_argument('--lanes', type=int, default=2)
    synth.add_argument('--traces-per-movement', type=int, default=15)
    synth.add_argument('--lateral-sigma', type=float, default=0.2)
    synth.add_argument('--heading-sigma', type=float, default=0.02)
    synth.add_argument('--fragment-rate', type=float, default=0.0)
    synth.add_argument('--drift-rate', type=float, default=0.0)
    synth.add_argument('--collide-rate', type=float, default=0.0)
    synth.add_argument('--reroute-fraction', type=float, default=0.0)
    synth.add_argument('--margin', type=float, default=5.0)
    synth.add_argument('--bimodal', action='append', help='movement tag, e.g. S0-left')
    synth.add_argument('--no-obstacles', action='store_true')
    ingest = subparsers.add_parser('ingest', parents=[common], help='assemble traces from a log')
    ingest.add_argument('--log', help='log file (default: <workspace>/log.jsonl)')
    subparsers.add_parser('filter', parents=[common], help='drop unusable traces')
    subparsers.add_parser('partition', parents=[common], help='refine edges and group into channels')
    subparsers.add_parser('build-field', parents=[common], help='synthesize the flow field')
    update = subparsers.add_parser('update-field', parents=[common], help='push traces through the FIFO')
    update.add_argument('traces', help='trace file to add')
    subparsers.add_parser('search', parents=[common], help='search candidate paths per channel')
    subparsers.add_parser('smooth', parents=[common], help='smooth candidate paths')
    evaluation = subparsers.add_parser('eval', parents=[common], help='compare paths with references')
    evaluation.add_argument('--references', help='reference file (default: <workspace>/references.jsonl)')
    evaluation.add_argument('--paths', choices=('smoothed', 'candidates'), default='smoothed')
    diff = subparsers.add_parser('diff-map', parents=[common], help='score the field against a map')
    diff.add_argument('--map', help='map centerline file (default: <workspace>/map.jsonl)')
    render = subparsers.add_parser('render', parents=[common], help='draw the field as SVG')
    render.add_argument('--output', help='SVG path (default: <workspace>/render.svg)')
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        config = load_config(args)
        workspace = Workspace(args.workspace, args.roi)
        COMMANDS[args.command](args, config, workspace)
    except MissingArtifact as err:
        logger.error('%s: %s', args.command, err)
        return EXIT_MISSING
    except ConfigError as err:
        logger.error('%s: %s', args.command, err)
        return EXIT_CONFIG
    except SearchFailures as err:
        for channel_id in sorted(err.failures):
            logger.error('search: NoPath %s: %s', channel_id, err.failures[channel_id])
        print(str(err), file=sys.stderr)
        return EXIT_PIPELINE
    except TrafficFlowError as err:
        logger.error('%s: %s: %s', args.command, type(err).__name__, err)
        print('{}: {}'.format(type(err).__name__, err), file=sys.stderr)
        return EXIT_PIPELINE
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
