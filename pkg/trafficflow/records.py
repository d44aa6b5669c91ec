"""
Reading and writing pipeline artifacts.

Collections are line-delimited JSON (one record per line); single objects such as
ROIs and change reports are one JSON document. Keys are sorted so identical
inputs give byte-identical files.
"""

import json
import logging
import os

from trafficflow.errors import MalformedRecord, MissingArtifact


logger = logging.getLogger(__name__)


def _dumps(record, indent=None):
    return json.dumps(record, sort_keys=True, indent=indent, allow_nan=False)


def write_records(path, records):
    records = list(records)
    with open(path, 'w') as writer:
        for record in records:
            writer.write(_dumps(record))
            writer.write('\n')
    logger.debug('wrote %d records to %s', len(records), path)


def read_records(path):
    if not os.path.exists(path):
        raise MissingArtifact('Missing artifact: {}'.format(path))
    records = []
    with open(path) as reader:
        for line_number, line in enumerate(reader, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except ValueError as err:
                raise MalformedRecord('{}:{}: {}'.format(path, line_number, err))
    return records


def write_json(path, data):
    with open(path, 'w') as writer:
        writer.write(_dumps(data, indent=4))
        writer.write('\n')


def read_json(path):
    if not os.path.exists(path):
        raise MissingArtifact('Missing artifact: {}'.format(path))
    with open(path) as reader:
        try:
            return json.load(reader)
        except ValueError as err:
            raise MalformedRecord('{}: {}'.format(path, err))
