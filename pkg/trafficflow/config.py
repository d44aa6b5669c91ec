import copy
import json
import os

from trafficflow.errors import ConfigError, MissingArtifact
from trafficflow.evaluation import EvaluationConfig
from trafficflow.field import ChangeConfig, FieldSettings
from trafficflow.search import SearchConfig
from trafficflow.smoothing import SmoothConfig
from trafficflow.trajectory import FilterConfig


VEHICLE_WIDTH = 1.8

DEFAULT = {'grid': {'resolution': 0.2,
                    'vehicle_width': VEHICLE_WIDTH,
                    'inflation': VEHICLE_WIDTH / 2},
           'filter': {'min_lifetime': 4.0,
                      'min_travel': 10.0,
                      'max_heading_rate': 1.2,
                      'heading_window': 0.5,
                      'min_penetration': 2.0},
           'grouping': {'entry_gap': 1.75,
                        'low_confidence_support': 3},
           'field': {'capacity': 400},
           'change': {'support': 3,
                      'distance': 1.5,
                      'angle_deg': 30.0,
                      'trigger': 0.2},
           'search': {'station_spacing': 3.0,
                      'density_weight': 1.0,
                      'direction_weight': 2.0,
                      'nms_lateral_threshold': 2.0,
                      'nms_fraction': 0.2,
                      'min_cell_density': 1,
                      'lateral_gap': 1.75,
                      'station_band': 0.5,
                      'lateral_range': 8.0,
                      'jump_weight': 0.5,
                      'beam_width': 5,
                      'max_candidates': 20,
                      'capture_range': 15.0},
           'smooth': {'max_lateral_deviation': 0.75,
                      'smoothness_weight': 1.0,
                      'fidelity_weight': 0.1,
                      'sample_spacing': 0.5},
           'evaluation': {'sample_step': 0.5,
                          'distances': [5.0, 35.0, 55.0],
                          'max_heading_diff_deg': 45.0}
           }


class PipelineConfig:
    """
    Nested parameter dictionary for every pipeline stage. Sections missing from a
    config file fall back to DEFAULT key by key.
    """

    def __init__(self, params=None):
        self.params = copy.deepcopy(DEFAULT)
        for section, values in (params or {}).items():
            if section not in DEFAULT:
                raise ConfigError("Unrecognized config section: {}".format(section))
            if not isinstance(values, dict):
                raise ConfigError("Config section {} must be a key-value mapping".format(section))
            for key, value in values.items():
                if key not in DEFAULT[section]:
                    raise ConfigError("Unrecognized config key: {}.{}".format(section, key))
                self.params[section][key] = value
        if 'inflation' not in (params or {}).get('grid', {}):
            self.params['grid']['inflation'] = self.params['grid']['vehicle_width'] / 2
        self.validate()

    def __getitem__(self, section):
        return self.params[section]

    def get_resolution(self):
        return self.params['grid']['resolution']

    def get_inflation(self):
        return self.params['grid']['inflation']

    def create_filter_config(self, obstacle_grid=None):
        return FilterConfig(obstacle_grid=obstacle_grid, **self.params['filter'])

    def create_field_settings(self):
        return FieldSettings(resolution=self.params['grid']['resolution'],
                             capacity=self.params['field']['capacity'],
                             entry_gap=self.params['grouping']['entry_gap'],
                             low_confidence_support=self.params['grouping']['low_confidence_support'])

    def create_search_config(self):
        return SearchConfig(**self.params['search'])

    def create_smooth_config(self):
        return SmoothConfig(**self.params['smooth'])

    def create_change_config(self):
        return ChangeConfig(**self.params['change'])

    def create_evaluation_config(self):
        params = dict(self.params['evaluation'])
        params['distances'] = tuple(float(x) for x in params['distances'])
        return EvaluationConfig(**params)

    def validate(self):
        try:
            self._check()
        except TypeError as err:
            raise ConfigError("Malformed config value: {}".format(err))

    def _check(self):
        grid = self.params['grid']
        if not grid['resolution'] > 0:
            raise ConfigError("grid resolution must be positive: {}".format(grid['resolution']))
        if not grid['vehicle_width'] > 0:
            raise ConfigError("vehicle width must be positive: {}".format(grid['vehicle_width']))
        if grid['inflation'] < 0:
            raise ConfigError("obstacle inflation must be non-negative: {}".format(grid['inflation']))
        if self.params['field']['capacity'] < 1:
            raise ConfigError("field capacity must be at least 1")
        if not self.params['grouping']['entry_gap'] > 0:
            raise ConfigError("entry gap must be positive")
        change = self.params['change']
        if not 0 <= change['trigger'] <= 1:
            raise ConfigError("change trigger must lie in [0, 1]: {}".format(change['trigger']))
        if change['support'] < 1 or not change['distance'] > 0:
            raise ConfigError("change support and distance must be positive")
        evaluation = self.params['evaluation']
        if not evaluation['sample_step'] > 0:
            raise ConfigError("evaluation sample step must be positive")
        # the stage configs check their own invariants on construction
        self.create_filter_config()
        self.create_search_config()
        self.create_smooth_config()

    def replace(self, section, key, value):
        params = copy.deepcopy(self.params)
        params[section][key] = value
        if section == 'grid' and key == 'vehicle_width':
            params['grid']['inflation'] = value / 2
        return PipelineConfig(params)

    def to_json(self):
        return copy.deepcopy(self.params)

    @staticmethod
    def from_json(json_file):
        if not os.path.exists(json_file):
            raise MissingArtifact("Missing config file: {}".format(json_file))
        with open(json_file) as reader:
            try:
                data = json.load(reader)
            except ValueError as err:
                raise ConfigError("Unreadable config file {}: {}".format(json_file, err))
        if not isinstance(data, dict):
            raise ConfigError("Config file {} must hold a JSON object".format(json_file))
        return PipelineConfig(data)
