""" Run configuration files

A run is described by one YAML document:

    seed: 0
    output: runs/example
    world:   {preset: simple, max_steps: 300, obstacles: [...], formation: [[0, 0], ...]}
    ppo:     {episodes_per_batch: 8, max_batches: 200, ...}
    tune:    {eta: 0.5, tuning_iterations: 3, init_preset: simple, tune_preset: complex}
    eval:    {episodes: 20, seeds: [0]}
    backend: {kind: replay, responses: responses/}

Every section overrides the defaults of its dataclass; keys that are not
fields are rejected. Relative paths resolve against the file's directory.
"""

import copy
import dataclasses
import os
import typing
from dataclasses import dataclass, field

import yaml

import fcca_rewardgen.world as world
from fcca_rewardgen.backend import BackendConfig
from fcca_rewardgen.evaluation import EvalConfig
from fcca_rewardgen.exception import ConfigurationError, RewardGenError
from fcca_rewardgen.formation import FormationSpec
from fcca_rewardgen.llm_loop import TuneConfig, LoopContext
from fcca_rewardgen.ppo import PpoConfig

SECTIONS = ('seed', 'output', 'world', 'ppo', 'tune', 'eval', 'backend')

# world keys that are not plain WorldConfig fields
_WORLD_SPECIAL = ('preset', 'obstacles', 'formation')
_WORLD_FIELDS = tuple(f.name for f in dataclasses.fields(world.WorldConfig)
                      if f.name not in ('obstacle_scripts', 'formation', 'preset'))

@dataclass
class RunConfig:
    seed: int = 0
    output: str = 'output'
    world: dict = field(default_factory=dict)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    tune: TuneConfig = field(default_factory=TuneConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    base_dir: str = '.'
    document: typing.Optional[dict] = None

    def world_config(self, preset=None) -> 'world.WorldConfig':
        """ The named preset (default: the `world.preset` key, or `simple`) with this file's overrides """
        return build_world(self.world, preset)

    def loop_context(self, journal=None, metrics=None, output_dir=None) -> LoopContext:
        return LoopContext(tune=self.tune, ppo=self.ppo, evaluation=self.evaluation,
                           init_world=self.world_config(self.tune.init_preset),
                           tune_world=self.world_config(self.tune.tune_preset),
                           seed=self.seed, journal=journal, metrics=metrics, output_dir=output_dir)

def build_default_options():
    return RunConfig()

def _check_keys(section, dictionary, allowed):
    if not isinstance(dictionary, dict):
        raise ConfigurationError(f'section "{section}" must be a mapping, got {type(dictionary).__name__}')
    unknown = sorted(set(dictionary) - set(allowed))
    if unknown:
        raise ConfigurationError(f'unknown key(s) {unknown} in section "{section}"')

def _overlay(section, defaults, dictionary):
    """ A copy of the dataclass `defaults` with the fields named in `dictionary` replaced """
    allowed = [f.name for f in dataclasses.fields(defaults)]
    _check_keys(section, dictionary, allowed)
    try:
        return dataclasses.replace(copy.copy(defaults), **dictionary)
    except (TypeError, ValueError) as err:
        raise ConfigurationError(f'invalid value in section "{section}": {err}')

def build_world(section: dict, preset=None) -> world.WorldConfig:
    _check_keys('world', section, _WORLD_FIELDS + _WORLD_SPECIAL)
    name = preset or section.get('preset', 'simple')
    base = world.preset(name)
    changes = {k: v for k, v in section.items() if k in _WORLD_FIELDS}
    if 'obstacles' in section:
        entries = section['obstacles'] or []
        if not isinstance(entries, list):
            raise ConfigurationError('world.obstacles must be a list of mappings')
        changes['obstacle_scripts'] = tuple(world.ObstacleScript.from_config(e) for e in entries)
    if 'formation' in section:
        try:
            changes['formation'] = FormationSpec.from_config(section['formation'])
        except RewardGenError as err:
            raise ConfigurationError(f'invalid world.formation: {err.reason}')
    if 'start_positions' in changes and 'num_agents' not in changes:
        changes['num_agents'] = len(changes['start_positions'])
    try:
        return base.replace(**changes)
    except (TypeError, ValueError) as err:
        raise ConfigurationError(f'invalid value in section "world": {err}')

def _resolve(base_dir, path):
    if path is None:
        return None
    return path if os.path.isabs(path) else os.path.normpath(os.path.join(base_dir, path))

def _process_config_options(option: RunConfig, dictionary: dict, base_dir) -> RunConfig:
    option = copy.copy(option)
    _check_keys('top level', dictionary, SECTIONS)
    option.base_dir = base_dir
    option.document = dictionary

    seed = dictionary.get('seed')
    if seed is not None:
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigurationError(f'seed must be a non-negative integer, got {seed!r}')
        option.seed = seed
    output = dictionary.get('output')
    if output is not None:
        option.output = output
    option.output = _resolve(base_dir, option.output)

    world_section = dictionary.get('world') or {}
    build_world(world_section)
    option.world = world_section

    option.ppo = _overlay('ppo', option.ppo, dictionary.get('ppo') or {})
    option.tune = _overlay('tune', option.tune, dictionary.get('tune') or {})
    for preset_name in (option.tune.init_preset, option.tune.tune_preset):
        build_world(world_section, preset_name)

    eval_section = dict(dictionary.get('eval') or {})
    if 'seeds' in eval_section and not isinstance(eval_section['seeds'], (list, tuple)):
        raise ConfigurationError('eval.seeds must be a list of integers')
    option.evaluation = _overlay('eval', option.evaluation, eval_section)
    option.evaluation.trace_dir = _resolve(base_dir, option.evaluation.trace_dir)

    option.backend = _overlay('backend', option.backend, dictionary.get('backend') or {})
    option.backend.responses = _resolve(base_dir, option.backend.responses)
    option.backend.transcript = _resolve(base_dir, option.backend.transcript)
    return option

def process_config_document(document, options: RunConfig = None, base_dir='.') -> RunConfig:
    if document is None:
        document = {}
    if not isinstance(document, dict):
        raise ConfigurationError('a run configuration must be a YAML mapping')
    return _process_config_options(options or build_default_options(), document, base_dir)

def process_config_file(path, options: RunConfig = None) -> RunConfig:
    """ Load the run configuration in `path` on top of `options` (the defaults if omitted) """
    with open(path, 'r', encoding='utf-8') as f:
        try:
            document = yaml.safe_load(f)
        except yaml.YAMLError as err:
            raise ConfigurationError(f'malformed YAML: {err}', location=path)
    try:
        return process_config_document(document, options, os.path.dirname(os.path.abspath(path)))
    except ConfigurationError as err:
        if err.location is not None:
            raise
        raise ConfigurationError(err.reason, location=path)
