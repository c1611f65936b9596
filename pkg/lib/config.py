"""
CF-FedSR - Experiment Configuration Loader

Reads a flat YAML file (one `key: value` per line) and maps it onto the
simulator's RunConfig and DatasetConfig, with `key=value` overrides on top.

Usage:
    from lib.config import load_config
    # or if running from a script subdirectory:
    import sys, os
    sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))
    from lib.config import load_config

    cfg = load_config('config.example.yaml', overrides=['total_rounds=20'])
    cfg.run.algorithm            # "cf_fedsr"
    cfg.dataset.synth_num_items  # 500
    cfg.echo()                   # flat dict that reproduces the run
"""

import dataclasses
import os

import yaml

from fedsr.dataio import DatasetConfig
from fedsr.errors import ConfigError
from fedsr.fedcore import RunConfig

_REPO_ROOT = os.environ.get(
    'FEDSR_ROOT',
    os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
)

_SECTIONS = (('run', RunConfig), ('dataset', DatasetConfig))


def _field_types():
    types = {}
    for section, cls in _SECTIONS:
        for f in dataclasses.fields(cls):
            types[f.name] = (section, f.type)
    return types


def resolve_path(explicit=None):
    """Config path to use, or None for pure defaults.

    Resolution order:
      1. explicit path (--config)
      2. FEDSR_CONFIG env var
      3. config.yaml in the repo root
    """
    if explicit:
        if not os.path.exists(explicit):
            raise ConfigError(f'config file not found: {explicit}')
        return explicit
    env_path = os.environ.get('FEDSR_CONFIG')
    if env_path:
        if not os.path.exists(env_path):
            raise ConfigError(f'FEDSR_CONFIG points to a missing file: {env_path}')
        return env_path
    default = os.path.join(_REPO_ROOT, 'config.yaml')
    return default if os.path.exists(default) else None


def _read_yaml(path):
    """Return {key: (value, line)} from a flat YAML mapping."""
    with open(path) as f:
        text = f.read()
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, 'problem_mark', None)
        where = f'line {mark.line + 1}' if mark else 'unknown line'
        raise ConfigError(f'{path}: {where}: invalid YAML ({getattr(e, "problem", e)})') from e

    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f'{path}: top level must be a mapping of key: value lines')
    lines = {k.value: k.start_mark.line + 1 for k, _ in root.value}
    return {key: (value, lines.get(key)) for key, value in data.items()}


def _coerce(key, value, expected, where):
    if value is None:
        raise ConfigError(f'{where}: {key} has no value')
    if expected is bool:
        if isinstance(value, bool):
            return value
    elif expected is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif expected is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        # PyYAML reads exponents without a dot (1e-3) as strings
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
    elif expected is str:
        if isinstance(value, (str, int, float)) and not isinstance(value, bool):
            return str(value)
    raise ConfigError(
        f'{where}: {key} expects {expected.__name__}, got {value!r}')


def parse_override(text):
    """'key=value' -> (key, value) with the value parsed as YAML."""
    if '=' not in text:
        raise ConfigError(f'override {text!r} is not key=value')
    key, raw = text.split('=', 1)
    key = key.strip()
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f'override {text!r}: cannot parse value') from e
    return key, value


@dataclasses.dataclass
class ExperimentConfig:
    run: RunConfig
    dataset: DatasetConfig
    source: str = ''

    def echo(self):
        """Flat key -> value mapping; loading it back gives the same config."""
        out = dataclasses.asdict(self.run)
        out.update(dataclasses.asdict(self.dataset))
        return dict(sorted(out.items()))

    def with_values(self, **values):
        """Copy with some keys replaced (validated like file keys)."""
        return build_config({**self.echo(), **values}, self.source)


def build_config(values, source='', locations=None):
    """Validate a flat key -> value mapping into an ExperimentConfig.

    *locations* maps a key to where it was set, for error messages.
    """
    types = _field_types()
    locations = locations or {}
    sections = {name: {} for name, _ in _SECTIONS}
    for key, value in values.items():
        where = locations.get(key) or source or 'config'
        if key not in types:
            raise ConfigError(f'{where}: unknown key {key!r}')
        section, expected = types[key]
        sections[section][key] = _coerce(key, value, expected, where)

    run = RunConfig(**sections['run'])
    run.validate()
    dataset = DatasetConfig(**sections['dataset'])
    dataset.validate()
    return ExperimentConfig(run, dataset, source)


def load_config(path=None, overrides=()):
    """Load a config file (or defaults) and apply `key=value` overrides."""
    resolved = resolve_path(path)
    values, locations = {}, {}
    if resolved:
        for key, (value, line) in _read_yaml(resolved).items():
            values[key] = value
            locations[key] = f'{resolved}: line {line}'

    for text in overrides:
        key, value = parse_override(text)
        values[key] = value
        locations[key] = f'--set {text}'
    return build_config(values, resolved or 'defaults', locations)
