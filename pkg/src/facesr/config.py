"""YAML-backed experiment configuration.

The on-disk layout mirrors the dataclass tree::

    cascade:
      n_stages: 2
      input_px_iod: 5.0
      prior: {channels: 10}
      regressor: {n_perturb: 10, feature: {cells: 4}}
      schedule: {epochs_common: 10, base_lr: 1.0}
    degrade:
      blur_sigma: 0.0
      noise_level: 0.0

Unknown keys are rejected with the full dotted path. Environment variables
prefixed FACESR_ override individual values after the file is read; nesting
levels are separated by double underscores, e.g.
``FACESR_CASCADE__SCHEDULE__BASE_LR=2.5``.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from typing import Optional

import yaml

from .cascade import CascadeConfig
from .errors import DataError

ENV_PREFIX = "FACESR_"


@dataclass
class DegradeSettings:
    """How evaluation inputs are produced from high-res originals."""
    factor: Optional[float] = None
    target_px_iod: Optional[float] = None
    blur_sigma: float = 0.0
    noise_level: float = 0.0


@dataclass
class ExperimentConfig:
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    degrade: DegradeSettings = field(default_factory=DegradeSettings)


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise DataError(f"{path}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise DataError(f"{path}.{key}: unknown field")
        hint = hints[key]
        if dataclasses.is_dataclass(hint) and value is not None:
            kwargs[key] = _build(hint, value, f"{path}.{key}")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise DataError(f"{path}: {e}") from None


def config_from_dict(data):
    return _build(ExperimentConfig, data or {}, "config")


def config_to_dict(cfg: ExperimentConfig):
    return dataclasses.asdict(cfg)


def dump_config(cfg: ExperimentConfig):
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)


def save_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))


def apply_env_overrides(data, environ=None):
    """Fold FACESR_SECTION__FIELD=value pairs into a raw config dict."""
    environ = os.environ if environ is None else environ
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX):
            continue
        parts = key[len(ENV_PREFIX):].lower().split("__")
        if not all(parts):
            raise DataError(f"{key}: malformed override name")
        try:
            value = yaml.safe_load(environ[key])
        except yaml.YAMLError:
            raise DataError(f"{key}: value is not valid YAML") from None
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise DataError(f"{key}: overrides a non-mapping value")
        node[parts[-1]] = value
    return data


def load_config(path=None, environ=None):
    """Read the YAML file (or start from defaults) and apply env overrides."""
    data = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            try:
                data = yaml.safe_load(fh.read()) or {}
            except yaml.YAMLError as e:
                raise DataError(f"{path}: invalid YAML: {e}") from None
        if not isinstance(data, dict):
            raise DataError(f"{path}: top level must be a mapping")
    data = apply_env_overrides(data, environ)
    return config_from_dict(data)
