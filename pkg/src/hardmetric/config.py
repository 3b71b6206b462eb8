"""YAML config files with ``section.key=value`` overrides.

Precedence is overrides > file > dataclass defaults.
"""

from __future__ import annotations

from pathlib import Path

import yaml

from .data import DatasetSpec
from .errors import ConfigurationError, UsageError
from .trainer import TrainConfig


def read_yaml(path):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        loaded = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: invalid YAML: {exc}") from None
    if loaded is None:
        return {}
    if not isinstance(loaded, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return loaded


def apply_overrides(tree, overrides):
    """Apply ``a.b=value`` strings to a nested dict; values are parsed as YAML scalars."""
    tree = dict(tree)
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"override must look like key=value, got {item!r}")
        parts = key.split(".")
        node = tree
        for p in parts[:-1]:
            child = node.get(p)
            node[p] = dict(child) if isinstance(child, dict) else {}
            node = node[p]
        node[parts[-1]] = yaml.safe_load(raw)
    return tree


def load_train_config(path=None, overrides=()):
    tree = read_yaml(path) if path is not None else {}
    tree = apply_overrides(tree, overrides)
    try:
        return TrainConfig.from_dict(tree).validate()
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def load_dataset_spec(path=None, overrides=()):
    tree = read_yaml(path) if path is not None else {}
    tree = apply_overrides(tree, overrides)
    try:
        return DatasetSpec.from_dict(tree).validate()
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def dump_yaml(tree, path):
    Path(path).write_text(yaml.safe_dump(tree, sort_keys=False))
    return path
