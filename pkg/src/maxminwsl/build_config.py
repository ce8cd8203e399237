import json
from pathlib import Path
from typing import Any, Iterable

import structlog
import yaml
from pydantic import TypeAdapter, ValidationError

from .data_types import RunConfig
from .exceptions import ConfigError

logger = structlog.get_logger(__name__)

ROOT_ELEMENT = "runConfig"


def build_config(config_yaml_path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """
    Build a RunConfig from a YAML (or JSON) file plus dotted-key overrides.

    Args:
        config_yaml_path (str | Path | None): Config file with a top-level `runConfig` element.
            None starts from the defaults.
        overrides (dict[str, Any] | None): Dotted keys (e.g. `train.loss.lambda`) that win over
            the file values.

    Returns:
        RunConfig: The validated configuration.

    Raises:
        ConfigError: If the file is malformed, a key is unknown or a value is invalid.
    """
    raw = load_config_dict(config_yaml_path) if config_yaml_path is not None else {}
    if overrides:
        raw = merge(raw, unflatten(overrides))
    return validate(RunConfig, raw)


def load_config_dict(config_yaml_path: str | Path) -> dict:
    try:
        with open(config_yaml_path, "r") as file:
            config = yaml.safe_load(file)
    except yaml.YAMLError as e:
        raise ConfigError(f"Config file {config_yaml_path} is not valid YAML: {e}") from e

    if isinstance(config, dict) and (run_config := config.get(ROOT_ELEMENT)) is not None:
        if not isinstance(run_config, dict):
            raise ConfigError(f"`{ROOT_ELEMENT}` must be a mapping, got {type(run_config).__name__}")
        return unflatten(run_config)

    raise ConfigError(f"Invalid config format (no `{ROOT_ELEMENT}` element in yaml). Please check the yaml structure.")


def validate(config_type: type, raw: dict):
    try:
        return TypeAdapter(config_type).validate_python(raw)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def with_updates(cfg, **changes):
    """Copy of a config object with some fields replaced (fields named as in the config file)."""
    data = config_to_dict(cfg)
    data.update(changes)
    return validate(type(cfg), data)


def unflatten(flat: dict) -> dict:
    """Turn `{"a.b": 1, "a": {"c": 2}}` into `{"a": {"b": 1, "c": 2}}`."""
    nested: dict = {}
    for key, value in flat.items():
        if isinstance(value, dict):
            value = unflatten(value)
        parts = str(key).split(".")
        node = nested
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"Config key `{key}` conflicts with scalar value at `{part}`")
            node = child
        leaf = parts[-1]
        if isinstance(node.get(leaf), dict) and isinstance(value, dict):
            node[leaf] = merge(node[leaf], value)
        elif leaf in node:
            raise ConfigError(f"Config key `{key}` is given more than once")
        else:
            node[leaf] = value
    return nested


def merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = value
    return out


def flatten(nested: dict, prefix: str = "") -> dict[str, Any]:
    flat = {}
    for key, value in nested.items():
        name = f"{prefix}.{key}" if prefix else str(key)
        if isinstance(value, dict):
            flat.update(flatten(value, name))
        else:
            flat[name] = value
    return flat


def parse_overrides(assignments: Iterable[str]) -> dict[str, Any]:
    """Parse `key=value` strings; values are read as YAML scalars (`1.0e-7`, `true`, `[1, 3]`)."""
    overrides = {}
    for assignment in assignments:
        key, sep, value = assignment.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"Override `{assignment}` is not of the form key=value")
        try:
            overrides[key.strip()] = yaml.safe_load(value)
        except yaml.YAMLError as e:
            raise ConfigError(f"Override `{assignment}` has an unreadable value: {e}") from e
    return overrides


def config_to_dict(cfg) -> dict:
    return TypeAdapter(type(cfg)).dump_python(cfg, mode="json", by_alias=True)


def dump_config(cfg: RunConfig) -> str:
    """Fully resolved configuration as sorted flat dotted keys in JSON."""
    return json.dumps(flatten(config_to_dict(cfg)), indent=2, sort_keys=True)
