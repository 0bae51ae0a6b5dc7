"""Run-configuration files for the CLI.

Configs are TOML (JSON accepted); command-line flags override file values.
Every subcommand validates its section before any work: unknown keys are
rejected, field types are coerced and checked, and the resolved dict is
recorded in ``run.json`` next to the run's outputs.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import ConfigError

SEED_ENV_VAR = "COBRA_LITE_SEED"


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw = path.read_bytes()
    if path.suffix.lower() == ".json":
        try:
            return json.loads(raw.decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    try:
        return tomllib.loads(raw.decode("utf-8"))
    except tomllib.TOMLDecodeError as exc:
        # a .toml parse failure may still be a JSON file without extension
        try:
            return json.loads(raw.decode("utf-8"))
        except json.JSONDecodeError:
            raise ConfigError(f"{path}: invalid TOML: {exc}") from exc


_SCALARS = {int, float, str, bool}


def _coerce(key: str, value, expect):
    if expect is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expect in _SCALARS:
        if not isinstance(value, expect) or isinstance(value, bool) != (expect is bool):
            raise ConfigError(
                f"field {key!r} expects {expect.__name__}, "
                f"got {type(value).__name__} ({value!r})"
            )
        return value
    if expect is list:
        if not isinstance(value, list):
            raise ConfigError(f"field {key!r} expects a list, got {type(value).__name__}")
        return value
    if expect is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"field {key!r} expects a table, got {type(value).__name__}")
        return value
    raise AssertionError(f"unhandled schema type for {key!r}")


def merge_config(schema: dict[str, type], file_values: dict,
                 overrides: dict) -> dict:
    """defaults < file < flags, with unknown-key rejection."""
    unknown = set(file_values) - set(schema)
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    resolved: dict = {}
    for key, expect in schema.items():
        if key in overrides and overrides[key] is not None:
            resolved[key] = _coerce(key, overrides[key], expect)
        elif key in file_values:
            resolved[key] = _coerce(key, file_values[key], expect)
    return resolved


def resolve_seed(resolved: dict, default: int = 0) -> int:
    """Explicit seed, else the COBRA_LITE_SEED env var, else the default."""
    if "seed" in resolved:
        return int(resolved["seed"])
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR}={env!r} is not an integer") from exc
    return default


def write_run_json(out_dir: str | Path, subcommand: str, resolved: dict,
                   seed: int, version: str) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "run.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            {"subcommand": subcommand, "config": resolved, "seed": seed,
             "version": version},
            fh, indent=1, sort_keys=True,
        )
        fh.write("\n")
    return path
