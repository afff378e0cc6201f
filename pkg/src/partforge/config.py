"""Flat key=value configuration with flag > environment > file precedence.

Environment overrides use the PARTFORGE_ prefix with the key upper-cased,
e.g. PARTFORGE_BATCH_SIZE=32. Every resolved value is logged to run.json
in the command's output directory.
"""
from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path
from typing import Optional

ENV_PREFIX = "PARTFORGE_"


class ConfigError(ValueError):
    pass


def load_kv_file(path) -> dict[str, str]:
    """Parse "key = value" lines; '#' starts a comment."""
    values: dict[str, str] = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: bad config line {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _coerce(value: str, target_type):
    if target_type is bool:
        lowered = value.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {value!r}")
    return target_type(value)


def resolve_dataclass(cls, file_path=None, flag_values: Optional[dict] = None,
                      environ=None):
    """Build a dataclass instance from file/env/flag layers.

    Unknown file keys raise; flag_values may hold extra non-dataclass keys
    (they are returned separately for the caller).
    """
    environ = os.environ if environ is None else environ
    fields = {f.name: f for f in dataclasses.fields(cls)}
    defaults = cls()
    layered: dict[str, object] = {}
    if file_path:
        for key, raw in load_kv_file(file_path).items():
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            layered[key] = _coerce(raw, type(getattr(defaults, key)))
    for name in fields:
        env_key = ENV_PREFIX + name.upper()
        if env_key in environ:
            layered[name] = _coerce(environ[env_key], type(getattr(defaults, name)))
    for key, value in (flag_values or {}).items():
        if value is None:
            continue
        if key in fields:
            layered[key] = value
    return cls(**layered)


def write_run_json(out_dir, command: str, resolved: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "config": resolved}
    (out / "run.json").write_text(json.dumps(payload, indent=2, sort_keys=True,
                                             default=str) + "\n", encoding="utf-8")
