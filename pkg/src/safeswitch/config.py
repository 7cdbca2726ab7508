"""Scenario config files: loading, canonical serialization, hashing.

Configs are YAML mappings (sections of typed scalars and lists), chosen for
diff-friendliness; the schema is documented in docs/config.md and enforced
by the scenario builders with key-path diagnostics.  Serialization is
canonical (sorted keys), so parse -> serialize -> parse is the identity on
the data and the config hash is stable.
"""

from __future__ import annotations

import hashlib
import importlib.resources
import json
from pathlib import Path
from typing import Any, Mapping

import yaml

from .scenarios import ConfigError

__all__ = ["load_config", "serialize_config", "config_hash", "resolve_config_path"]

BUILTIN_PREFIX = "builtin:"


def resolve_config_path(spec: str) -> Path:
    """Resolve a --config argument; ``builtin:<name>`` maps to a shipped file."""
    if spec.startswith(BUILTIN_PREFIX):
        name = spec[len(BUILTIN_PREFIX):]
        ref = importlib.resources.files("safeswitch") / "configs" / f"{name}.yaml"
        with importlib.resources.as_file(ref) as p:
            if not p.exists():
                raise ConfigError(f"no builtin config named '{name}'")
            return Path(p)
    return Path(spec)


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"cannot parse {path}{where}: {exc.problem}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config root must be a mapping")
    return doc


def serialize_config(cfg: Mapping[str, Any]) -> str:
    return yaml.safe_dump(dict(cfg), sort_keys=True, default_flow_style=False)


def config_hash(cfg: Mapping[str, Any]) -> str:
    canonical = json.dumps(cfg, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()
