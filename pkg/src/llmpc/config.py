"""YAML configuration loading with preset resolution.

A config file has up to four sections: ``system``, ``workload``, ``run`` and
``cost``.  ``system.preset``, ``workload.preset`` and ``cost.library`` name
data files in the preset directory; keys written next to a preset reference
override the preset's values.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import yaml

from llmpc.errors import ConfigError
from llmpc.parallelism import ParallelismConfig, parallelism_from_dict, validate_parallelism
from llmpc.sysdesc import SystemSpec, system_from_dict
from llmpc.workload import ModelConfig, RunConfig, model_from_dict, run_from_dict

PRESET_ENV = "LLMPC_PRESETS"
PRESET_KINDS = {"system": "accelerators", "workload": "models", "cost": "costlib"}


def preset_dir() -> Path:
    override = os.environ.get(PRESET_ENV)
    return Path(override) if override else Path(__file__).parent / "presets"


def parse_yaml(text: str, source: str = "<string>") -> dict[str, Any]:
    try:
        tree = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark else source
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"{where}: parse error: {problem}") from None
    if tree is None:
        return {}
    if not isinstance(tree, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    return tree


def read_yaml(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from None
    return parse_yaml(text, str(path))


def deep_merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(dict(base))
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), Mapping):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_preset(kind: str, name: str) -> dict[str, Any]:
    """Read ``presets/<kind>/<name>.yaml``."""
    path = preset_dir() / kind / f"{name}.yaml"
    if not path.is_file():
        available = sorted(p.stem for p in (preset_dir() / kind).glob("*.yaml"))
        raise ConfigError(f"unknown {kind} preset {name!r}; available: {', '.join(available)}")
    return read_yaml(path)


def resolve_presets(tree: Mapping[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(dict(tree))
    for section, kind in PRESET_KINDS.items():
        body = out.get(section)
        if not isinstance(body, Mapping):
            continue
        key = "library" if section == "cost" else "preset"
        name = body.get(key)
        if name is None:
            continue
        local = {k: v for k, v in body.items() if k != key}
        out[section] = deep_merge(load_preset(kind, str(name)), local)
    return out


def load_config_tree(path: str | Path) -> dict[str, Any]:
    return resolve_presets(read_yaml(path))


def set_key(tree: Mapping[str, Any], dotted: str, value: Any) -> dict[str, Any]:
    """Copy of ``tree`` with ``a.b.c`` set; list levels take integer indices."""
    out = copy.deepcopy(dict(tree))
    parts = dotted.split(".")
    node: Any = out
    try:
        for i, part in enumerate(parts[:-1]):
            nxt = parts[i + 1]
            if isinstance(node, list):
                node = node[int(part)]
                continue
            if part not in node or node[part] is None:
                node[part] = [] if nxt.isdigit() else {}
            node = node[part]
        last = parts[-1]
        if isinstance(node, list):
            node[int(last)] = value
        else:
            node[last] = value
    except (IndexError, ValueError, TypeError):
        raise ConfigError(f"cannot set {dotted!r}: path does not fit the config") from None
    return out


def fingerprint(tree: Mapping[str, Any]) -> str:
    blob = json.dumps(tree, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Config:
    system: SystemSpec
    model: ModelConfig
    run: RunConfig
    parallelism: ParallelismConfig
    cost: dict[str, Any]
    tree: dict[str, Any]

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.tree)


def config_from_tree(tree: Mapping[str, Any], validate: bool = True) -> Config:
    tree = resolve_presets(tree)
    for section in ("system", "workload", "run"):
        if not isinstance(tree.get(section), Mapping):
            raise ConfigError(f"missing section {section!r}")
    system = system_from_dict(tree["system"])
    model = model_from_dict(tree["workload"])
    run = run_from_dict(tree["run"])
    par = parallelism_from_dict(tree["run"].get("parallelism"))
    if validate:
        validate_parallelism(par, par.devices, model, run)
        if par.devices > system.total_devices:
            raise ConfigError(
                f"run.parallelism needs {par.devices} devices, system has {system.total_devices}")
    return Config(system, model, run, par, dict(tree.get("cost") or {}), dict(tree))


def load_config(path: str | Path, validate: bool = True) -> Config:
    return config_from_tree(read_yaml(path), validate)
