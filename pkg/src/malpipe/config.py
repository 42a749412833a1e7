"""Declarative training configuration in TOML.

Example::

    [split]
    validation_fraction = 0.5
    seed = 7

    [family]
    top_k = 20

    [pipeline]
    layout_version = 1
    min_stage_samples = 200
    min_class_samples = 2
    quarantine_floor = 200

    [stage.default]
    iterations = 100
    learning_rate = 0.1

    [stage.family]
    max_leaves = 63

    [grid]
    learning_rate = [0.05, 0.1]

    [paths]
    sidecar = "labels.tsv"

Unknown sections or keys are errors. ``[stage.default]`` applies to every
stage and the per-stage tables override it.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dataset import SplitSpec
from .gbdt import TrainParams
from .pipeline import STAGES, PipelineConfig
from .vectorizer import LAYOUT_VERSION

_PARAM_KEYS = {f.name for f in fields(TrainParams)}
_SECTIONS = {
    "split": {"validation_fraction", "seed"},
    "family": {"top_k"},
    "pipeline": {"layout_version", "min_stage_samples", "min_class_samples", "quarantine_floor"},
    "paths": {"jsonl", "sidecar", "model", "report"},
}


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    layout_version: int = LAYOUT_VERSION
    paths: dict[str, str] = field(default_factory=dict)


def _check_keys(table: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"[{where}]: unknown key(s) {', '.join(unknown)}")


def _int(value: Any, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where} must be an integer")
    return value


def _params(table: dict, base: TrainParams, where: str) -> TrainParams:
    if not isinstance(table, dict):
        raise ConfigError(f"[{where}] must be a table")
    _check_keys(table, _PARAM_KEYS, where)
    values = {f.name: getattr(base, f.name) for f in fields(TrainParams)}
    values.update(table)
    try:
        return TrainParams(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def from_dict(doc: dict, overrides: Optional[dict] = None) -> Config:
    """Validate a parsed document; ``overrides`` holds flag values that win over the file.

    Override keys: ``seed``, ``validation_fraction``, ``family_top_k``,
    ``min_stage_samples`` and any :class:`TrainParams` field (applied to
    every stage).
    """
    doc = dict(doc)
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    _check_keys(doc, set(_SECTIONS) | {"stage", "grid"}, "top level")
    for name, allowed in _SECTIONS.items():
        table = doc.get(name, {})
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a table")
        _check_keys(table, allowed, name)

    split = doc.get("split", {})
    fraction = overrides.get("validation_fraction", split.get("validation_fraction", 0.5))
    seed = _int(overrides.get("seed", split.get("seed", 0)), "split.seed")
    try:
        split_spec = SplitSpec(float(fraction), seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[split]: {exc}") from exc

    stages = doc.get("stage", {})
    if not isinstance(stages, dict):
        raise ConfigError("[stage] must be a table of stage tables")
    _check_keys(stages, set(STAGES) | {"default"}, "stage")
    param_overrides = {k: v for k, v in overrides.items() if k in _PARAM_KEYS}
    default = _params(stages.get("default", {}), TrainParams(), "stage.default")
    params = {}
    for stage in STAGES:
        p = _params(stages.get(stage, {}), default, f"stage.{stage}")
        params[stage] = _params(param_overrides, p, "flags") if param_overrides else p

    grid = doc.get("grid", {})
    if not isinstance(grid, dict):
        raise ConfigError("[grid] must be a table")
    _check_keys(grid, _PARAM_KEYS, "grid")
    for key, values in grid.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid.{key} must be a nonempty list")
        for v in values:
            _params({key: v}, TrainParams(), "grid")

    pipe = doc.get("pipeline", {})
    layout_version = _int(pipe.get("layout_version", LAYOUT_VERSION), "pipeline.layout_version")
    if layout_version != LAYOUT_VERSION:
        raise ConfigError(f"layout version {layout_version} is not supported (this build: {LAYOUT_VERSION})")
    top_k = _int(overrides.get("family_top_k", doc.get("family", {}).get("top_k", 20)), "family.top_k")
    floors = {
        key: _int(overrides.get(key, pipe.get(key, default_value)), f"pipeline.{key}")
        for key, default_value in (("min_stage_samples", 200), ("min_class_samples", 2), ("quarantine_floor", 200))
    }
    if top_k < 1 or min(floors.values()) < 1:
        raise ConfigError("family.top_k and the sample floors must be positive")

    paths = doc.get("paths", {})
    for key, value in paths.items():
        if not isinstance(value, str):
            raise ConfigError(f"paths.{key} must be a string")

    cfg = PipelineConfig(split=split_spec, params=params, family_top_k=top_k, grid=dict(grid), **floors)
    return Config(cfg, layout_version, dict(paths))


def load(path=None, overrides: Optional[dict] = None) -> Config:
    if path is None:
        return from_dict({}, overrides)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = from_dict(doc, overrides)
    # relative paths in the file are relative to the file
    base = Path(path).parent
    cfg.paths = {k: str(base / v) for k, v in cfg.paths.items()}
    return cfg
