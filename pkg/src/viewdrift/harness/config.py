"""Loading experiment configuration from YAML or JSON files."""
from __future__ import annotations

import math
import os
from dataclasses import fields
from pathlib import Path

import yaml

from ..attack import AttackConfig, LossWeights
from ..errors import InvalidInputError
from ..surrogate import EotRanges
from .experiments import ExperimentConfig

OUT_ENV = "VIEWDRIFT_OUT"


def _pick(cls, data: dict, where: str) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise InvalidInputError(f"unknown keys in {where}: {sorted(unknown)}")
    return dict(data)


def _directions(spec):
    if isinstance(spec, int):
        if spec <= 0:
            raise InvalidInputError("direction count must be positive")
        return tuple((math.cos(2 * math.pi * i / spec), math.sin(2 * math.pi * i / spec))
                     for i in range(spec))
    out = []
    for x, y in spec:
        n = math.hypot(x, y)
        if n == 0:
            raise InvalidInputError("zero direction vector")
        out.append((x / n, y / n))
    return tuple(out)


def attack_config(data: dict | None) -> AttackConfig:
    data = dict(data or {})
    weights = LossWeights(**_pick(LossWeights, data.pop("weights", {}) or {}, "attack.weights"))
    eot = EotRanges(**_pick(EotRanges, data.pop("eot", {}) or {}, "attack.eot"))
    return AttackConfig(weights=weights, eot=eot, **_pick(AttackConfig, data, "attack"))


# verb-specific sections kept out of ExperimentConfig itself
EXTRA_SECTIONS = ("scenarios", "sweep", "ablate", "transfer", "training_size", "grid")


def experiment_config(data: dict | None, out_dir: str | None = None) -> tuple[ExperimentConfig, dict]:
    """Build the config plus the verb-specific sections of the mapping."""
    data = dict(data or {})
    extras = {k: data.pop(k) for k in EXTRA_SECTIONS if k in data}
    attack = attack_config(data.pop("attack", None))
    grid = extras.get("grid") or {}
    if "directions" in grid:
        data["directions"] = _directions(grid["directions"])
    if "steps" in grid:
        data["step_sizes"] = tuple(float(s) for s in grid["steps"])
    for key in ("seeds", "detector_seeds", "pipelines"):
        if key in data:
            data[key] = tuple(data[key])
    data = _pick(ExperimentConfig, data, "config")
    if out_dir is not None:
        data["out_dir"] = str(out_dir)
    return ExperimentConfig(attack=attack, **data), extras


def load_config(path) -> dict:
    """Parse a YAML or JSON file (JSON is a YAML subset) into a mapping."""
    if path is None:
        return {}
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise InvalidInputError("configuration must be a mapping")
    return data


def resolve_out_dir(cli_value: str | None) -> Path:
    """The output-directory override variable wins over the command-line flag."""
    env = os.environ.get(OUT_ENV)
    return Path(env or cli_value or "viewdrift-out")
