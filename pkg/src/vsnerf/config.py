"""Run configuration: nested defaults, JSON files and dotted ``key=value`` overrides."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from .dataset import SceneSpec, random_scene
from .features import DistillConfig
from .trainer import TrainConfig

SEED_ENV = "VSNERF_SEED"


class ConfigError(ValueError):
    pass


def _dataclass_defaults(cls, skip=()) -> Dict[str, Any]:
    inst = cls()
    return {f.name: copy.deepcopy(asdict(inst)[f.name]) for f in fields(cls) if f.name not in skip}


def default_config() -> Dict[str, Any]:
    """The full tree of recognised keys with their defaults."""
    scene = _dataclass_defaults(SceneSpec)
    scene["random"] = True
    scene["look_at"] = list(scene["look_at"])
    distill = _dataclass_defaults(DistillConfig, skip=("seed",))
    distill.update(latent_dim=32, nuisance=1.0, noise=0.05, held_out_k=50)
    return {
        "seed": 0,
        "scene": scene,
        "data": {"n_eval": 2},
        "train": _dataclass_defaults(TrainConfig, skip=("seed",)),
        "distill": distill,
    }


def _check_type(key: str, default, value):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key!r} expects true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {key!r} expects an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} expects a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"config key {key!r} expects a string, got {value!r}")
    elif isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"config key {key!r} expects a list, got {value!r}")
    return value


def set_key(tree: Dict[str, Any], dotted: str, value) -> None:
    """Assign ``value`` at a dotted path; unknown keys raise :class:`ConfigError`."""
    *parents, last = dotted.split(".")
    node = tree
    for part in parents:
        node = node.get(part) if isinstance(node, dict) else None
        if not isinstance(node, dict):
            raise ConfigError(f"unknown config key {dotted!r}")
    prefix = ".".join(parents) + "." if parents else ""
    _merge_child(node, prefix, last, value)


def _merge_child(tree, prefix, key, value):
    dotted = prefix + key
    if key not in tree:
        raise ConfigError(f"unknown config key {dotted!r}")
    if isinstance(tree[key], dict):
        if not isinstance(value, dict):
            raise ConfigError(f"config key {dotted!r} is a section, not a value")
        for k, v in value.items():
            _merge_child(tree[key], dotted + ".", k, v)
    else:
        tree[key] = _check_type(dotted, tree[key], value)


def parse_override(text: str):
    """Split ``key=value``; the value is read as JSON when possible, else as a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def resolve(config_file: Optional[str] = None, overrides: Iterable[str] = (),
            flags: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Defaults, then the seed env var, then the file, then ``--set`` pairs, then flags."""
    tree = default_config()
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            tree["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from exc
    if config_file:
        try:
            doc = json.loads(Path(config_file).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {config_file} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {config_file} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {config_file} must hold a JSON object")
        for key, value in doc.items():
            _merge_child(tree, "", key, value)
    for text in overrides:
        set_key(tree, *parse_override(text))
    for key, value in (flags or {}).items():
        if value is not None:
            set_key(tree, key, value)
    return tree


def scene_spec(tree: Dict[str, Any]) -> SceneSpec:
    d = dict(tree["scene"])
    use_random = d.pop("random")
    if use_random:
        prims = random_scene(tree["seed"])
        d["spheres"] = [asdict(s) for s in prims.spheres]
        d["boxes"] = [asdict(b) for b in prims.boxes]
    return SceneSpec.from_dict(d)


def train_config(tree: Dict[str, Any]) -> TrainConfig:
    return TrainConfig(seed=tree["seed"], **tree["train"])


def distill_config(tree: Dict[str, Any]) -> DistillConfig:
    d = tree["distill"]
    names = {f.name for f in fields(DistillConfig)} - {"seed"}
    return DistillConfig(seed=tree["seed"], **{k: d[k] for k in names})
