"""Run configuration: one JSON file, strictly validated.

Unknown keys are errors (reported with their dotted path), every field is
typed, and the resolved config (defaults expanded) is written into each
run directory so runs are self-describing.  Fields left unset inherit
sensible derivations: the model's class count follows the data spec and
the discriminator's feature width follows the model width.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .adversarial import BankConfig
from .distill import DistillConfig
from .metrics import EvalConfig
from .models import NetConfig
from .teacher import DataSpec, TeacherConfig


class ConfigError(ValueError):
    """Malformed configuration; message carries the offending key path."""


@dataclass
class SyntheticConfig:
    n: int = 20000
    steps: int = 32
    guidance_scale: float = 4.0


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs"
    data: DataSpec = field(default_factory=DataSpec)
    model: NetConfig = field(default_factory=NetConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_SECTION_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(value, target_type, path: str):
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported value {value!r}")


def _build_section(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    valid = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in valid:
            raise ConfigError(f"unknown key {path}.{key}")
        ftype = valid[key].type
        if isinstance(value, list):
            elem = float if "float" in ftype else int
            kwargs[key] = tuple(_coerce(v, elem, f"{path}.{key}[{i}]")
                                for i, v in enumerate(value))
        elif "float" in ftype:
            kwargs[key] = _coerce(value, float, f"{path}.{key}")
        elif "bool" in ftype:
            kwargs[key] = _coerce(value, bool, f"{path}.{key}")
        elif "int" in ftype:
            kwargs[key] = _coerce(value, int, f"{path}.{key}")
        elif "str" in ftype:
            kwargs[key] = _coerce(value, str, f"{path}.{key}")
        else:
            raise ConfigError(f"{path}.{key}: unsupported field type {ftype}")
    try:
        return cls(**kwargs), set(kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("top level: expected an object")
    top_kwargs: dict = {}
    given: dict[str, set] = {}
    for key, value in data.items():
        if key == "seed":
            top_kwargs["seed"] = _coerce(value, int, "seed")
        elif key == "out_dir":
            top_kwargs["out_dir"] = _coerce(value, str, "out_dir")
        elif key in _SECTION_TYPES and key not in ("seed", "out_dir"):
            cls = {f.name: f.default_factory for f in fields(RunConfig)}[key]
            section, keys = _build_section(cls, value, key)
            top_kwargs[key] = section
            given[key] = keys
        else:
            raise ConfigError(f"unknown key {key}")
    cfg = RunConfig(**top_kwargs)
    return _derive(cfg, given, data)


def _derive(cfg: RunConfig, given: dict[str, set], raw: dict) -> RunConfig:
    model_given = given.get("model", set())
    bank_given = given.get("bank", set())
    if "n_classes" not in model_given:
        cfg.model = dataclasses.replace(cfg.model, n_classes=cfg.data.n_classes)
    if "feat_dim" not in bank_given:
        cfg.bank = dataclasses.replace(cfg.bank, feat_dim=cfg.model.width)
    for tap in cfg.bank.taps:
        if tap >= cfg.model.depth:
            raise ConfigError(f"bank.taps: tap {tap} >= model.depth "
                              f"{cfg.model.depth}")
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return config_from_dict(data)


def default_config() -> RunConfig:
    return config_from_dict({})


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
