"""Run configuration: nested dataclasses loaded from JSON, with unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .envs import ENVIRONMENTS, DynamicsMod
from .errors import ContractError
from .train import GAIL_REWARD_FORMS, PPOConfig, SailConfig

ALGORITHMS = ("sail", "bc", "gail_lite", "action_vae_bc")


class ConfigError(ContractError):
    """A config file is malformed; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"config key '{key}': {message}")
        self.key = key


@dataclass
class EnvConfig:
    id: str = "point-mass"
    mod: dict = field(default_factory=dict)
    horizon: int | None = None

    def validate(self, path: str) -> None:
        if self.id not in ENVIRONMENTS:
            raise ConfigError(f"{path}.id", f"unknown environment {self.id!r}; choose from {sorted(ENVIRONMENTS)}")
        try:
            DynamicsMod.from_dict(self.mod)
        except ContractError as exc:
            raise ConfigError(f"{path}.mod", str(exc)) from exc
        if self.horizon is not None and self.horizon < 1:
            raise ConfigError(f"{path}.horizon", "must be >= 1")


@dataclass
class DemoConfig:
    """Either a demoset file or a recipe for collecting scripted-expert demos."""

    path: str | None = None
    n: int = 5
    seed: int = 0
    expert_mod: dict = field(default_factory=dict)

    def validate(self, path: str) -> None:
        if self.n < 1:
            raise ConfigError(f"{path}.n", "must be >= 1")
        try:
            DynamicsMod.from_dict(self.expert_mod)
        except ContractError as exc:
            raise ConfigError(f"{path}.expert_mod", str(exc)) from exc


@dataclass
class BaselineConfig:
    bc_epochs: int = 300
    gail_disc_steps: int = 50
    gail_reward_form: str = "neg_log_one_minus_d"
    action_vae_epochs: int = 500

    def validate(self, path: str) -> None:
        if self.gail_reward_form not in GAIL_REWARD_FORMS:
            raise ConfigError(f"{path}.gail_reward_form", f"choose from {list(GAIL_REWARD_FORMS)}")


@dataclass
class RunConfig:
    algorithm: str = "sail"
    env: EnvConfig = field(default_factory=EnvConfig)
    demos: DemoConfig = field(default_factory=DemoConfig)
    sail: SailConfig = field(default_factory=SailConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    seed: int | None = None
    out: str = "runs/default"

    def validate(self) -> RunConfig:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError("algorithm", f"unknown algorithm {self.algorithm!r}; choose from {list(ALGORITHMS)}")
        self.env.validate("env")
        self.demos.validate("demos")
        self.baselines.validate("baselines")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_OPTIONAL_TYPES = {"int": int, "str": str, "float": float, "list": list}


def _check_type(key: str, value, default, annotation: str = ""):
    """Loose type check against the default's type (ints are accepted for floats).

    Fields defaulting to None are checked against the first name in their
    ``X | None`` annotation.
    """
    if value is None:
        return value
    if default is None:
        base = _OPTIONAL_TYPES.get(str(annotation).split("|")[0].split("[")[0].strip())
        if base is None:
            return value
        default = base()
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(key, f"expected {type(default).__name__}, got {type(value).__name__}")
    return value


def build(cls, data: dict, prefix: str = ""):
    """Instantiate dataclass ``cls`` from a nested dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(prefix or "<root>", f"expected an object, got {type(data).__name__}")
    template = cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in fields:
            raise ConfigError(path, "unknown key")
        default = getattr(template, key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = build(type(default), value, path)
        else:
            kwargs[key] = _check_type(path, value, default, fields[key].type)
    try:
        return cls(**kwargs)
    except ContractError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(prefix or "<root>", str(exc)) from exc
    except TypeError as exc:
        raise ConfigError(prefix or "<root>", str(exc)) from exc


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from exc
    return build(RunConfig, data).validate()


def config_from_dict(data: dict) -> RunConfig:
    return build(RunConfig, data).validate()


__all__ = ["RunConfig", "EnvConfig", "DemoConfig", "BaselineConfig", "ConfigError", "load_config",
           "config_from_dict", "build", "ALGORITHMS", "PPOConfig", "SailConfig"]
