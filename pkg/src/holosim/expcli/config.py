"""Experiment configuration file: one YAML document with world, members, dynamics, grid and llm sections."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from ..brains.llm import LlmEndpointConfig
from ..domain import DynamicsParams, InvalidConfig, SimConfig, WorldEnvironment

AXES = {
    "mgmt_mean_level": ("high", "low"),
    "func_mean_level": ("high", "low"),
    "mgmt_std_level": ("high", "medium", "low"),
    "func_std_level": ("high", "medium", "low"),
}

MEMBER_KEYS = ("n_members", "mgmt_mean_level", "func_mean_level", "mgmt_std_level", "func_std_level", "min_members", "max_members")
SCHEDULE_KEYS = ("tasks_per_week", "weeks")
LLM_KEYS = tuple(f.name for f in fields(LlmEndpointConfig) if f.name != "api_key")


@dataclass(frozen=True)
class GridSettings:
    base_seed: int = 42
    repetitions: int = 1
    axes: dict[str, tuple[str, ...]] = field(default_factory=lambda: dict(AXES))

    def __post_init__(self) -> None:
        if self.repetitions < 1:
            raise InvalidConfig("grid repetitions must be >= 1")
        unknown = set(self.axes) - set(AXES)
        if unknown:
            raise InvalidConfig(f"unknown grid axes {sorted(unknown)}")
        for name, levels in self.axes.items():
            if not levels or len(set(levels)) != len(levels):
                raise InvalidConfig(f"grid axis {name} needs distinct levels")
        object.__setattr__(self, "axes", {k: tuple(v) for k, v in self.axes.items()})

    def to_dict(self) -> dict[str, Any]:
        return {"base_seed": self.base_seed, "repetitions": self.repetitions, "axes": {k: list(v) for k, v in self.axes.items()}}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> GridSettings:
        d = dict(d)
        if "axes" in d:
            d["axes"] = {k: tuple(v) for k, v in d["axes"].items()}
        return cls(**d)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a config file holds. ``sim`` is the template for single runs and grid cells."""

    sim: SimConfig = field(default_factory=SimConfig)
    grid: GridSettings = field(default_factory=GridSettings)
    llm: LlmEndpointConfig = field(default_factory=LlmEndpointConfig)

    def to_dict(self) -> dict[str, Any]:
        sim = self.sim
        world = sim.world.to_dict()
        world.update({k: getattr(sim, k) for k in SCHEDULE_KEYS})
        return {
            "seed": sim.seed,
            "brain": sim.brain,
            "world": world,
            "members": {k: getattr(sim, k) for k in MEMBER_KEYS},
            "dynamics": sim.dynamics.to_dict(),
            "grid": self.grid.to_dict(),
            "llm": self.llm.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ExperimentConfig:
        d = dict(d or {})
        allowed = {"seed", "brain", "world", "members", "dynamics", "grid", "llm"}
        unknown = set(d) - allowed
        if unknown:
            raise InvalidConfig(f"unknown config sections {sorted(unknown)}")
        world = dict(d.get("world") or {})
        schedule = {k: world.pop(k) for k in SCHEDULE_KEYS if k in world}
        members = dict(d.get("members") or {})
        bad = set(members) - set(MEMBER_KEYS)
        if bad:
            raise InvalidConfig(f"unknown members keys {sorted(bad)}")
        llm = dict(d.get("llm") or {})
        bad = set(llm) - set(LLM_KEYS)
        if bad:
            raise InvalidConfig(f"unknown llm keys {sorted(bad)} (the api key comes from the environment)")
        try:
            sim = SimConfig(
                **{k: d[k] for k in ("seed", "brain") if k in d},
                **schedule,
                **members,
                world=WorldEnvironment.from_dict(world),
                dynamics=DynamicsParams.from_dict(d.get("dynamics") or {}),
            )
            return cls(sim, GridSettings.from_dict(d.get("grid") or {}), LlmEndpointConfig.from_env(**llm))
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from exc
        except ValueError as exc:
            if isinstance(exc, InvalidConfig):
                raise
            raise InvalidConfig(str(exc)) from exc


def dump_config(config: ExperimentConfig) -> str:
    header = "# holosim experiment configuration\n"
    return header + yaml.safe_dump(config.to_dict(), sort_keys=False, default_flow_style=False)


def load_config(path: str | Path) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise InvalidConfig(f"{path}: not valid YAML: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise InvalidConfig(f"{path}: top level must be a mapping")
    return ExperimentConfig.from_dict(data or {})


def write_default_config(path: str | Path) -> Path:
    path = Path(path)
    path.write_text(dump_config(ExperimentConfig()), encoding="utf-8")
    return path
