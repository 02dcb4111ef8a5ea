"""Campaign configuration: one JSON document that fixes file inputs, stack
toggles and run settings, plus the hash that stamps every trace produced
under it. Command-line flags override individual fields.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .episode import EpisodeConfig, StackConfig
from .risk import load_rulebase
from .scenarios import (
    FunctionalScenario,
    OddSpec,
    RequirementParams,
    load_functional_scenario,
    load_odd,
    walkout_scenario,
)
from .sensing import SensorConfig
from .stl import Requirement, load_requirements, requirement_library


class ConfigError(ValueError):
    """Malformed or inconsistent campaign configuration."""


_SENSOR_KEYS = {
    "perfect", "sigma", "dropout_base", "occlusion_dropout_gain",
    "known_classes", "max_range", "fov", "n_rays",
}


@dataclass(frozen=True)
class CampaignConfig:
    """Inputs and toggles for a verification campaign.

    Paths are optional; None falls back to the packaged defaults (walk-out
    scenario template, built-in requirement library and rule base, default
    operating limits).
    """

    odd_path: str | None = None
    scenario_path: str | None = None
    requirements_path: str | None = None
    rulebase_path: str | None = None
    aeb_enabled: bool = True
    shield_enabled: bool = True
    ground_truth_aeb: bool = False
    dt: float = 0.05
    t_max: float = 60.0
    seeds: tuple[int, ...] = (0,)
    sensor: dict = field(default_factory=dict)
    requirement_params: RequirementParams = field(default_factory=RequirementParams)

    def __post_init__(self) -> None:
        if self.dt <= 0.0:
            raise ConfigError("dt must be positive")
        if self.t_max <= 0.0:
            raise ConfigError("t_max must be positive")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if any(int(s) != s for s in self.seeds):
            raise ConfigError("seeds must be integers")
        unknown = set(self.sensor) - _SENSOR_KEYS
        if unknown:
            raise ConfigError(f"unknown sensor fields: {sorted(unknown)}")

    def to_dict(self) -> dict:
        return {
            "odd_path": self.odd_path,
            "scenario_path": self.scenario_path,
            "requirements_path": self.requirements_path,
            "rulebase_path": self.rulebase_path,
            "aeb_enabled": self.aeb_enabled,
            "shield_enabled": self.shield_enabled,
            "ground_truth_aeb": self.ground_truth_aeb,
            "dt": self.dt,
            "t_max": self.t_max,
            "seeds": list(self.seeds),
            "sensor": dict(sorted(self.sensor.items())),
            "requirement_params": self.requirement_params.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CampaignConfig":
        if not isinstance(data, dict):
            raise ConfigError("campaign config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        kwargs = dict(data)
        if "seeds" in kwargs:
            kwargs["seeds"] = tuple(kwargs["seeds"])
        if "requirement_params" in kwargs:
            kwargs["requirement_params"] = RequirementParams.from_dict(kwargs["requirement_params"])
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_campaign(path) -> CampaignConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = CampaignConfig.from_dict(data)
    # relative input paths are resolved against the config file location
    base = path.parent
    updates = {}
    for name in ("odd_path", "scenario_path", "requirements_path", "rulebase_path"):
        value = getattr(cfg, name)
        if value is not None and not Path(value).is_absolute():
            updates[name] = str(base / value)
    return replace(cfg, **updates) if updates else cfg


def store_campaign(cfg: CampaignConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def apply_overrides(cfg: CampaignConfig, **overrides) -> CampaignConfig:
    """Replace individual fields; None values mean `keep the config value`."""
    updates = {k: v for k, v in overrides.items() if v is not None}
    unknown = set(updates) - {f.name for f in fields(CampaignConfig)}
    if unknown:
        raise ConfigError(f"unknown config overrides: {sorted(unknown)}")
    if "seeds" in updates:
        updates["seeds"] = tuple(updates["seeds"])
    return replace(cfg, **updates) if updates else cfg


def config_hash(cfg: CampaignConfig) -> str:
    """Stable digest of the canonical config document."""
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


# --------------------------------------------------------------------------
# Resolved objects.


def resolve_odd(cfg: CampaignConfig) -> OddSpec:
    return load_odd(cfg.odd_path) if cfg.odd_path else OddSpec()


def resolve_scenario(cfg: CampaignConfig) -> FunctionalScenario:
    if cfg.scenario_path:
        return load_functional_scenario(cfg.scenario_path)
    return walkout_scenario()


def resolve_requirements(cfg: CampaignConfig) -> dict[str, Requirement]:
    if cfg.requirements_path:
        reqs = load_requirements(cfg.requirements_path)
        return {r.name: r for r in reqs}
    return requirement_library(cfg.requirement_params)


def _sensor_config(cfg: CampaignConfig) -> SensorConfig:
    spec = dict(cfg.sensor)
    perfect = spec.pop("perfect", False)
    if "known_classes" in spec:
        spec["known_classes"] = frozenset(spec["known_classes"])
    if perfect:
        base = SensorConfig.perfect()
        return replace(base, **spec) if spec else base
    return SensorConfig(**spec) if spec else SensorConfig()


def stack_config(cfg: CampaignConfig) -> StackConfig:
    return StackConfig(
        sensor=_sensor_config(cfg),
        params=cfg.requirement_params,
        aeb_enabled=cfg.aeb_enabled,
        shield_enabled=cfg.shield_enabled,
        ground_truth_aeb=cfg.ground_truth_aeb,
        rulebase=load_rulebase(cfg.rulebase_path) if cfg.rulebase_path else None,
    )


def episode_config(cfg: CampaignConfig) -> EpisodeConfig:
    return EpisodeConfig(dt=cfg.dt, t_max=cfg.t_max, config_hash=config_hash(cfg))
