"""Operating-domain definition, scenario templates and the scenario database.

A FunctionalScenario bundles a parking-lot map, a cast of actor roles and the
parameter ranges that a search may vary. Concretizing it (by seed or by
genome) yields a ConcreteScenario: a fully numeric test case that can be
simulated and stored in a JSON database.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence
from zlib import crc32

import numpy as np

from .geometry import Rect


class ScenarioFormatError(ValueError):
    """Raised when a scenario, ODD or template file violates the schema."""


class ConfigurationError(ValueError):
    """Raised when inputs are structurally valid but unusable (empty range, blocked bay)."""


def rng_stream(seed: int, label: str) -> np.random.Generator:
    """Independent generator for (seed, label); stable across processes."""
    return np.random.default_rng(np.random.SeedSequence([seed, crc32(label.encode())]))


def _check_fields(data: dict, required: dict, context: str) -> None:
    unknown = set(data) - set(required)
    if unknown:
        raise ScenarioFormatError(f"{context}: unknown field(s) {sorted(unknown)}")
    missing = set(required) - set(data)
    if missing:
        raise ScenarioFormatError(f"{context}: missing field(s) {sorted(missing)}")
    for name, kinds in required.items():
        if not isinstance(data[name], kinds):
            raise ScenarioFormatError(f"{context}: field {name!r} has wrong type")


_NUM = (int, float)


@dataclass(frozen=True)
class OddSpec:
    """Geometric and dynamic limits the system is designed for."""

    lot_length_min: float = 5.0
    lot_width_min: float = 2.3
    lane_width_min_oneway: float = 3.0
    lane_width_min_twoway: float = 5.0
    ego_v_min: float = -1.0
    ego_v_max: float = 2.8
    ego_a_min: float = -7.0
    ego_a_max: float = 2.0
    speed_limit: float = 2.778
    ped_speed_max: float = 3.0
    known_object_classes: frozenset[str] = frozenset({"pedestrian", "car"})

    def __post_init__(self) -> None:
        if not (self.ego_v_min < 0.0 < self.ego_v_max):
            raise ValueError("ego velocity bounds must straddle zero")
        if not (self.ego_a_min < 0.0 < self.ego_a_max):
            raise ValueError("ego acceleration bounds must straddle zero")
        for name in ("lot_length_min", "lot_width_min", "lane_width_min_oneway", "lane_width_min_twoway"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in _ODD_FIELDS}
        out["known_object_classes"] = sorted(self.known_object_classes)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "OddSpec":
        _check_fields(data, {k: _NUM for k in _ODD_FIELDS} | {"known_object_classes": list}, "odd")
        kwargs = dict(data)
        kwargs["known_object_classes"] = frozenset(kwargs["known_object_classes"])
        return cls(**kwargs)


_ODD_FIELDS = (
    "lot_length_min",
    "lot_width_min",
    "lane_width_min_oneway",
    "lane_width_min_twoway",
    "ego_v_min",
    "ego_v_max",
    "ego_a_min",
    "ego_a_max",
    "speed_limit",
    "ped_speed_max",
)


@dataclass(frozen=True)
class RequirementParams:
    """Tolerances and timing constants the formal requirements refer to."""

    d_safety: float = 4.0
    e_detect: float = 0.5
    e_local: float = 0.2
    e_track: float = 0.3
    t_safety: float = 1.5
    t_cycle: float = 0.1

    def __post_init__(self) -> None:
        for name in ("d_safety", "e_detect", "e_local", "e_track", "t_safety", "t_cycle"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be strictly positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("d_safety", "e_detect", "e_local", "e_track", "t_safety", "t_cycle")}

    @classmethod
    def from_dict(cls, data: dict) -> "RequirementParams":
        _check_fields(data, {k: _NUM for k in cls().to_dict()}, "requirement_params")
        return cls(**data)


@dataclass(frozen=True)
class ParameterRange:
    """Closed interval a single scenario parameter may take."""

    name: str
    lo: float
    hi: float
    kind: str = "continuous"

    def __post_init__(self) -> None:
        if self.lo > self.hi:
            raise ValueError(f"range {self.name}: lo > hi")
        if self.kind not in ("continuous", "integer"):
            raise ValueError(f"range {self.name}: unknown kind {self.kind!r}")

    def decode(self, u: float) -> float:
        """Map a normalized coordinate in [0, 1] into the range."""
        value = self.lo + u * (self.hi - self.lo)
        if self.kind == "integer":
            return float(int(round(value)))
        return value

    def contains(self, value: float) -> bool:
        return self.lo <= value <= self.hi

    def to_dict(self) -> dict:
        return {"name": self.name, "lo": self.lo, "hi": self.hi, "kind": self.kind}

    @classmethod
    def from_dict(cls, data: dict) -> "ParameterRange":
        _check_fields(data, {"name": str, "lo": _NUM, "hi": _NUM, "kind": str}, "parameter_range")
        return cls(**data)


@dataclass(frozen=True)
class ParkingMap:
    """Rectangular lot with one straight driving lane and a row of bays.

    The lane spans the full lot length; bays sit above the lane's far edge and
    open onto it. The drop-off zone is the lane segment where runs begin.
    """

    lot: Rect
    lane: Rect
    bays: tuple[Rect, ...]
    drop_off: Rect
    lane_oneway: bool = True

    @property
    def lane_center_y(self) -> float:
        return 0.5 * (self.lane.y0 + self.lane.y1)

    def bay(self, index: int) -> Rect:
        if not 0 <= index < len(self.bays):
            raise ConfigurationError(f"bay index {index} out of range 0..{len(self.bays) - 1}")
        return self.bays[index]

    def to_dict(self) -> dict:
        return {
            "lot": _rect_dict(self.lot),
            "lane": _rect_dict(self.lane),
            "bays": [_rect_dict(b) for b in self.bays],
            "drop_off": _rect_dict(self.drop_off),
            "lane_oneway": self.lane_oneway,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ParkingMap":
        _check_fields(
            data,
            {"lot": dict, "lane": dict, "bays": list, "drop_off": dict, "lane_oneway": bool},
            "map_layout",
        )
        return cls(
            lot=_rect_from(data["lot"]),
            lane=_rect_from(data["lane"]),
            bays=tuple(_rect_from(b) for b in data["bays"]),
            drop_off=_rect_from(data["drop_off"]),
            lane_oneway=data["lane_oneway"],
        )


def _rect_dict(r: Rect) -> dict:
    return {"x0": r.x0, "y0": r.y0, "x1": r.x1, "y1": r.y1}


def _rect_from(data: dict) -> Rect:
    _check_fields(data, {"x0": _NUM, "y0": _NUM, "x1": _NUM, "y1": _NUM}, "rect")
    return Rect(**data)


@dataclass(frozen=True)
class ActorRole:
    """A cast member of a functional scenario.

    behavior "walkout" actors wait inside a bay and cross the lane once the
    ego comes within their trigger distance; "static" actors never move.
    spawn_setback measures from the lane's bay-side edge into the bay
    (negative values place the actor on the lane itself). Roles with
    searchable=True take their motion parameters from the search ranges;
    fixed roles carry them inline.
    """

    name: str
    class_label: str
    radius: float
    behavior: str
    spawn_bay: int
    spawn_setback: float
    searchable: bool = False
    walk_speed: float = 0.0
    trigger_distance: float = 0.0
    heading_offset: float = 0.0

    def __post_init__(self) -> None:
        if self.radius <= 0.0:
            raise ValueError(f"role {self.name}: radius must be positive")
        if self.behavior not in ("walkout", "static"):
            raise ValueError(f"role {self.name}: unknown behavior {self.behavior!r}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in _ROLE_FIELDS}

    @classmethod
    def from_dict(cls, data: dict) -> "ActorRole":
        _check_fields(
            data,
            {
                "name": str,
                "class_label": str,
                "radius": _NUM,
                "behavior": str,
                "spawn_bay": int,
                "spawn_setback": _NUM,
                "searchable": bool,
                "walk_speed": _NUM,
                "trigger_distance": _NUM,
                "heading_offset": _NUM,
            },
            "actor_role",
        )
        return cls(**data)


_ROLE_FIELDS = (
    "name",
    "class_label",
    "radius",
    "behavior",
    "spawn_bay",
    "spawn_setback",
    "searchable",
    "walk_speed",
    "trigger_distance",
    "heading_offset",
)


@dataclass(frozen=True)
class FunctionalScenario:
    """Scenario template: map, actor cast and the open parameter ranges."""

    name: str
    map_layout: ParkingMap
    actor_roles: tuple[ActorRole, ...]
    parameter_ranges: tuple[ParameterRange, ...]
    goal_bay: int = 0
    parked_vehicle_bays: tuple[int, ...] = ()
    ego_cruise: float = 2.5

    def range_named(self, name: str) -> ParameterRange:
        for r in self.parameter_ranges:
            if r.name == name:
                return r
        raise ConfigurationError(f"no parameter range named {name!r}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "map_layout": self.map_layout.to_dict(),
            "actor_roles": [r.to_dict() for r in self.actor_roles],
            "parameter_ranges": [r.to_dict() for r in self.parameter_ranges],
            "goal_bay": self.goal_bay,
            "parked_vehicle_bays": list(self.parked_vehicle_bays),
            "ego_cruise": self.ego_cruise,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FunctionalScenario":
        _check_fields(
            data,
            {
                "name": str,
                "map_layout": dict,
                "actor_roles": list,
                "parameter_ranges": list,
                "goal_bay": int,
                "parked_vehicle_bays": list,
                "ego_cruise": _NUM,
            },
            "functional_scenario",
        )
        return cls(
            name=data["name"],
            map_layout=ParkingMap.from_dict(data["map_layout"]),
            actor_roles=tuple(ActorRole.from_dict(r) for r in data["actor_roles"]),
            parameter_ranges=tuple(ParameterRange.from_dict(r) for r in data["parameter_ranges"]),
            goal_bay=data["goal_bay"],
            parked_vehicle_bays=tuple(data["parked_vehicle_bays"]),
            ego_cruise=data["ego_cruise"],
        )


def load_functional_scenario(path) -> FunctionalScenario:
    return FunctionalScenario.from_dict(_load_json(path))


def store_functional_scenario(fs: FunctionalScenario, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(fs.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass(frozen=True)
class PedestrianParams:
    """Concrete motion parameters for one pedestrian-like actor."""

    spawn_bay: int
    walk_speed: float
    trigger_distance: float
    heading_offset: float

    def to_dict(self) -> dict:
        return {
            "spawn_bay": self.spawn_bay,
            "walk_speed": self.walk_speed,
            "trigger_distance": self.trigger_distance,
            "heading_offset": self.heading_offset,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PedestrianParams":
        _check_fields(
            data,
            {"spawn_bay": int, "walk_speed": _NUM, "trigger_distance": _NUM, "heading_offset": _NUM},
            "pedestrian",
        )
        return cls(**data)


@dataclass(frozen=True)
class ConcreteScenario:
    """A fully instantiated test case."""

    scenario_id: str
    seed: int
    ego_start_s: float
    goal_bay: int
    pedestrians: tuple[PedestrianParams, ...]
    parked_vehicle_bays: tuple[int, ...] = ()
    perception_noise_scale: float = 1.0
    ego_cruise: float = 2.5

    def parameter_values(self) -> dict[str, float]:
        """Flattened scalar view used by the search and the miners."""
        out = {"ego_start_s": self.ego_start_s, "perception_noise_scale": self.perception_noise_scale}
        for i, ped in enumerate(self.pedestrians):
            prefix = "" if len(self.pedestrians) == 1 else f"ped{i}_"
            out[f"{prefix}walk_speed"] = ped.walk_speed
            out[f"{prefix}trigger_distance"] = ped.trigger_distance
            out[f"{prefix}heading_offset"] = ped.heading_offset
        return out

    def to_dict(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "seed": self.seed,
            "ego_start_s": self.ego_start_s,
            "goal_bay": self.goal_bay,
            "pedestrians": [p.to_dict() for p in self.pedestrians],
            "parked_vehicle_bays": list(self.parked_vehicle_bays),
            "perception_noise_scale": self.perception_noise_scale,
            "ego_cruise": self.ego_cruise,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ConcreteScenario":
        _check_fields(
            data,
            {
                "scenario_id": str,
                "seed": int,
                "ego_start_s": _NUM,
                "goal_bay": int,
                "pedestrians": list,
                "parked_vehicle_bays": list,
                "perception_noise_scale": _NUM,
                "ego_cruise": _NUM,
            },
            "scenario",
        )
        kwargs = dict(data)
        kwargs["pedestrians"] = tuple(PedestrianParams.from_dict(p) for p in data["pedestrians"])
        kwargs["parked_vehicle_bays"] = tuple(data["parked_vehicle_bays"])
        return cls(**kwargs)


# Search ranges bind to the searchable role; ego_start_s binds to the ego.
SEARCH_PARAM_NAMES = ("walk_speed", "trigger_distance", "ego_start_s", "heading_offset")


def default_map(n_bays: int = 16) -> ParkingMap:
    """Straight one-way lot: lane along y in [0, 3], bays opening onto it."""
    bay_w, bay_d = 2.5, 6.0
    lane = Rect(0.0, 0.0, n_bays * bay_w, 3.0)
    bays = tuple(Rect(i * bay_w, 3.0, (i + 1) * bay_w, 3.0 + bay_d) for i in range(n_bays))
    lot = Rect(0.0, 0.0, lane.x1, 3.0 + bay_d)
    drop_off = Rect(0.0, 0.0, 4.0, 3.0)
    return ParkingMap(lot=lot, lane=lane, bays=bays, drop_off=drop_off, lane_oneway=True)


def default_ranges() -> tuple[ParameterRange, ...]:
    return (
        ParameterRange("walk_speed", 0.5, 2.0),
        ParameterRange("trigger_distance", 2.0, 15.0),
        ParameterRange("ego_start_s", 0.0, 10.0),
        ParameterRange("heading_offset", -0.3, 0.3),
    )


def walkout_scenario() -> FunctionalScenario:
    """Two pedestrians emerge from bays ahead of the ego; the second one is
    deep in its bay (occluded by a parked vehicle) and parameterized for
    search."""
    return FunctionalScenario(
        name="walkout",
        map_layout=default_map(),
        actor_roles=(
            ActorRole(
                name="pedestrian_1",
                class_label="pedestrian",
                radius=0.3,
                behavior="walkout",
                spawn_bay=7,
                spawn_setback=0.45,
                walk_speed=1.8,
                trigger_distance=15.0,
                heading_offset=0.0,
            ),
            ActorRole(
                name="pedestrian_2",
                class_label="pedestrian",
                radius=0.3,
                behavior="walkout",
                spawn_bay=8,
                spawn_setback=4.9,
                searchable=True,
            ),
        ),
        parameter_ranges=default_ranges(),
        goal_bay=11,
        parked_vehicle_bays=(2, 6),
        ego_cruise=2.5,
    )


def animal_scenario() -> FunctionalScenario:
    """A small unknown-class animal sits on the driveway ahead of the ego."""
    return FunctionalScenario(
        name="animal-on-driveway",
        map_layout=default_map(),
        actor_roles=(
            ActorRole(
                name="animal_1",
                class_label="animal",
                radius=0.25,
                behavior="static",
                spawn_bay=7,
                spawn_setback=-1.5,
            ),
        ),
        parameter_ranges=(ParameterRange("ego_start_s", 0.0, 10.0),),
        goal_bay=11,
        parked_vehicle_bays=(2, 6),
        ego_cruise=2.5,
    )


def sample_scenario(fs: FunctionalScenario, seed: int) -> ConcreteScenario:
    """Draw one concrete scenario uniformly from the template's ranges."""
    for rng in fs.parameter_ranges:
        if rng.lo > rng.hi:
            raise ConfigurationError(f"empty range {rng.name}")
    stream = rng_stream(seed, f"scenario:{fs.name}")
    genome = stream.random(len(fs.parameter_ranges))
    return decode_genome(fs, genome, scenario_id=f"{fs.name}-{seed}", seed=seed)


def decode_genome(
    fs: FunctionalScenario, genome: Sequence[float], scenario_id: str, seed: int
) -> ConcreteScenario:
    """Map a normalized genome (one gene per parameter range) to a scenario."""
    if len(genome) != len(fs.parameter_ranges):
        raise ConfigurationError(
            f"genome length {len(genome)} != {len(fs.parameter_ranges)} ranges"
        )
    values = {
        rng.name: rng.decode(min(max(float(g), 0.0), 1.0))
        for rng, g in zip(fs.parameter_ranges, genome)
    }
    ego_start_s = values.pop("ego_start_s", 0.0)
    pedestrians = []
    for role in fs.actor_roles:
        if role.searchable:
            pedestrians.append(
                PedestrianParams(
                    spawn_bay=role.spawn_bay,
                    walk_speed=values.get("walk_speed", role.walk_speed),
                    trigger_distance=values.get("trigger_distance", role.trigger_distance),
                    heading_offset=values.get("heading_offset", role.heading_offset),
                )
            )
        else:
            pedestrians.append(
                PedestrianParams(
                    spawn_bay=role.spawn_bay,
                    walk_speed=role.walk_speed,
                    trigger_distance=role.trigger_distance,
                    heading_offset=role.heading_offset,
                )
            )
    for role in fs.actor_roles:
        if role.spawn_bay == fs.goal_bay:
            raise ConfigurationError(f"role {role.name} spawns in the goal bay")
    return ConcreteScenario(
        scenario_id=scenario_id,
        seed=seed,
        ego_start_s=ego_start_s,
        goal_bay=fs.goal_bay,
        pedestrians=tuple(pedestrians),
        parked_vehicle_bays=fs.parked_vehicle_bays,
        ego_cruise=fs.ego_cruise,
    )


def validate_odd(spec: OddSpec, layout: ParkingMap) -> list[str]:
    """Check the map against the domain's geometric minima.

    Returns human-readable violation strings; empty means conformant.
    """
    if not layout.bays:
        raise ConfigurationError("map has no bays")
    violations = []
    for i, bay in enumerate(layout.bays):
        length = max(bay.width, bay.height)
        width = min(bay.width, bay.height)
        if length < spec.lot_length_min:
            violations.append(
                f"bay {i}: length {length:.2f} m < minimum {spec.lot_length_min:.2f} m"
            )
        if width < spec.lot_width_min:
            violations.append(
                f"bay {i}: width {width:.2f} m < minimum {spec.lot_width_min:.2f} m"
            )
    lane_width = layout.lane.height
    needed = spec.lane_width_min_oneway if layout.lane_oneway else spec.lane_width_min_twoway
    if lane_width < needed:
        kind = "one-way" if layout.lane_oneway else "two-way"
        violations.append(f"lane: width {lane_width:.2f} m < {kind} minimum {needed:.2f} m")
    return violations


def check_in_odd(sc: ConcreteScenario, spec: OddSpec) -> tuple[bool, list[str]]:
    """True iff every scenario parameter stays within the domain bounds."""
    violations = []
    if sc.ego_cruise > spec.ego_v_max:
        violations.append(
            f"ego cruise demand {sc.ego_cruise:.3f} m/s exceeds maximum {spec.ego_v_max:.3f} m/s"
        )
    for i, ped in enumerate(sc.pedestrians):
        if ped.walk_speed > spec.ped_speed_max:
            violations.append(
                f"pedestrian {i}: walk speed {ped.walk_speed:.3f} m/s exceeds "
                f"maximum {spec.ped_speed_max:.3f} m/s"
            )
        if ped.walk_speed < 0.0:
            violations.append(f"pedestrian {i}: negative walk speed")
    return (not violations, violations)


def _load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioFormatError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc


def load_database(path) -> list[ConcreteScenario]:
    data = _load_json(path)
    if not isinstance(data, list):
        raise ScenarioFormatError(f"{path}: expected a JSON array of scenarios")
    out = []
    for i, entry in enumerate(data):
        try:
            out.append(ConcreteScenario.from_dict(entry))
        except ScenarioFormatError as exc:
            raise ScenarioFormatError(f"{path}: scenario #{i}: {exc}") from exc
    return out


def store_database(scenarios: Sequence[ConcreteScenario], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([sc.to_dict() for sc in scenarios], fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_odd(path) -> OddSpec:
    return OddSpec.from_dict(_load_json(path))


def store_odd(spec: OddSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def with_noise_scale(sc: ConcreteScenario, scale: float) -> ConcreteScenario:
    return replace(sc, perception_noise_scale=scale)


def spawn_point(layout: ParkingMap, role: ActorRole) -> tuple[float, float]:
    """World position where a role starts: centered in its bay's width, set
    back from the lane edge by spawn_setback (negative: on the lane)."""
    bay = layout.bay(role.spawn_bay)
    cx = 0.5 * (bay.x0 + bay.x1)
    return (cx, layout.lane.y1 + role.spawn_setback)


def walk_heading(layout: ParkingMap, role: ActorRole, heading_offset: float) -> float:
    """Walk-out actors head across the lane (toward smaller y here)."""
    return -math.pi / 2.0 + heading_offset
