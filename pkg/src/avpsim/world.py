"""Deterministic fixed-step 2D world: ego dynamics, pedestrians, traces.

The ego is a kinematic bicycle referenced at the rear axle; pedestrians are
discs with a waiting -> walking -> stopped walk-out behavior. Everything here
is purely functional over explicit state, so episodes are reproducible and
can run concurrently without shared state.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .geometry import OrientedRect, Rect, clamp, wrap_angle
from .scenarios import (
    ConcreteScenario,
    ConfigurationError,
    FunctionalScenario,
    OddSpec,
    ParkingMap,
    PedestrianParams,
    spawn_point,
    walk_heading,
)

# Vehicle geometry (4.4 m x 1.8 m body, rear-axle reference).
WHEELBASE = 2.5
HALF_WIDTH = 0.9
FRONT_OVERHANG = 1.0
REAR_OVERHANG = 0.9
DELTA_MAX = math.pi / 4

DT_DEFAULT = 0.05

# Walk-out actors step fully off the lane: center past the far edge by
# radius plus this margin. Stopping exactly on the edge would leave the
# disc inside the emergency-braking corridor forever.
PED_STOP_MARGIN = 0.55

WAITING = "waiting"
WALKING = "walking"
STOPPED = "stopped"


class SimulationFault(RuntimeError):
    """Non-finite state encountered; carries the trace recorded so far."""

    def __init__(self, message: str, trace: "Trace | None" = None):
        super().__init__(message)
        self.trace = trace


@dataclass(slots=True)
class Command:
    """One control-cycle output, zero-order-held between cycles."""

    a_cmd: float = 0.0
    delta_cmd: float = 0.0
    source: str = "planner"  # planner | aeb | shield

    @property
    def brake_flag(self) -> bool:
        return self.source != "planner"


@dataclass(slots=True)
class EgoState:
    x: float
    y: float
    theta: float
    v: float = 0.0
    a: float = 0.0
    delta: float = 0.0
    wheelbase: float = WHEELBASE
    half_width: float = HALF_WIDTH
    front_overhang_length: float = FRONT_OVERHANG
    rear_overhang_length: float = REAR_OVERHANG

    @property
    def length(self) -> float:
        return self.rear_overhang_length + self.wheelbase + self.front_overhang_length

    @property
    def front_extent(self) -> float:
        """Rear axle to front bumper."""
        return self.wheelbase + self.front_overhang_length

    def footprint(self) -> OrientedRect:
        half_length = 0.5 * self.length
        ahead = half_length - self.rear_overhang_length
        return OrientedRect(
            self.x + ahead * math.cos(self.theta),
            self.y + ahead * math.sin(self.theta),
            half_length,
            self.half_width,
            self.theta,
        )


def ego_step(e: EgoState, cmd: Command, dt: float, odd: OddSpec) -> EgoState:
    """Kinematic bicycle update with actuation and velocity clamping.

    Position and heading integrate the pre-update velocity (explicit Euler);
    the speed then integrates the clamped acceleration.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    a = clamp(cmd.a_cmd, odd.ego_a_min, odd.ego_a_max)
    delta = clamp(cmd.delta_cmd, -DELTA_MAX, DELTA_MAX)
    return EgoState(
        x=e.x + e.v * math.cos(e.theta) * dt,
        y=e.y + e.v * math.sin(e.theta) * dt,
        theta=wrap_angle(e.theta + e.v / e.wheelbase * math.tan(delta) * dt),
        v=clamp(e.v + a * dt, odd.ego_v_min, odd.ego_v_max),
        a=a,
        delta=delta,
        wheelbase=e.wheelbase,
        half_width=e.half_width,
        front_overhang_length=e.front_overhang_length,
        rear_overhang_length=e.rear_overhang_length,
    )


@dataclass(slots=True)
class PedestrianState:
    id: str
    x: float
    y: float
    speed: float
    heading: float
    radius: float
    class_label: str
    mode: str
    stop_y: float = -math.inf  # far lane edge crossing line for walk-outs

    def velocity(self) -> tuple[float, float]:
        if self.mode != WALKING:
            return (0.0, 0.0)
        return (self.speed * math.cos(self.heading), self.speed * math.sin(self.heading))


def pedestrian_step(
    p: PedestrianState, ego: EgoState, params: PedestrianParams, dt: float
) -> PedestrianState:
    """Advance one pedestrian by dt.

    waiting -> walking once the ego comes within trigger_distance (closed
    bound, measured center to rear axle); walking advances along the fixed
    heading; -> stopped once the disc has fully crossed the far lane edge.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    if p.mode == WAITING:
        if math.hypot(ego.x - p.x, ego.y - p.y) <= params.trigger_distance:
            return _with(p, mode=WALKING)
        return p
    if p.mode == WALKING:
        x = p.x + p.speed * math.cos(p.heading) * dt
        y = p.y + p.speed * math.sin(p.heading) * dt
        mode = STOPPED if y <= p.stop_y else WALKING
        return _with(p, x=x, y=y, mode=mode)
    return p


def _with(p: PedestrianState, **changes) -> PedestrianState:
    fields = dict(
        id=p.id, x=p.x, y=p.y, speed=p.speed, heading=p.heading,
        radius=p.radius, class_label=p.class_label, mode=p.mode, stop_y=p.stop_y,
    )
    fields.update(changes)
    return PedestrianState(**fields)


@dataclass(slots=True)
class CollisionEvent:
    actor_id: str
    ego_v_at_impact: float
    t: float


@dataclass
class WorldState:
    time: float
    ego: EgoState
    pedestrians: list[PedestrianState]
    parked_vehicles: list[Rect]
    map: ParkingMap
    collision: CollisionEvent | None = None


def collision_check(w: WorldState) -> CollisionEvent | None:
    """Deepest pedestrian-disc/ego-footprint contact, if any (closed boundary).

    The winner is chosen by penetration depth with position tie-breaks, so
    the result does not depend on the order pedestrians are listed in.
    """
    footprint = w.ego.footprint()
    best = None
    best_key = None
    for p in w.pedestrians:
        gap = footprint.signed_distance(p.x, p.y) - p.radius
        if gap <= 0.0:
            key = (gap, p.x, p.y)
            if best_key is None or key < best_key:
                best, best_key = p, key
    if best is None:
        return None
    return CollisionEvent(actor_id=best.id, ego_v_at_impact=w.ego.v, t=w.time)


# Parked vehicles share the ego's body dimensions and park nose-in, close
# to the lane edge.
PARKED_GAP = 0.2


def parked_vehicle_rect(bay: Rect) -> Rect:
    cx = 0.5 * (bay.x0 + bay.x1)
    length = REAR_OVERHANG + WHEELBASE + FRONT_OVERHANG
    return Rect(cx - HALF_WIDTH, bay.y0 + PARKED_GAP, cx + HALF_WIDTH, bay.y0 + PARKED_GAP + length)


def build_world(sc: ConcreteScenario, fs: FunctionalScenario) -> WorldState:
    """Instantiate the initial world for a concrete scenario.

    The ego starts at rest on the lane centerline at ego_start_s; walk-out
    actors wait inside their bays, static actors stand where placed.
    """
    layout = fs.map_layout
    if len(sc.pedestrians) != len(fs.actor_roles):
        raise ConfigurationError(
            f"scenario has {len(sc.pedestrians)} pedestrian parameter sets "
            f"for {len(fs.actor_roles)} actor roles"
        )
    if sc.goal_bay in sc.parked_vehicle_bays:
        raise ConfigurationError(f"goal bay {sc.goal_bay} is occupied by a parked vehicle")
    layout.bay(sc.goal_bay)

    parked = [parked_vehicle_rect(layout.bay(i)) for i in sc.parked_vehicle_bays]

    pedestrians = []
    for role, params in zip(fs.actor_roles, sc.pedestrians):
        if role.spawn_bay == sc.goal_bay:
            raise ConfigurationError(f"role {role.name} spawns in the goal bay")
        x, y = spawn_point(layout, role)
        for rect in parked:
            if rect.distance_to_point(x, y) <= role.radius:
                raise ConfigurationError(f"role {role.name} spawns inside a parked vehicle")
        if role.behavior == "static":
            pedestrians.append(
                PedestrianState(
                    id=role.name, x=x, y=y, speed=0.0, heading=0.0,
                    radius=role.radius, class_label=role.class_label, mode=STOPPED,
                )
            )
        else:
            pedestrians.append(
                PedestrianState(
                    id=role.name,
                    x=x,
                    y=y,
                    speed=params.walk_speed,
                    heading=walk_heading(layout, role, params.heading_offset),
                    radius=role.radius,
                    class_label=role.class_label,
                    mode=WAITING,
                    stop_y=layout.lane.y0 - role.radius - PED_STOP_MARGIN,
                )
            )

    ego = EgoState(x=sc.ego_start_s, y=layout.lane_center_y, theta=0.0)
    return WorldState(time=0.0, ego=ego, pedestrians=pedestrians, parked_vehicles=parked, map=layout)


# --------------------------------------------------------------------------
# Trace recording and serialization.

CSV_COLUMNS = (
    "t",
    "ego_x",
    "ego_y",
    "ego_theta",
    "ego_v",
    "ego_a",
    "ego_delta",
    "cmd_a",
    "cmd_delta",
    "min_ped_dist",
    "ttc",
    "risk",
    "brake_flag",
    "collision",
    "n_detections",
)

# Per-sample signals the requirement library needs beyond the CSV columns;
# they ride in the sidecar JSON.
AUX_SIGNALS = (
    "loc_error",
    "cross_track",
    "cycle_time",
    "uc01_margin",
    "path_clearance_margin",
    "aeb_due",
)

SIGNAL_CAP = 10.0  # min_ped_dist / ttc are capped to keep fitness bounded


@dataclass(slots=True)
class TraceSample:
    t: float
    ego_x: float
    ego_y: float
    ego_theta: float
    ego_v: float
    ego_a: float
    ego_delta: float
    cmd_a: float
    cmd_delta: float
    min_ped_dist: float
    ttc: float
    risk: float
    brake_flag: int
    collision: int
    n_detections: int
    loc_error: float = 0.0
    cross_track: float = 0.0
    cycle_time: float = 0.0
    uc01_margin: float = 1.0
    path_clearance_margin: float = 0.0
    aeb_due: float = 0.0
    brake_source: str = "planner"


@dataclass
class Trace:
    dt: float
    scenario_id: str = ""
    seed: int = 0
    config_hash: str = ""
    samples: list[TraceSample] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return self.samples[-1].t if self.samples else 0.0

    def column(self, name: str) -> list[float]:
        return [float(getattr(s, name)) for s in self.samples]

    def signals(self) -> dict[str, list[float]]:
        """Numeric per-sample signals (CSV columns plus sidecar extras)."""
        names = CSV_COLUMNS + AUX_SIGNALS
        return {name: self.column(name) for name in names}

    def collided(self) -> bool:
        return any(s.collision for s in self.samples)


def _format(value: float) -> str:
    return format(float(value), ".9g")


def write_trace(trace: Trace, csv_path, sidecar_path=None) -> None:
    """Write the 15-column CSV and its JSON sidecar (ids, events, extras)."""
    csv_path = Path(csv_path)
    lines = [",".join(CSV_COLUMNS)]
    for s in trace.samples:
        row = [_format(getattr(s, col)) for col in CSV_COLUMNS]
        lines.append(",".join(row))
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    sidecar = {
        "scenario_id": trace.scenario_id,
        "seed": trace.seed,
        "config_hash": trace.config_hash,
        "dt": trace.dt,
        "events": trace.events,
        "aux": {name: [getattr(s, name) for s in trace.samples] for name in AUX_SIGNALS},
        "brake_source": [s.brake_source for s in trace.samples],
    }
    path = Path(sidecar_path) if sidecar_path else csv_path.with_suffix(".json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


class TraceFormatError(ValueError):
    """Raised when a trace CSV or sidecar does not match the schema."""


def read_trace(csv_path, sidecar_path=None) -> Trace:
    """Load a trace CSV (and sidecar, if present) back into a Trace."""
    csv_path = Path(csv_path)
    text = csv_path.read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise TraceFormatError(f"{csv_path}: empty trace file")
    header = tuple(lines[0].split(","))
    if header != CSV_COLUMNS:
        raise TraceFormatError(f"{csv_path}: unexpected header {header!r}")

    sidecar = None
    path = Path(sidecar_path) if sidecar_path else csv_path.with_suffix(".json")
    if path.exists():
        with open(path, "r", encoding="utf-8") as fh:
            sidecar = json.load(fh)

    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(CSV_COLUMNS):
            raise TraceFormatError(f"{csv_path}:{lineno}: expected {len(CSV_COLUMNS)} fields")
        try:
            values = [float(p) for p in parts]
        except ValueError as exc:
            raise TraceFormatError(f"{csv_path}:{lineno}: {exc}") from exc
        kwargs = dict(zip(CSV_COLUMNS, values))
        for name in ("brake_flag", "collision", "n_detections"):
            kwargs[name] = int(kwargs[name])
        samples.append(TraceSample(**kwargs))

    if sidecar is not None:
        aux = sidecar.get("aux", {})
        for name in AUX_SIGNALS:
            series = aux.get(name)
            if series is None:
                continue
            if len(series) != len(samples):
                raise TraceFormatError(f"{path}: aux signal {name!r} length mismatch")
            for s, value in zip(samples, series):
                setattr(s, name, float(value))
        sources = sidecar.get("brake_source")
        if sources is not None:
            for s, value in zip(samples, sources):
                s.brake_source = str(value)

    if sidecar is not None and "dt" in sidecar:
        dt = float(sidecar["dt"])
    elif len(samples) >= 2:
        dt = samples[1].t - samples[0].t
    else:
        raise TraceFormatError(f"{csv_path}: cannot infer dt (no sidecar, single sample)")

    return Trace(
        dt=dt,
        scenario_id=(sidecar or {}).get("scenario_id", ""),
        seed=int((sidecar or {}).get("seed", 0)),
        config_hash=(sidecar or {}).get("config_hash", ""),
        samples=samples,
        events=(sidecar or {}).get("events", []),
    )
