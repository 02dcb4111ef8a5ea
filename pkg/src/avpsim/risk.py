"""Runtime risk monitor: motion cues, detector consistency, fuzzy inference,
and a safety shield.

A cue generator stands in for a redundant depth/motion channel: it emits one
disc per physical object in sensor range regardless of class, so objects the
detector cannot classify still leave a footprint. The consistency features
compare cue area against detection boxes; a Mamdani fuzzy rule base maps
them to a risk level in [0,1]; the shield forces a latched full brake when
risk crosses the threshold.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .geometry import clamp, convex_intersection_area, wrap_angle
from .sensing import Detection, ground_truth_objects, occlusion_of
from .world import Command, EgoState, WorldState

RISK_THRESHOLD = 0.6
CUE_SIGMA = 0.3
DISTANCE_CAP = 20.0
CUE_OCCLUSION_GATE = 0.9  # fully hidden objects produce no cue
COVER_FRACTION = 0.5
CUE_POLYGON_SIDES = 16
CENTROID_POINTS = 1001
ASSOCIATION_SIGMAS = 2.0  # box dilation (in cue sigmas) for coverage overlap
FEATURE_EMA_ALPHA = 0.4
STANDSTILL = 1e-6


class RuleBaseError(ValueError):
    """Malformed fuzzy rule base."""


# --------------------------------------------------------------------------
# Cues.


@dataclass(frozen=True)
class CueConfig:
    sigma: float = CUE_SIGMA
    max_range: float = 20.0
    fov: float = 2.0 * math.pi
    occlusion_gate: float = CUE_OCCLUSION_GATE


@dataclass(frozen=True)
class Cue:
    x: float
    y: float
    radius: float
    motion_flag: bool
    confidence: float
    distance: float  # from the ego footprint, at generation time


@dataclass(frozen=True)
class CueFrame:
    cues: tuple[Cue, ...]

    def __len__(self) -> int:
        return len(self.cues)


def generate_cues(world: WorldState, cfg: CueConfig, stream: np.random.Generator) -> CueFrame:
    """One cue disc per physical object in FOV and range, class-blind.

    Positions are perturbed with the cue noise sigma; confidence decays with
    range and occlusion. Objects hidden beyond the occlusion gate emit
    nothing.
    """
    ego = world.ego
    footprint = ego.footprint()
    cues = []
    for obj in ground_truth_objects(world):
        dx, dy = obj.x - ego.x, obj.y - ego.y
        dist_center = math.hypot(dx, dy)
        if dist_center > cfg.max_range or dist_center <= obj.radius:
            continue
        if abs(wrap_angle(math.atan2(dy, dx) - ego.theta)) > 0.5 * cfg.fov:
            continue
        occ = occlusion_of(obj, world)
        if occ > cfg.occlusion_gate:
            continue
        nx = ny = 0.0
        if cfg.sigma > 0.0:
            nx, ny = stream.normal(0.0, cfg.sigma, 2)
        confidence = clamp((1.0 - occ) * (1.0 - dist_center / cfg.max_range), 0.0, 1.0)
        cues.append(
            Cue(
                x=obj.x + nx,
                y=obj.y + ny,
                radius=obj.radius,
                motion_flag=obj.speed > 1e-9,
                confidence=confidence,
                distance=max(0.0, footprint.signed_distance(obj.x, obj.y)),
            )
        )
    return CueFrame(cues=tuple(cues))


def _cue_polygon(cue: Cue) -> list[tuple[float, float]]:
    pts = []
    for i in range(CUE_POLYGON_SIDES):
        a = 2.0 * math.pi * (i + 0.5) / CUE_POLYGON_SIDES
        pts.append((cue.x + cue.radius * math.cos(a), cue.y + cue.radius * math.sin(a)))
    return pts


def _polygon_area(r: float) -> float:
    n = CUE_POLYGON_SIDES
    return 0.5 * n * r * r * math.sin(2.0 * math.pi / n)


def cue_coverage(cue: Cue, detections: list[Detection], sigma: float = CUE_SIGMA) -> float:
    """Best fraction of the cue disc covered by a single detection box.

    The box is dilated by a 2-sigma association gate: cue and detection are
    noisy reports of the same object, and raw-overlap association flickers
    on small objects.
    """
    if not detections:
        return 0.0
    poly = None
    area = _polygon_area(cue.radius)
    pad = ASSOCIATION_SIGMAS * sigma
    best = 0.0
    for det in detections:
        # circumcircle gate: disjoint shapes cannot contribute any overlap
        reach = cue.radius + math.hypot(det.box.half_length + pad, det.box.half_width + pad)
        if math.hypot(det.box.cx - cue.x, det.box.cy - cue.y) > reach:
            continue
        if poly is None:
            poly = _cue_polygon(cue)
        box = replace(det.box, half_length=det.box.half_length + pad,
                      half_width=det.box.half_width + pad)
        best = max(best, convex_intersection_area(box.corners(), poly) / area)
    if best >= 1.0 - 1e-12:  # swallow clipping roundoff on a full cover
        return 1.0
    return clamp(best, 0.0, 1.0)


@dataclass(frozen=True)
class ConsistencyFeatures:
    uncovered_ratio: float  # uncovered cue area over total cue area
    nearest_uncovered_distance: float  # capped when every cue is covered
    cue_count_mismatch: int

    def as_inputs(self) -> dict[str, float]:
        return {
            "uncovered_ratio": self.uncovered_ratio,
            "distance": self.nearest_uncovered_distance,
            "mismatch": float(self.cue_count_mismatch),
        }


def consistency(
    frame: CueFrame,
    detections: list[Detection],
    sigma: float = CUE_SIGMA,
    distance_cap: float = DISTANCE_CAP,
) -> ConsistencyFeatures:
    """Compare cue regions against the detector's boxes."""
    mismatch = max(0, len(frame.cues) - len(detections))
    if not frame.cues:
        return ConsistencyFeatures(0.0, distance_cap, mismatch)
    total = 0.0
    uncovered_area = 0.0
    nearest = distance_cap
    for cue in frame.cues:
        area = _polygon_area(cue.radius)
        frac = cue_coverage(cue, detections, sigma)
        total += area
        uncovered_area += area * (1.0 - frac)
        if frac < COVER_FRACTION:
            nearest = min(nearest, cue.distance)
    return ConsistencyFeatures(
        uncovered_ratio=clamp(uncovered_area / total, 0.0, 1.0),
        nearest_uncovered_distance=nearest,
        cue_count_mismatch=mismatch,
    )


# --------------------------------------------------------------------------
# Fuzzy rule base and Mamdani inference.


@dataclass(frozen=True)
class FuzzySet:
    label: str
    a: float
    b: float
    c: float

    def __post_init__(self):
        if not (self.a <= self.b <= self.c) or self.a == self.c:
            raise RuleBaseError(f"set {self.label!r}: need a <= b <= c with a < c")

    def membership(self, x: float) -> float:
        if x == self.b:
            return 1.0
        if x <= self.a or x >= self.c:
            return 0.0
        if x < self.b:
            return (x - self.a) / (self.b - self.a)
        return (self.c - x) / (self.c - self.b)

    def profile(self, xs: np.ndarray) -> np.ndarray:
        if self.b > self.a:
            left = (xs - self.a) / (self.b - self.a)
        else:
            left = np.where(xs >= self.b, 1.0, 0.0)
        if self.c > self.b:
            right = (self.c - xs) / (self.c - self.b)
        else:
            right = np.where(xs <= self.b, 1.0, 0.0)
        return np.clip(np.minimum(left, right), 0.0, 1.0)


@dataclass(frozen=True)
class FuzzyVariable:
    name: str
    sets: tuple[FuzzySet, ...]

    def set(self, label: str) -> FuzzySet:
        for s in self.sets:
            if s.label == label:
                return s
        raise RuleBaseError(f"variable {self.name!r} has no set {label!r}")


@dataclass(frozen=True)
class FuzzyRule:
    antecedent: tuple[tuple[str, str], ...]  # (variable, label) conjunction
    consequent: str


@dataclass(frozen=True)
class FuzzyRuleBase:
    variables: tuple[FuzzyVariable, ...]
    rules: tuple[FuzzyRule, ...]
    output: str = "risk"

    def __post_init__(self):
        if not self.rules:
            raise RuleBaseError("rule base needs at least one rule")
        names = {v.name for v in self.variables}
        if self.output not in names:
            raise RuleBaseError(f"missing output variable {self.output!r}")
        out = self.variable(self.output)
        for rule in self.rules:
            out.set(rule.consequent)
            for var, label in rule.antecedent:
                self.variable(var).set(label)

    def variable(self, name: str) -> FuzzyVariable:
        for v in self.variables:
            if v.name == name:
                return v
        raise RuleBaseError(f"unknown variable {name!r}")

    @staticmethod
    def from_dict(data: dict) -> "FuzzyRuleBase":
        try:
            variables = tuple(
                FuzzyVariable(
                    name=v["name"],
                    sets=tuple(FuzzySet(s["label"], s["a"], s["b"], s["c"]) for s in v["sets"]),
                )
                for v in data["variables"]
            )
            rules = tuple(
                FuzzyRule(
                    antecedent=tuple(sorted(r["if"].items())),
                    consequent=r["then"],
                )
                for r in data["rules"]
            )
        except (KeyError, TypeError) as exc:
            raise RuleBaseError(f"malformed rule base: {exc}") from exc
        return FuzzyRuleBase(variables=variables, rules=rules)

    def to_dict(self) -> dict:
        return {
            "variables": [
                {"name": v.name,
                 "sets": [{"label": s.label, "a": s.a, "b": s.b, "c": s.c} for s in v.sets]}
                for v in self.variables
            ],
            "rules": [
                {"if": dict(r.antecedent), "then": r.consequent} for r in self.rules
            ],
        }


def load_rulebase(path: str | Path | None = None) -> FuzzyRuleBase:
    """Load a rule base file; the packaged default when no path is given."""
    if path is None:
        text = resources.files("avpsim").joinpath("data/rulebase.json").read_text()
    else:
        text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RuleBaseError(f"rule base is not valid JSON: {exc}") from exc
    return FuzzyRuleBase.from_dict(data)


def infer_risk(feat: ConsistencyFeatures, rb: FuzzyRuleBase) -> float:
    """Mamdani inference: min activation, clipped sets, max aggregation,
    centroid defuzzification on [0,1]. No firing rule means zero risk."""
    return mamdani(feat.as_inputs(), rb)


def mamdani(inputs: dict[str, float], rb: FuzzyRuleBase) -> float:
    out_var = rb.variable(rb.output)
    xs = np.linspace(0.0, 1.0, CENTROID_POINTS)
    agg = np.zeros_like(xs)
    fired = False
    for rule in rb.rules:
        strength = 1.0
        for var, label in rule.antecedent:
            if var not in inputs:
                raise RuleBaseError(f"no input for rule variable {var!r}")
            strength = min(strength, rb.variable(var).set(label).membership(inputs[var]))
            if strength == 0.0:
                break
        if strength <= 0.0:
            continue
        fired = True
        mu = np.minimum(strength, out_var.set(rule.consequent).profile(xs))
        agg = np.maximum(agg, mu)
    weight = float(agg.sum())
    if not fired or weight == 0.0:
        return 0.0
    return float((xs * agg).sum() / weight)


# --------------------------------------------------------------------------
# Shield.


def shield(
    cmd: Command,
    risk: float,
    threshold: float,
    ego: EgoState,
    latched: bool = False,
    brake_a: float = -7.0,
    t_cycle: float = 0.1,
) -> tuple[Command, bool]:
    """Latched full-brake override on high risk; returns (command, latch).

    A command that is already a full brake passes through unchanged, which
    gives the AEB attribution priority when both would stop the car.
    """
    if latched and abs(ego.v) <= STANDSTILL and risk < threshold:
        latched = False
    if risk >= threshold:
        latched = True
    if not latched or cmd.a_cmd <= brake_a:
        return cmd, latched
    # full brake above 0.7 m/s; below that, land exactly on standstill
    # instead of driving v through zero for a whole held cycle. Unlike the
    # AEB trigger, high risk does not vanish at v = 0, so re-issuing -7
    # at standstill would ratchet the car backwards.
    a = max(brake_a, -ego.v / t_cycle)
    return Command(a_cmd=a, delta_cmd=cmd.delta_cmd, source="shield"), latched


@dataclass
class RiskMonitor:
    """Per-episode runtime monitor: cues, smoothed features, risk, shield.

    The per-frame consistency features are EMA-smoothed before inference so
    a single noisy cue frame cannot flip the shield; a persistent
    inconsistency still converges within a couple of control cycles.
    """

    rulebase: FuzzyRuleBase
    cue_cfg: CueConfig = field(default_factory=CueConfig)
    threshold: float = RISK_THRESHOLD
    shield_enabled: bool = True
    brake_a: float = -7.0
    t_cycle: float = 0.1
    ema_alpha: float = FEATURE_EMA_ALPHA
    _ratio: float | None = None
    _distance: float | None = None
    _latched: bool = False
    activations: int = 0

    def step(
        self,
        world: WorldState,
        detections: list[Detection],
        stream: np.random.Generator,
        cmd: Command,
    ) -> tuple[Command, "RiskSample"]:
        frame = generate_cues(world, self.cue_cfg, stream)
        raw = consistency(frame, detections, self.cue_cfg.sigma)
        self._ratio = _ema(self._ratio, raw.uncovered_ratio, self.ema_alpha)
        self._distance = _ema(self._distance, raw.nearest_uncovered_distance, self.ema_alpha)
        smoothed = ConsistencyFeatures(self._ratio, self._distance, raw.cue_count_mismatch)
        risk = infer_risk(smoothed, self.rulebase)
        if self.shield_enabled:
            was = self._latched
            cmd, self._latched = shield(
                cmd, risk, self.threshold, world.ego, self._latched,
                self.brake_a, self.t_cycle,
            )
            if self._latched and not was:
                self.activations += 1
        return cmd, RiskSample(risk=risk, raw=raw, smoothed=smoothed,
                               cue_count=len(frame), shield_latched=self._latched)

    @property
    def shield_latched(self) -> bool:
        return self._latched


def _ema(prev: float | None, value: float, alpha: float) -> float:
    if prev is None:
        return value
    return alpha * value + (1.0 - alpha) * prev


@dataclass(frozen=True)
class RiskSample:
    risk: float
    raw: ConsistencyFeatures
    smoothed: ConsistencyFeatures
    cue_count: int
    shield_latched: bool
