"""Occlusion- and noise-aware sensor model plus detection-quality metrics.

Stands in for a learned 3D detector: ground truth is filtered by field of
view, range, class knowledge and ray-cast occlusion, then perturbed by
Gaussian position noise with a per-object dropout chance. Detection quality
is scored with the IoGT / distance-criticality blend, and the per-sample
pedestrian-detection requirement is evaluated here.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .geometry import (
    OrientedRect,
    clamp,
    convex_intersection_area,
    dist_point_to_segment,
    segment_disc_param,
    segment_rect_param,
    wrap_angle,
)
from .scenarios import RequirementParams
from .world import WorldState

N_RAYS = 32
MATCH_GATE = 2.0  # detection-to-object association radius


@dataclass(frozen=True)
class SensorConfig:
    fov: float = 2.0 * math.pi
    max_range: float = 20.0
    sigma: float = 0.05
    dropout_base: float = 0.05
    occlusion_dropout_gain: float = 0.9
    known_classes: frozenset[str] = frozenset({"pedestrian", "car"})
    n_rays: int = N_RAYS
    v_tol: float = 0.5
    ema_alpha: float = 0.3

    def __post_init__(self) -> None:
        if not 0.0 < self.fov <= 2.0 * math.pi:
            raise ValueError("fov must be in (0, 2*pi]")
        if self.sigma < 0.0:
            raise ValueError("sigma must be non-negative")
        for name in ("dropout_base", "occlusion_dropout_gain"):
            if not 0.0 <= getattr(self, name):
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.dropout_base <= 1.0:
            raise ValueError("dropout_base must be a probability")

    @classmethod
    def perfect(cls, known_classes=frozenset({"pedestrian", "car"})) -> "SensorConfig":
        return cls(sigma=0.0, dropout_base=0.0, occlusion_dropout_gain=0.0,
                   known_classes=frozenset(known_classes))

    def with_known_classes(self, labels) -> "SensorConfig":
        return replace(self, known_classes=frozenset(labels))


@dataclass(frozen=True)
class GroundTruthObject:
    id: str
    class_label: str
    x: float
    y: float
    box: OrientedRect
    speed: float
    radius: float  # disc radius for agents, inscribed radius for vehicles


@dataclass(slots=True)
class Detection:
    class_label: str
    x: float
    y: float
    box: OrientedRect
    v_est: float = 0.0  # speed estimate; (vx_est, vy_est) carry its direction
    vx_est: float = 0.0
    vy_est: float = 0.0
    v_tracked: bool = False
    score: float = 1.0
    track_id: int = -1


def ground_truth_objects(world: WorldState) -> list[GroundTruthObject]:
    """Everything a perfect sensor could report: agents and parked vehicles."""
    out = []
    for p in world.pedestrians:
        out.append(
            GroundTruthObject(
                id=p.id,
                class_label=p.class_label,
                x=p.x,
                y=p.y,
                box=OrientedRect(p.x, p.y, p.radius, p.radius, 0.0),
                speed=math.hypot(*p.velocity()),
                radius=p.radius,
            )
        )
    for i, rect in enumerate(world.parked_vehicles):
        box = rect.as_oriented()
        out.append(
            GroundTruthObject(
                id=f"parked_{i}",
                class_label="car",
                x=box.cx,
                y=box.cy,
                box=box,
                speed=0.0,
                radius=min(box.half_length, box.half_width),
            )
        )
    return out


def occlusion_fraction(ox, oy, tx, ty, tr, occluders, n_rays: int = N_RAYS) -> float:
    """Fraction of rays to the target disc blocked by an occluder first.

    Rays go to n_rays boundary points at half-step-offset angles, so a
    symmetric half-cover blocks exactly half of them. Occluders are
    OrientedRect instances or (x, y, radius) discs.
    """
    if math.hypot(tx - ox, ty - oy) <= tr:
        raise ValueError("sensor origin inside target disc")
    # every ray point lies within tr of the origin->center segment, so
    # occluders farther than tr + circumradius from it cannot block anything
    near = []
    for occ in occluders:
        if isinstance(occ, OrientedRect):
            cx, cy = occ.cx, occ.cy
            r = math.hypot(occ.half_length, occ.half_width)
        else:
            cx, cy, r = occ
        if dist_point_to_segment(cx, cy, ox, oy, tx, ty) <= tr + r:
            near.append(occ)
    if not near:
        return 0.0
    ang = 2.0 * np.pi * (np.arange(n_rays) + 0.5) / n_rays
    bx = tx + tr * np.cos(ang)
    by = ty + tr * np.sin(ang)
    blocked = np.zeros(n_rays, dtype=bool)
    for occ in near:
        if isinstance(occ, OrientedRect):
            blocked |= _rays_hit_rect(ox, oy, bx, by, occ)
        else:
            cx, cy, r = occ
            blocked |= _rays_hit_disc(ox, oy, bx, by, cx, cy, r)
        if blocked.all():
            break
    return int(blocked.sum()) / n_rays


def _rays_hit_rect(ox, oy, bx, by, rect: OrientedRect) -> np.ndarray:
    """Slab test for a fan of segments sharing the origin: hit before t=1."""
    u0, v0 = rect.to_frame(ox, oy)
    c, s = math.cos(rect.heading), math.sin(rect.heading)
    dx, dy = bx - rect.cx, by - rect.cy
    u1 = c * dx + s * dy
    v1 = -s * dx + c * dy
    t_lo = np.zeros_like(bx)
    t_hi = np.ones_like(bx)
    alive = np.ones(bx.shape, dtype=bool)
    for start, ends, half in ((u0, u1, rect.half_length), (v0, v1, rect.half_width)):
        delta = ends - start
        zero = delta == 0.0
        safe = np.where(zero, 1.0, delta)
        ta = (-half - start) / safe
        tb = (half - start) / safe
        lo = np.minimum(ta, tb)
        hi = np.maximum(ta, tb)
        # parallel rays miss outright when the start offset is outside the slab
        if abs(start) > half:
            alive &= ~zero
        t_lo = np.where(zero, t_lo, np.maximum(t_lo, lo))
        t_hi = np.where(zero, t_hi, np.minimum(t_hi, hi))
        alive &= t_lo <= t_hi
    return alive & (t_lo < 1.0)


def _rays_hit_disc(ox, oy, bx, by, cx, cy, r) -> np.ndarray:
    dx, dy = bx - ox, by - oy
    fx, fy = ox - cx, oy - cy
    a = dx * dx + dy * dy
    b = 2.0 * (fx * dx + fy * dy)
    c = fx * fx + fy * fy - r * r
    disc = b * b - 4.0 * a * c
    hit = disc >= 0.0
    root = np.sqrt(np.where(hit, disc, 0.0))
    safe_a = np.where(a == 0.0, 1.0, a)
    t0 = (-b - root) / (2.0 * safe_a)
    t1 = (-b + root) / (2.0 * safe_a)
    hit &= ~((t1 < 0.0) | (t0 > 1.0))
    hit &= np.maximum(t0, 0.0) < 1.0
    # degenerate zero-length ray: inside the disc counts as blocked
    hit = np.where(a == 0.0, c <= 0.0, hit)
    return hit


def _occluder_shape(obj: GroundTruthObject):
    if obj.class_label == "car":
        return obj.box
    return (obj.x, obj.y, obj.radius)


def occlusion_of(obj: GroundTruthObject, world: WorldState, n_rays: int = N_RAYS) -> float:
    """Occlusion of one ground-truth object as seen from the ego."""
    others = [_occluder_shape(o) for o in ground_truth_objects(world) if o.id != obj.id]
    return occlusion_fraction(world.ego.x, world.ego.y, obj.x, obj.y, obj.radius, others, n_rays)


def sense(
    world: WorldState,
    cfg: SensorConfig,
    stream: np.random.Generator,
    noise_scale: float = 1.0,
) -> list[Detection]:
    """One raw sensor frame (no velocity tracking).

    Unknown classes are never reported. Dropout probability is
    min(1, dropout_base + occlusion_dropout_gain * occlusion_fraction); the
    uniform dropout draw happens for every candidate in a fixed order, so a
    frame is fully determined by the stream state.
    """
    ego = world.ego
    objects = ground_truth_objects(world)
    sigma = cfg.sigma * noise_scale
    detections = []
    for i, obj in enumerate(objects):
        dx, dy = obj.x - ego.x, obj.y - ego.y
        if math.hypot(dx, dy) > cfg.max_range:
            continue
        if abs(wrap_angle(math.atan2(dy, dx) - ego.theta)) > 0.5 * cfg.fov:
            continue
        if obj.class_label not in cfg.known_classes:
            continue
        occluders = [_occluder_shape(o) for j, o in enumerate(objects) if j != i]
        occ = occlusion_fraction(ego.x, ego.y, obj.x, obj.y, obj.radius, occluders, cfg.n_rays)
        p_drop = min(1.0, cfg.dropout_base + cfg.occlusion_dropout_gain * occ)
        if stream.random() < p_drop:
            continue
        nx = ny = 0.0
        if sigma > 0.0:
            nx, ny = stream.normal(0.0, sigma, 2)
        box = obj.box
        detections.append(
            Detection(
                class_label=obj.class_label,
                x=obj.x + nx,
                y=obj.y + ny,
                box=OrientedRect(box.cx + nx, box.cy + ny, box.half_length,
                                 box.half_width, box.heading),
                score=1.0 - p_drop,
            )
        )
    return detections


class SensorPipeline:
    """Sensor frames plus frame-to-frame velocity tracking.

    Tracks are matched greedily by center distance; the first matched frame
    pair seeds the speed estimate, later ones blend in with an exponential
    moving average.
    """

    def __init__(self, cfg: SensorConfig, stream: np.random.Generator):
        self.cfg = cfg
        self.stream = stream
        self._prev: list[Detection] = []
        self._prev_time: float | None = None
        self._next_track = 0

    def reset(self) -> None:
        self._prev = []
        self._prev_time = None

    def step(self, world: WorldState, noise_scale: float = 1.0) -> list[Detection]:
        detections = sense(world, self.cfg, self.stream, noise_scale)
        dt = None if self._prev_time is None else world.time - self._prev_time
        if dt is not None and dt > 0.0 and self._prev:
            pairs = _greedy_match(
                [(p.x, p.y) for p in self._prev], [(d.x, d.y) for d in detections], MATCH_GATE
            )
            for pi, di in pairs.items():
                prev, det = self._prev[pi], detections[di]
                vx_raw = (det.x - prev.x) / dt
                vy_raw = (det.y - prev.y) / dt
                if prev.v_tracked:
                    alpha = self.cfg.ema_alpha
                    det.vx_est = alpha * vx_raw + (1.0 - alpha) * prev.vx_est
                    det.vy_est = alpha * vy_raw + (1.0 - alpha) * prev.vy_est
                else:
                    det.vx_est, det.vy_est = vx_raw, vy_raw
                det.v_est = math.hypot(det.vx_est, det.vy_est)
                det.v_tracked = True
                det.track_id = prev.track_id
        for det in detections:
            if det.track_id < 0:
                det.track_id = self._next_track
                self._next_track += 1
        self._prev = detections
        self._prev_time = world.time
        return detections


def _greedy_match(gt_points, det_points, gate: float) -> dict[int, int]:
    """Greedy nearest-center assignment within a gate; index map gt -> det."""
    pairs = []
    for i, (gx, gy) in enumerate(gt_points):
        for j, (dx, dy) in enumerate(det_points):
            dist = math.hypot(gx - dx, gy - dy)
            if dist <= gate:
                pairs.append((dist, i, j))
    pairs.sort()
    used_gt, used_det, out = set(), set(), {}
    for dist, i, j in pairs:
        if i in used_gt or j in used_det:
            continue
        used_gt.add(i)
        used_det.add(j)
        out[i] = j
    return out


# --------------------------------------------------------------------------
# Detection-quality metrics.


def iogt(pred: OrientedRect, gt: OrientedRect) -> float:
    """Intersection area over ground-truth area, exact via polygon clipping."""
    if gt.area <= 0.0:
        raise ValueError("ground-truth box must have positive area")
    inter = convex_intersection_area(pred.corners(), gt.corners())
    return clamp(inter / gt.area, 0.0, 1.0)


@dataclass(frozen=True)
class SafetyRecord:
    object_id: str
    iogt: float
    distance: float
    criticality: float
    safety_score: float


@dataclass(frozen=True)
class SafetyMetricReport:
    records: tuple[SafetyRecord, ...]
    min_score: float
    mean_score: float
    n_safe: int
    n_unsafe: int


def safety_metric(
    pred: Detection | None,
    gt: GroundTruthObject,
    ego,
    params: RequirementParams,
) -> SafetyRecord:
    """Distance-weighted detection quality for one object.

    criticality = clamp(1 - dist/d_safety, 0, 1) with dist measured from the
    ego footprint to the object center; safety_score = 1 - c * (1 - IoGT),
    so a missed or badly boxed object only hurts when it is close.
    """
    overlap = 0.0 if pred is None else iogt(pred.box, gt.box)
    dist = max(0.0, ego.footprint().signed_distance(gt.x, gt.y))
    criticality = clamp(1.0 - dist / params.d_safety, 0.0, 1.0)
    score = 1.0 - criticality * (1.0 - overlap)
    return SafetyRecord(
        object_id=gt.id, iogt=overlap, distance=dist, criticality=criticality, safety_score=score
    )


def safety_report(
    world: WorldState,
    detections: list[Detection],
    params: RequirementParams,
    threshold: float = 0.9,
) -> SafetyMetricReport:
    objects = ground_truth_objects(world)
    matches = _greedy_match(
        [(o.x, o.y) for o in objects], [(d.x, d.y) for d in detections], MATCH_GATE
    )
    records = []
    for i, obj in enumerate(objects):
        pred = detections[matches[i]] if i in matches else None
        records.append(safety_metric(pred, obj, world.ego, params))
    scores = [r.safety_score for r in records]
    return SafetyMetricReport(
        records=tuple(records),
        min_score=min(scores, default=1.0),
        mean_score=sum(scores) / len(scores) if scores else 1.0,
        n_safe=sum(1 for s in scores if s >= threshold),
        n_unsafe=sum(1 for s in scores if s < threshold),
    )


def evaluate_uc_avp_01(
    world: WorldState,
    detections: list[Detection],
    params: RequirementParams,
    v_tol: float = 0.5,
) -> tuple[bool, float]:
    """Per-sample pedestrian-detection check.

    Every ground-truth pedestrian within d_safety of the ego footprint must
    be matched by a detection with position error <= e_detect and, once a
    velocity estimate exists, speed error <= v_tol. The margin is the
    tolerance head-room (negative on failure); a miss counts like a match at
    the association gate.
    """
    peds = [
        o for o in ground_truth_objects(world)
        if o.class_label == "pedestrian"
        and world.ego.footprint().signed_distance(o.x, o.y) <= params.d_safety
    ]
    margin = params.e_detect
    matches = _greedy_match(
        [(o.x, o.y) for o in peds], [(d.x, d.y) for d in detections], MATCH_GATE
    )
    for i, obj in enumerate(peds):
        if i not in matches:
            margin = min(margin, params.e_detect - MATCH_GATE)
            continue
        det = detections[matches[i]]
        err = math.hypot(det.x - obj.x, det.y - obj.y)
        margin = min(margin, params.e_detect - err)
        if det.v_tracked:
            margin = min(margin, v_tol - abs(det.v_est - obj.speed))
    return (margin >= 0.0, margin)


def dump_detections(frames: list[tuple[float, list[Detection]]], path) -> None:
    """Optional JSONL export: one line per detection per timestep."""
    with open(Path(path), "w", encoding="utf-8") as fh:
        for t, detections in frames:
            for d in detections:
                fh.write(json.dumps({
                    "t": t,
                    "class_label": d.class_label,
                    "x": d.x,
                    "y": d.y,
                    "box": {
                        "cx": d.box.cx, "cy": d.box.cy,
                        "half_length": d.box.half_length,
                        "half_width": d.box.half_width,
                        "heading": d.box.heading,
                    },
                    "v_est": d.v_est,
                    "score": d.score,
                    "track_id": d.track_id,
                }, sort_keys=True) + "\n")
