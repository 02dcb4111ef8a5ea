"""Planning pipeline: grid path planner, velocity profiler, AEB, tracker.

plan_path runs A* on a 0.25 m grid over the lot (obstacles inflated by the
ego half-width plus a margin, with a soft cost that prefers clearance),
shortcut-smooths the result without giving that clearance back, rounds the
corners with circular fillets and resamples. static_profile limits speed by
curvature and a comfortable terminal ramp. The AEB watches detections on
the planned corridor; a pure-pursuit tracker follows the profile.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .geometry import Rect, clamp, wrap_angle
from .scenarios import OddSpec, ParkingMap, RequirementParams
from .sensing import Detection
from .world import Command, EgoState

GRID = 0.25
INFLATION = 0.2  # added to the ego half-width when hardening obstacles
CLEARANCE_WEIGHT = 0.3  # soft cost per meter of missing d_safety clearance
FILLET_RADIUS_MAX = 4.0
WAYPOINT_SPACING = 0.45
CLEARANCE_TOL = 0.01

A_LAT_MAX = 1.5  # lateral comfort bound for curve speeds
A_COMFORT = 1.0  # terminal-ramp deceleration

VULNERABLE_CLASSES = frozenset({"pedestrian", "animal"})
STANDSTILL = 1e-6
AEB_HOLD_GAP = 2.0  # stay stopped while a vulnerable object is this close on-path

# Rear-axle parking depth inside the bay: the body ends up centered.
PARK_DEPTH = 1.7


class PlanningError(RuntimeError):
    """No feasible path to the goal bay."""


class TrackingLostError(RuntimeError):
    """Ego drifted too far from the planned path."""


@dataclass
class PathPlan:
    """Polyline path with arc-length, clearance and curvature annotations.

    clearance_margin is the UC-AVP-03 signal: attained clearance minus the
    required bar, where the bar is d_safety wherever the lane centerline
    itself could keep d_safety, and the centerline's own clearance elsewhere
    (minus a 1 cm tolerance in both cases).
    """

    waypoints: list[tuple[float, float]]
    s: list[float]
    clearance: list[float]
    clearance_margin: list[float]
    curvature: list[float]
    _segs: tuple | None = field(default=None, init=False, repr=False, compare=False)

    @property
    def length(self) -> float:
        return self.s[-1]

    def _segments(self):
        """Per-segment arrays for batch projection (built on first use)."""
        if self._segs is None:
            wp = np.asarray(self.waypoints, dtype=float)
            x0, y0 = wp[:-1, 0], wp[:-1, 1]
            dx, dy = np.diff(wp[:, 0]), np.diff(wp[:, 1])
            seg2 = dx * dx + dy * dy
            seg_len = np.sqrt(seg2)
            s0 = np.asarray(self.s[:-1], dtype=float)
            lists = tuple(a.tolist() for a in (x0, y0, dx, dy, seg2, seg_len, s0))
            self._segs = ((x0, y0, dx, dy, seg2, seg_len, s0), lists)
        return self._segs

    def point_at(self, s: float) -> tuple[float, float]:
        s = clamp(s, 0.0, self.s[-1])
        i = self._locate(s)
        if i >= len(self.waypoints) - 1:
            return self.waypoints[-1]
        t = (s - self.s[i]) / (self.s[i + 1] - self.s[i])
        (x0, y0), (x1, y1) = self.waypoints[i], self.waypoints[i + 1]
        return (x0 + t * (x1 - x0), y0 + t * (y1 - y0))

    def tangent_at(self, s: float) -> tuple[float, float]:
        i = min(self._locate(s), len(self.waypoints) - 2)
        (x0, y0), (x1, y1) = self.waypoints[i], self.waypoints[i + 1]
        d = math.hypot(x1 - x0, y1 - y0)
        return ((x1 - x0) / d, (y1 - y0) / d)

    def margin_at(self, s: float) -> float:
        i = self._locate(s)
        if i >= len(self.waypoints) - 1:
            return self.clearance_margin[-1]
        t = (s - self.s[i]) / (self.s[i + 1] - self.s[i])
        return self.clearance_margin[i] + t * (self.clearance_margin[i + 1] - self.clearance_margin[i])

    def _locate(self, s: float) -> int:
        s = clamp(s, 0.0, self.s[-1])
        lo, hi = 0, len(self.s) - 1
        while lo + 1 < hi:
            mid = (lo + hi) // 2
            if self.s[mid] <= s:
                lo = mid
            else:
                hi = mid
        return lo

    def project(self, x: float, y: float, hint: int = 0, window: int = 40) -> tuple[float, float, int]:
        """Nearest path point near a segment hint: (arc position, lateral, segment).

        The search window slides with the follower; a full scan happens when
        the local window loses the path.
        """
        n = len(self.waypoints)
        if n == 1:
            wx, wy = self.waypoints[0]
            return (0.0, math.hypot(x - wx, y - wy), 0)
        best = None
        lo = max(0, hint - 4)
        hi = min(n - 1, hint + window)
        best = self._scan(best, x, y, lo, hi)
        if best is None or best[1] > 2.0 * GRID + 1.0:
            best = self._scan(None, x, y, 0, n - 1)
        s, lateral, i, t = best
        # beyond either end the lateral error is the distance to the end
        # segment's line, not to the endpoint: overshoot along the tangent
        # is a longitudinal error, not cross-track
        if (i == 0 and t == 0.0) or (i == n - 2 and t == 1.0):
            (x0, y0), (x1, y1) = self.waypoints[i], self.waypoints[i + 1]
            seg = math.hypot(x1 - x0, y1 - y0)
            lateral = abs((x1 - x0) * (y - y0) - (y1 - y0) * (x - x0)) / seg
        return (s, lateral, i)

    def _scan(self, best, x, y, lo, hi):
        """Ascending scan of segments [lo, hi); the near-tie preference for
        the earlier arc position stays sequential. Short windows run as a
        plain loop, full scans are batched."""
        arrays, lists = self._segments()
        if hi - lo <= 24:
            xs0, ys0, dxs, dys, seg2s, lens, s0s = lists
            for i in range(lo, hi):
                seg2 = seg2s[i]
                t = 0.0 if seg2 == 0.0 else ((x - xs0[i]) * dxs[i] + (y - ys0[i]) * dys[i]) / seg2
                t = 0.0 if t < 0.0 else (1.0 if t > 1.0 else t)
                lat = math.hypot(x - (xs0[i] + t * dxs[i]), y - (ys0[i] + t * dys[i]))
                s = s0s[i] + t * lens[i]
                if best is None or lat < best[1] - 1e-12 or (lat < best[1] + 1e-12 and s < best[0]):
                    best = (s, lat, i, t)
            return best
        x0, y0, dx, dy, seg2, seg_len, s0 = arrays
        x0, y0 = x0[lo:hi], y0[lo:hi]
        dx, dy, seg2 = dx[lo:hi], dy[lo:hi], seg2[lo:hi]
        dot = (x - x0) * dx + (y - y0) * dy
        t = np.where(seg2 == 0.0, 0.0, np.clip(dot / np.where(seg2 == 0.0, 1.0, seg2), 0.0, 1.0))
        px, py = x0 + t * dx, y0 + t * dy
        lateral = np.hypot(x - px, y - py)
        s = s0[lo:hi] + t * seg_len[lo:hi]
        for k, (sk, lk) in enumerate(zip(s.tolist(), lateral.tolist())):
            if best is None or lk < best[1] - 1e-12 or (lk < best[1] + 1e-12 and sk < best[0]):
                best = (sk, lk, lo + k, float(t[k]))
        return best


def _obstacle_clearance(x: float, y: float, obstacles: list[Rect]) -> float:
    if not obstacles:
        return math.inf
    return min(rect.distance_to_point(x, y) for rect in obstacles)


def plan_path(
    layout: ParkingMap,
    start: tuple[float, float],
    goal_bay: int,
    obstacles: list[Rect],
    params: RequirementParams | None = None,
    half_width: float = 0.9,
) -> PathPlan:
    """A* on a 0.25 m grid, shortcut smoothing, fillets, resampling."""
    params = params or RequirementParams()
    bay = layout.bay(goal_bay)
    goal = (0.5 * (bay.x0 + bay.x1), bay.y0 + PARK_DEPTH)
    hard = half_width + INFLATION
    lot = layout.lot

    def free(x: float, y: float) -> bool:
        if not (lot.x0 + hard <= x <= lot.x1 - hard and lot.y0 + hard <= y <= lot.y1 - hard):
            return False
        return all(rect.distance_to_point(x, y) >= hard for rect in obstacles)

    if math.hypot(start[0] - goal[0], start[1] - goal[1]) < 0.5 * GRID:
        return _annotate([start], layout, obstacles, params)

    key = (lot, tuple(obstacles), hard, params.d_safety)
    start_cell = _nearest_free_cell(_to_cell(start, lot), key)
    goal_cell = _nearest_free_cell(_to_cell(goal, lot), key)
    if not _cell_free(goal_cell, key) or not _goal_reachable(goal, free):
        raise PlanningError("goal bay is not reachable")
    points = [_to_world(c, lot) for c in _astar_cells(start_cell, goal_cell, key)]
    if math.hypot(points[0][0] - start[0], points[0][1] - start[1]) > 1e-9:
        points.insert(0, start)
    if math.hypot(points[-1][0] - goal[0], points[-1][1] - goal[1]) > 1e-9:
        points.append(goal)

    corners = _shortcut(points, lot, hard, obstacles)
    polyline = _fillet(corners, free)
    return _annotate(polyline, layout, obstacles, params)


def _to_cell(p, lot: Rect) -> tuple[int, int]:
    return (round((p[0] - lot.x0) / GRID), round((p[1] - lot.y0) / GRID))


def _to_world(c, lot: Rect) -> tuple[float, float]:
    return (lot.x0 + c[0] * GRID, lot.y0 + c[1] * GRID)


@lru_cache(maxsize=32)
def _grid_occupancy(key):
    """Free-cell mask and soft clearance cost for every grid cell at once."""
    lot, obstacles, hard, d_safety = key
    xs = lot.x0 + GRID * np.arange(round((lot.x1 - lot.x0) / GRID) + 1)
    ys = lot.y0 + GRID * np.arange(round((lot.y1 - lot.y0) / GRID) + 1)
    x = xs[:, None]
    y = ys[None, :]
    free = (x >= lot.x0 + hard) & (x <= lot.x1 - hard) & (y >= lot.y0 + hard) & (y <= lot.y1 - hard)
    clear = np.full((len(xs), len(ys)), np.inf)
    for r in obstacles:
        dx = np.maximum(np.maximum(r.x0 - x, x - r.x1), 0.0)
        dy = np.maximum(np.maximum(r.y0 - y, y - r.y1), 0.0)
        d = np.hypot(dx, dy)
        free &= d >= hard
        clear = np.minimum(clear, d)
    soft = CLEARANCE_WEIGHT * np.maximum(0.0, d_safety - clear)
    return free.tolist(), soft.tolist(), free.shape


def _cell_free(c, key) -> bool:
    free_list, _, (n_i, n_j) = _grid_occupancy(key)
    i, j = c
    return 0 <= i < n_i and 0 <= j < n_j and free_list[i][j]


def _nearest_free_cell(cell, key) -> tuple[int, int]:
    for radius in range(0, 9):
        for di in range(-radius, radius + 1):
            for dj in range(-radius, radius + 1):
                if max(abs(di), abs(dj)) != radius:
                    continue
                cand = (cell[0] + di, cell[1] + dj)
                if _cell_free(cand, key):
                    return cand
    raise PlanningError("no free grid cell near the requested pose")


def _astar_cells(start_cell, goal_cell, key) -> tuple:
    """Cell chain from start to goal on the cached goal-rooted shortest-path
    tree; any start over the same map, goal and obstacles reuses it."""
    toward_goal = _goal_tree(goal_cell, key)
    if start_cell not in toward_goal:
        raise PlanningError("goal bay is not reachable")
    chain = [start_cell]
    while chain[-1] != goal_cell:
        chain.append(toward_goal[chain[-1]])
    return tuple(chain)


@lru_cache(maxsize=64)
def _goal_tree(goal_cell, key) -> dict:
    """Next-cell-toward-goal for every reachable free cell (Dijkstra from the
    goal over reversed edges; a forward step into a cell pays that cell's
    soft clearance cost)."""
    free_list, soft_list, (n_i, n_j) = _grid_occupancy(key)

    def cell_free(c) -> bool:
        i, j = c
        return 0 <= i < n_i and 0 <= j < n_j and free_list[i][j]

    if not cell_free(goal_cell):
        return {}
    steps = [
        (1, 0, GRID), (-1, 0, GRID), (0, 1, GRID), (0, -1, GRID),
        (1, 1, GRID * math.sqrt(2)), (1, -1, GRID * math.sqrt(2)),
        (-1, 1, GRID * math.sqrt(2)), (-1, -1, GRID * math.sqrt(2)),
    ]
    open_heap = [(0.0, 0, goal_cell)]
    dist = {goal_cell: 0.0}
    toward = {goal_cell: goal_cell}
    tie = 0
    closed = set()
    while open_heap:
        _, _, cell = heapq.heappop(open_heap)
        if cell in closed:
            continue
        closed.add(cell)
        enter_cost = soft_list[cell[0]][cell[1]]
        for di, dj, step in steps:
            nxt = (cell[0] + di, cell[1] + dj)
            if not cell_free(nxt):
                continue
            if di and dj:  # no corner cutting between blocked orthogonals
                if not (cell_free((cell[0] + di, cell[1])) and cell_free((cell[0], cell[1] + dj))):
                    continue
            cost = dist[cell] + step * (1.0 + enter_cost)
            if cost < dist.get(nxt, math.inf) - 1e-12:
                dist[nxt] = cost
                toward[nxt] = cell
                tie += 1
                heapq.heappush(open_heap, (cost, tie, nxt))
    return toward


def _goal_reachable(goal, free) -> bool:
    return free(*goal)


def _clearance_batch(xs: np.ndarray, ys: np.ndarray, obstacles) -> np.ndarray:
    clear = np.full(xs.shape, np.inf)
    for r in obstacles:
        dx = np.maximum(np.maximum(r.x0 - xs, xs - r.x1), 0.0)
        dy = np.maximum(np.maximum(r.y0 - ys, ys - r.y1), 0.0)
        clear = np.minimum(clear, np.hypot(dx, dy))
    return clear


def _segment_ok(p, q, lot: Rect, hard: float, obstacles, floor: float, step: float = 0.1) -> bool:
    dist = math.hypot(q[0] - p[0], q[1] - p[1])
    n = max(1, math.ceil(dist / step))
    t = np.arange(n + 1) / n
    xs = p[0] + t * (q[0] - p[0])
    ys = p[1] + t * (q[1] - p[1])
    if not ((xs >= lot.x0 + hard) & (xs <= lot.x1 - hard)
            & (ys >= lot.y0 + hard) & (ys <= lot.y1 - hard)).all():
        return False
    clear = _clearance_batch(xs, ys, obstacles)
    return bool((clear >= max(hard, floor)).all())


def _shortcut(points, lot: Rect, hard: float, obstacles) -> list[tuple[float, float]]:
    """Greedy line-of-sight smoothing that preserves attained clearance.

    A jump is allowed only if the direct segment keeps at least the minimum
    clearance of the subchain it replaces (within 5 cm), so the soft
    clearance preference from the grid search survives smoothing.
    """
    if len(points) <= 2:
        return list(points)
    clear = [_obstacle_clearance(x, y, obstacles) for x, y in points]
    out = [points[0]]
    i = 0
    while i < len(points) - 1:
        j = len(points) - 1
        while j > i + 1:
            floor = min(clear[i:j + 1]) - 0.05
            if _segment_ok(points[i], points[j], lot, hard, obstacles, floor):
                break
            j -= 1
        out.append(points[j])
        i = j
    return out


def _fillet(corners, free) -> list[tuple[float, float]]:
    """Replace interior corners by tangent arcs and resample the legs.

    An arc cuts inside its corner, so corners whose arc would leave free
    space are kept sharp; the curvature annotation slows the profile there
    instead.
    """
    if len(corners) <= 2:
        return _resample_chain(corners)
    anchors = [corners[0]]
    arcs = {}
    for k in range(1, len(corners) - 1):
        p, c, q = corners[k - 1], corners[k], corners[k + 1]
        v1 = (c[0] - p[0], c[1] - p[1])
        v2 = (q[0] - c[0], q[1] - c[1])
        l1, l2 = math.hypot(*v1), math.hypot(*v2)
        a1 = math.atan2(v1[1], v1[0])
        a2 = math.atan2(v2[1], v2[0])
        turn = wrap_angle(a2 - a1)
        if abs(turn) < 0.05 or l1 < 1e-9 or l2 < 1e-9:
            anchors.append(c)
            continue
        half = 0.5 * abs(turn)
        radius = min(FILLET_RADIUS_MAX, 0.5 * min(l1, l2) / math.tan(half))
        if radius < 0.3:
            anchors.append(c)
            continue
        offset = radius * math.tan(half)
        entry = (c[0] - offset * v1[0] / l1, c[1] - offset * v1[1] / l1)
        exit_ = (c[0] + offset * v2[0] / l2, c[1] + offset * v2[1] / l2)
        # center lies perpendicular to the entry tangent, on the turn side
        side = 1.0 if turn > 0 else -1.0
        center = (
            entry[0] - side * radius * math.sin(a1),
            entry[1] + side * radius * math.cos(a1),
        )
        n_arc = max(2, math.ceil(radius * abs(turn) / 0.25))
        arc_pts = []
        phi0 = math.atan2(entry[1] - center[1], entry[0] - center[0])
        for m in range(n_arc + 1):
            phi = phi0 + side * abs(turn) * m / n_arc
            arc_pts.append((center[0] + radius * math.cos(phi), center[1] + radius * math.sin(phi)))
        if not all(free(px, py) for px, py in arc_pts):
            anchors.append(c)
            continue
        anchors.append(entry)
        arcs[len(anchors) - 1] = arc_pts
        anchors.append(exit_)
    anchors.append(corners[-1])

    chain = []
    for idx in range(len(anchors) - 1):
        if idx in arcs:
            continue  # this anchor pair is the arc's entry->exit chord
        chain.extend(_sample_segment(anchors[idx], anchors[idx + 1])[:-1])
        if idx + 1 in arcs:
            chain.extend(arcs[idx + 1][:-1])
    chain.append(anchors[-1])
    return _dedupe(chain)


def _sample_segment(p, q):
    dist = math.hypot(q[0] - p[0], q[1] - p[1])
    n = max(1, math.ceil(dist / WAYPOINT_SPACING))
    return [
        (p[0] + (q[0] - p[0]) * k / n, p[1] + (q[1] - p[1]) * k / n) for k in range(n + 1)
    ]


def _resample_chain(points):
    if len(points) <= 1:
        return list(points)
    chain = []
    for i in range(len(points) - 1):
        chain.extend(_sample_segment(points[i], points[i + 1])[:-1])
    chain.append(points[-1])
    return _dedupe(chain)


def _dedupe(points, eps: float = 1e-9):
    out = [points[0]]
    for p in points[1:]:
        if math.hypot(p[0] - out[-1][0], p[1] - out[-1][1]) > eps:
            out.append(p)
    return out


def _annotate(points, layout: ParkingMap, obstacles, params: RequirementParams) -> PathPlan:
    s = [0.0]
    for i in range(1, len(points)):
        s.append(s[-1] + math.hypot(points[i][0] - points[i - 1][0], points[i][1] - points[i - 1][1]))
    xs = np.array([p[0] for p in points])
    ys = np.array([p[1] for p in points])
    clearance = _clearance_batch(xs, ys, obstacles)
    cy = layout.lane_center_y
    # the clearance bar is d_safety where the lane centerline could keep it,
    # the centerline's own clearance elsewhere
    reference = _clearance_batch(xs, np.full(xs.shape, cy), obstacles)
    bar = np.minimum(params.d_safety, reference) - CLEARANCE_TOL
    margins = (clearance - bar).tolist()
    clearance = clearance.tolist()
    curvature = [0.0] * len(points)
    for i in range(1, len(points) - 1):
        curvature[i] = _menger(points[i - 1], points[i], points[i + 1])
    return PathPlan(
        waypoints=list(points), s=s, clearance=clearance,
        clearance_margin=margins, curvature=curvature,
    )


def _menger(a, b, c) -> float:
    area2 = abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
    la = math.hypot(b[0] - a[0], b[1] - a[1])
    lb = math.hypot(c[0] - b[0], c[1] - b[1])
    lc = math.hypot(c[0] - a[0], c[1] - a[1])
    if la * lb * lc == 0.0:
        return 0.0
    return 2.0 * area2 / (la * lb * lc)


# --------------------------------------------------------------------------
# Velocity profile.


@dataclass
class VelocityProfile:
    path: PathPlan
    speeds: list[float]

    def speed_at(self, s: float) -> float:
        s = clamp(s, 0.0, self.path.s[-1])
        i = self.path._locate(s)
        if i >= len(self.speeds) - 1:
            return self.speeds[-1]
        ds = self.path.s[i + 1] - self.path.s[i]
        t = (s - self.path.s[i]) / ds if ds > 0 else 0.0
        return self.speeds[i] + t * (self.speeds[i + 1] - self.speeds[i])


def static_profile(
    path: PathPlan,
    odd: OddSpec,
    cruise: float,
    a_lat: float = A_LAT_MAX,
    a_ramp: float = A_COMFORT,
) -> VelocityProfile:
    """Cruise capped by the speed limit and curvature, ramping to 0 at the end."""
    if len(path.waypoints) == 1:
        return VelocityProfile(path, [0.0])
    top = min(cruise, odd.speed_limit, odd.ego_v_max)
    speeds = []
    for kappa in path.curvature:
        v = top if kappa <= 1e-9 else min(top, math.sqrt(a_lat / kappa))
        speeds.append(v)
    speeds[-1] = 0.0
    for i in range(len(speeds) - 2, -1, -1):
        ds = path.s[i + 1] - path.s[i]
        speeds[i] = min(speeds[i], math.sqrt(speeds[i + 1] ** 2 + 2.0 * a_ramp * ds))
    return VelocityProfile(path, speeds)


# --------------------------------------------------------------------------
# Time to collision and AEB.


def ttc(
    ego: EgoState,
    obj_xy: tuple[float, float],
    obj_v: tuple[float, float],
    obj_radius: float,
    path: PathPlan,
    params: RequirementParams,
    s_ego: float | None = None,
    obj_proj: tuple[float, float] | None = None,
) -> float:
    """Path-projected time to collision; inf when not closing or off-path.

    The gap runs from the front bumper to the near edge of the object as
    projected on the path; closing speed is the ego speed minus the object's
    along-path velocity component. Callers tracking the object across steps
    can pass its (s, lateral) projection to skip the path scan.
    """
    if s_ego is None:
        s_ego, _, _ = path.project(ego.x, ego.y)
    if obj_proj is None:
        s_obj, lateral, _ = path.project(obj_xy[0], obj_xy[1])
    else:
        s_obj, lateral = obj_proj
    if lateral > ego.half_width + obj_radius + params.e_detect:
        return math.inf
    if s_obj < s_ego:
        return math.inf
    tx, ty = path.tangent_at(s_obj)
    closing = ego.v - (obj_v[0] * tx + obj_v[1] * ty)
    if closing <= 0.0:
        return math.inf
    gap = s_obj - s_ego - ego.front_extent - obj_radius
    return max(0.0, gap) / closing


@dataclass(frozen=True)
class AebTrigger:
    ttc: float
    distance: float
    x: float
    y: float


def aeb(
    detections: list[Detection],
    ego: EgoState,
    path: PathPlan,
    params: RequirementParams,
    s_ego: float | None = None,
) -> AebTrigger | None:
    """Full-brake decision: a vulnerable-class detection within d_safety of
    the ego footprint with path-projected TTC below t_safety."""
    if s_ego is None:
        s_ego, _, _ = path.project(ego.x, ego.y)
    footprint = ego.footprint()
    best = None
    for det in detections:
        if det.class_label not in VULNERABLE_CLASSES:
            continue
        distance = footprint.signed_distance(det.x, det.y)
        if distance > params.d_safety:
            continue
        radius = min(det.box.half_length, det.box.half_width)
        t = ttc(ego, (det.x, det.y), (det.vx_est, det.vy_est), radius, path, params, s_ego)
        if t < params.t_safety:
            cand = AebTrigger(ttc=t, distance=distance, x=det.x, y=det.y)
            if best is None or (cand.ttc, cand.distance) < (best.ttc, best.distance):
                best = cand
    return best


def _on_path_gap(detections, ego, path, params, s_ego) -> float:
    """Smallest bumper gap to a vulnerable detection inside the path corridor."""
    gap = math.inf
    for det in detections:
        if det.class_label not in VULNERABLE_CLASSES:
            continue
        radius = min(det.box.half_length, det.box.half_width)
        s_obj, lateral, _ = path.project(det.x, det.y)
        if lateral > ego.half_width + radius + params.e_detect or s_obj < s_ego:
            continue
        gap = min(gap, s_obj - s_ego - ego.front_extent - radius)
    return gap


# --------------------------------------------------------------------------
# Pure-pursuit tracker.


@dataclass(frozen=True)
class TrackerGains:
    k_lookahead: float = 0.6
    lookahead_min: float = 1.0
    lookahead_max: float = 3.0
    kp_speed: float = 2.0


TRACKING_LOST_DIST = 5.0
GOAL_TOL = 0.15


def track(
    path: PathPlan,
    profile: VelocityProfile,
    ego: EgoState,
    gains: TrackerGains = TrackerGains(),
    hint: int = 0,
) -> tuple[Command, dict]:
    """Pure-pursuit steering plus proportional speed control.

    Returns the command and a diagnostics dict (s_ego, cross_track, hint,
    v_target, at_goal).
    """
    s_ego, lateral, seg = path.project(ego.x, ego.y, hint)
    if lateral > TRACKING_LOST_DIST:
        raise TrackingLostError(f"ego {lateral:.2f} m off path")
    lookahead = clamp(gains.k_lookahead * max(ego.v, 0.0), gains.lookahead_min, gains.lookahead_max)
    gx, gy = path.point_at(s_ego + lookahead)
    dx, dy = gx - ego.x, gy - ego.y
    cos_t, sin_t = math.cos(ego.theta), math.sin(ego.theta)
    fx = cos_t * dx + sin_t * dy
    fy = -sin_t * dx + cos_t * dy
    dist = math.hypot(fx, fy)
    if dist < 1e-9:
        delta_cmd = 0.0
    else:
        alpha = math.atan2(fy, fx)
        kappa = 2.0 * math.sin(alpha) / dist
        delta_cmd = math.atan(ego.wheelbase * kappa)
    remaining = path.length - s_ego
    v_target = 0.0 if remaining <= GOAL_TOL else profile.speed_at(s_ego)
    a_cmd = gains.kp_speed * (v_target - ego.v)
    at_goal = remaining <= GOAL_TOL and abs(ego.v) <= 0.05
    diag = {
        "s_ego": s_ego,
        "cross_track": lateral,
        "hint": seg,
        "v_target": v_target,
        "at_goal": at_goal,
    }
    return Command(a_cmd=a_cmd, delta_cmd=delta_cmd, source="planner"), diag


# --------------------------------------------------------------------------
# Stack: arbitration and per-cycle state.


@dataclass
class PlannerStack:
    """Per-episode planner state: path, profile, tracker hint, AEB latch."""

    path: PathPlan
    profile: VelocityProfile
    params: RequirementParams
    gains: TrackerGains = field(default_factory=TrackerGains)
    aeb_enabled: bool = True
    brake_a: float = -7.0
    hold_gap: float = AEB_HOLD_GAP
    _hint: int = 0
    _latched: bool = False

    def plan_act_cycle(self, ego: EgoState, detections: list[Detection]) -> tuple[Command, dict]:
        """Tracker command with AEB override; diagnostics for the trace."""
        cmd, diag = track(self.path, self.profile, ego, self.gains, self._hint)
        self._hint = diag["hint"]
        s_ego = diag["s_ego"]

        trigger = aeb(detections, ego, self.path, self.params, s_ego) if self.aeb_enabled else None
        diag["aeb_due"] = 1.0 if trigger is not None else 0.0
        diag["aeb_trigger"] = trigger

        if self.aeb_enabled:
            if self._latched:
                if abs(ego.v) > STANDSTILL:
                    pass  # keep braking to standstill
                elif trigger is not None or self._hold(detections, ego, s_ego):
                    pass  # blocked: stay stopped instead of creeping forward
                else:
                    self._latched = False
            if trigger is not None:
                self._latched = True
            if self._latched:
                if trigger is not None:
                    brake = self.brake_a  # the response requirement wants full brake
                else:
                    # ease the held command so it integrates to an exact
                    # standstill instead of reversing through zero
                    brake = max(self.brake_a, -ego.v / self.params.t_cycle)
                cmd = Command(a_cmd=brake, delta_cmd=cmd.delta_cmd, source="aeb")
        return cmd, diag

    def _hold(self, detections, ego, s_ego) -> bool:
        return _on_path_gap(detections, ego, self.path, self.params, s_ego) <= self.hold_gap

    @property
    def aeb_latched(self) -> bool:
        return self._latched
