"""Planar geometry primitives shared by the simulator and the metrics.

Conventions: distances in meters, angles in radians, +x east, +y north,
headings counterclockwise from +x. Boundary containment is closed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence


def clamp(value: float, lo: float, hi: float) -> float:
    if value < lo:
        return lo
    if value > hi:
        return hi
    return value


def wrap_angle(angle: float) -> float:
    """Map an angle to (-pi, pi]."""
    wrapped = math.fmod(angle + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle given by its min/max corners."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self) -> None:
        if self.x1 < self.x0 or self.y1 < self.y0:
            raise ValueError(f"degenerate rectangle: {self}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    @property
    def area(self) -> float:
        return self.width * self.height

    def contains(self, x: float, y: float) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1

    def corners(self) -> list[tuple[float, float]]:
        return [(self.x0, self.y0), (self.x1, self.y0), (self.x1, self.y1), (self.x0, self.y1)]

    def distance_to_point(self, x: float, y: float) -> float:
        """Euclidean distance from the point to the rectangle, 0.0 inside."""
        dx = max(self.x0 - x, 0.0, x - self.x1)
        dy = max(self.y0 - y, 0.0, y - self.y1)
        return math.hypot(dx, dy)

    def as_oriented(self) -> "OrientedRect":
        cx, cy = self.center
        return OrientedRect(cx, cy, 0.5 * self.width, 0.5 * self.height, 0.0)


@dataclass(frozen=True)
class OrientedRect:
    """Rectangle with center, half extents and a heading.

    half_length extends along the heading, half_width across it.
    """

    cx: float
    cy: float
    half_length: float
    half_width: float
    heading: float

    def __post_init__(self) -> None:
        if self.half_length <= 0.0 or self.half_width <= 0.0:
            raise ValueError(f"degenerate oriented rectangle: {self}")

    @property
    def area(self) -> float:
        return 4.0 * self.half_length * self.half_width

    def to_frame(self, x: float, y: float) -> tuple[float, float]:
        """Express a world point in the rectangle frame (u along heading)."""
        c = math.cos(self.heading)
        s = math.sin(self.heading)
        dx = x - self.cx
        dy = y - self.cy
        return (c * dx + s * dy, -s * dx + c * dy)

    def corners(self) -> list[tuple[float, float]]:
        c = math.cos(self.heading)
        s = math.sin(self.heading)
        hl, hw = self.half_length, self.half_width
        out = []
        for u, v in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)):
            out.append((self.cx + c * u - s * v, self.cy + s * u + c * v))
        return out

    def contains(self, x: float, y: float) -> bool:
        u, v = self.to_frame(x, y)
        return abs(u) <= self.half_length and abs(v) <= self.half_width

    def signed_distance(self, x: float, y: float) -> float:
        """Distance to the boundary, negative inside the rectangle."""
        u, v = self.to_frame(x, y)
        du = abs(u) - self.half_length
        dv = abs(v) - self.half_width
        if du > 0.0 or dv > 0.0:
            return math.hypot(max(du, 0.0), max(dv, 0.0))
        return max(du, dv)

    def intersects_disc(self, x: float, y: float, radius: float) -> bool:
        return self.signed_distance(x, y) <= radius


def polygon_area(points: Sequence[tuple[float, float]]) -> float:
    """Shoelace area of a simple polygon (vertices in order)."""
    if len(points) < 3:
        return 0.0
    total = 0.0
    n = len(points)
    for i in range(n):
        x0, y0 = points[i]
        x1, y1 = points[(i + 1) % n]
        total += x0 * y1 - x1 * y0
    return 0.5 * abs(total)


def clip_convex(
    subject: Sequence[tuple[float, float]], clip: Sequence[tuple[float, float]]
) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clip of a convex subject against a convex window.

    The clip polygon must be convex with vertices in counterclockwise order.
    Returns the (possibly empty) intersection polygon.
    """
    output = list(subject)
    n = len(clip)
    for i in range(n):
        if not output:
            return []
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        current = output
        output = []
        prev = current[-1]
        prev_side = ex * (prev[1] - ay) - ey * (prev[0] - ax)
        for point in current:
            side = ex * (point[1] - ay) - ey * (point[0] - ax)
            if side >= 0.0:
                if prev_side < 0.0:
                    output.append(_edge_intersection(prev, point, prev_side, side))
                output.append(point)
            elif prev_side >= 0.0:
                output.append(_edge_intersection(prev, point, prev_side, side))
            prev, prev_side = point, side
    return output


def _edge_intersection(p, q, side_p, side_q) -> tuple[float, float]:
    t = side_p / (side_p - side_q)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def convex_intersection_area(
    a: Sequence[tuple[float, float]], b: Sequence[tuple[float, float]]
) -> float:
    return polygon_area(clip_convex(a, _ccw(b)))


def _ccw(points: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    signed = 0.0
    n = len(points)
    for i in range(n):
        x0, y0 = points[i]
        x1, y1 = points[(i + 1) % n]
        signed += x0 * y1 - x1 * y0
    return list(points) if signed >= 0.0 else list(reversed(points))


def segment_disc_param(
    px: float, py: float, qx: float, qy: float, cx: float, cy: float, radius: float
) -> float | None:
    """Earliest parameter t in [0, 1] where segment p->q meets the disc, else None."""
    dx, dy = qx - px, qy - py
    fx, fy = px - cx, py - cy
    a = dx * dx + dy * dy
    if a == 0.0:
        return 0.0 if math.hypot(fx, fy) <= radius else None
    b = 2.0 * (fx * dx + fy * dy)
    c = fx * fx + fy * fy - radius * radius
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        return None
    root = math.sqrt(disc)
    t0 = (-b - root) / (2.0 * a)
    t1 = (-b + root) / (2.0 * a)
    if t1 < 0.0 or t0 > 1.0:
        return None
    return max(t0, 0.0)


def segment_rect_param(
    px: float, py: float, qx: float, qy: float, rect: OrientedRect
) -> float | None:
    """Earliest parameter t in [0, 1] where segment p->q meets the rectangle, else None."""
    u0, v0 = rect.to_frame(px, py)
    u1, v1 = rect.to_frame(qx, qy)
    t_lo, t_hi = 0.0, 1.0
    for start, delta, half in ((u0, u1 - u0, rect.half_length), (v0, v1 - v0, rect.half_width)):
        if delta == 0.0:
            if abs(start) > half:
                return None
            continue
        ta = (-half - start) / delta
        tb = (half - start) / delta
        if ta > tb:
            ta, tb = tb, ta
        t_lo = max(t_lo, ta)
        t_hi = min(t_hi, tb)
        if t_lo > t_hi:
            return None
    return t_lo


def dist_point_to_segment(
    x: float, y: float, ax: float, ay: float, bx: float, by: float
) -> float:
    dx, dy = bx - ax, by - ay
    norm_sq = dx * dx + dy * dy
    if norm_sq == 0.0:
        return math.hypot(x - ax, y - ay)
    t = clamp(((x - ax) * dx + (y - ay) * dy) / norm_sq, 0.0, 1.0)
    return math.hypot(x - (ax + t * dx), y - (ay + t * dy))


def polyline_lengths(points: Sequence[tuple[float, float]]) -> list[float]:
    """Cumulative arc length at each vertex, starting at 0."""
    out = [0.0]
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        out.append(out[-1] + math.hypot(x1 - x0, y1 - y0))
    return out


def iter_pairs(points: Sequence) -> Iterable[tuple]:
    return zip(points, points[1:])
