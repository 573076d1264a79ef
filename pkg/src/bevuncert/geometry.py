"""Planar polygon primitives: convex hull, clipping, area, containment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateHullError

Point = tuple[float, float]


def _cross(o: Point, a: Point, b: Point) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def polygon_area(vertices: Sequence[Point]) -> float:
    """Signed shoelace area; positive for counter-clockwise order."""
    n = len(vertices)
    if n < 3:
        return 0.0
    s = 0.0
    for i in range(n):
        x0, y0 = vertices[i]
        x1, y1 = vertices[(i + 1) % n]
        s += x0 * y1 - x1 * y0
    return 0.5 * s


@dataclass(frozen=True)
class HullPolygon:
    """Strictly convex polygon with counter-clockwise vertices."""

    vertices: tuple[Point, ...]

    def __post_init__(self):
        if len(self.vertices) < 3:
            raise DegenerateHullError("hull needs at least 3 vertices")

    @property
    def area(self) -> float:
        return polygon_area(self.vertices)

    def contains(self, point: Point, tol: float = 1e-9) -> bool:
        return point_in_convex_polygon(point, self.vertices, tol)

    def contains_points(self, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        return points_in_convex_polygon(points, self.vertices, tol)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.vertices, dtype=float)


def convex_hull(points: Iterable[Sequence[float]]) -> HullPolygon:
    """Andrew's monotone chain.

    Collinear and duplicate points are dropped, so the result is strictly
    convex. Raises DegenerateHullError for fewer than three distinct points
    or an all-collinear input.
    """
    pts = sorted({(float(p[0]), float(p[1])) for p in points})
    if len(pts) < 3:
        raise DegenerateHullError(f"need >= 3 distinct points, got {len(pts)}")

    lower: list[Point] = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0.0:
            lower.pop()
        lower.append(p)
    upper: list[Point] = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0.0:
            upper.pop()
        upper.append(p)

    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3 or polygon_area(hull) <= 0.0:
        raise DegenerateHullError("all points are collinear")
    return HullPolygon(tuple(hull))


def point_in_convex_polygon(point: Point, vertices: Sequence[Point], tol: float = 1e-9) -> bool:
    """Boundary counts as inside (within ``tol``). Vertices must be CCW."""
    n = len(vertices)
    for i in range(n):
        a = vertices[i]
        b = vertices[(i + 1) % n]
        edge_len = np.hypot(b[0] - a[0], b[1] - a[1])
        if _cross(a, b, point) < -tol * max(edge_len, 1.0):
            return False
    return True


def points_in_convex_polygon(points: np.ndarray, vertices: Sequence[Point], tol: float = 1e-9) -> np.ndarray:
    """Vectorised ``point_in_convex_polygon`` over an (N, 2) array."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    verts = np.asarray(vertices, dtype=float)
    inside = np.ones(len(pts), dtype=bool)
    for a, b in zip(verts, np.roll(verts, -1, axis=0)):
        edge_len = max(np.hypot(*(b - a)), 1.0)
        cross = (b[0] - a[0]) * (pts[:, 1] - a[1]) - (b[1] - a[1]) * (pts[:, 0] - a[0])
        inside &= cross >= -tol * edge_len
    return inside


def clip_convex(subject: Sequence[Point], clip: Sequence[Point]) -> list[Point]:
    """Sutherland-Hodgman clipping of ``subject`` against convex CCW ``clip``."""
    output = list(subject)
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a = clip[i]
        b = clip[(i + 1) % n]
        inp = output
        output = []
        prev = inp[-1]
        prev_in = _cross(a, b, prev) >= 0.0
        for cur in inp:
            cur_in = _cross(a, b, cur) >= 0.0
            if cur_in:
                if not prev_in:
                    output.append(_intersect(prev, cur, a, b))
                output.append(cur)
            elif prev_in:
                output.append(_intersect(prev, cur, a, b))
            prev, prev_in = cur, cur_in
    return output


def _intersect(p: Point, q: Point, a: Point, b: Point) -> Point:
    # intersection of segment pq with the infinite line ab
    cp = _cross(a, b, p)
    cq = _cross(a, b, q)
    t = cp / (cp - cq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def rect_corners(cx: float, cy: float, length: float, width: float, phi: float) -> list[Point]:
    """Corners of a rotated rectangle, counter-clockwise.

    ``length`` runs along the heading ``phi``; ``width`` across it.
    """
    c, s = np.cos(phi), np.sin(phi)
    hl, hw = 0.5 * length, 0.5 * width
    local = ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))
    return [(cx + c * u - s * v, cy + s * u + c * v) for u, v in local]


def polygon_contains_polygon(outer: HullPolygon, inner: Sequence[Point], tol: float = 1e-9) -> bool:
    return bool(np.all(outer.contains_points(np.asarray(inner), tol)))
