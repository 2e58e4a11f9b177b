"""Planar convex geometry used by the coverage and mixing metrics.

Polygons are stored as ``(k, 2)`` float arrays of vertices in counter-clockwise
order. The empty polygon (``k == 0``) stands in for every degenerate result:
fewer than three non-collinear points, disjoint intersections, and so on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS_GEO = 1e-9


class GeometryError(ValueError):
    """Raised for invalid geometric input (e.g. NaN or infinite coordinates)."""


@dataclass(frozen=True)
class ConvexPolygon:
    vertices: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 2)
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    def __len__(self):
        return len(self.vertices)

    @property
    def is_empty(self):
        return len(self.vertices) < 3

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 2)))


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points) -> ConvexPolygon:
    """Strict convex hull by Andrew's monotone chain.

    Collinear boundary points are dropped. Returns the empty polygon when
    the input has fewer than three non-collinear points.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if not np.all(np.isfinite(pts)):
        raise GeometryError("convex_hull: non-finite coordinate in input")
    if len(pts) < 3:
        return ConvexPolygon.empty()
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    p = [tuple(q) for q in pts[order].tolist()]

    lower = []
    for q in p:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], q) <= EPS_GEO:
            lower.pop()
        lower.append(q)
    upper = []
    for q in reversed(p):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], q) <= EPS_GEO:
            upper.pop()
        upper.append(q)
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        return ConvexPolygon.empty()
    return ConvexPolygon(np.array(hull))


def polygon_area(poly: ConvexPolygon) -> float:
    if poly.is_empty:
        return 0.0
    x = poly.vertices[:, 0]
    y = poly.vertices[:, 1]
    a = 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
    return max(a, 0.0)


def contains(poly: ConvexPolygon, point, tol=EPS_GEO) -> bool:
    """Inside-or-on test; ``tol`` is the allowed negative signed area."""
    if poly.is_empty:
        return False
    v = poly.vertices
    px, py = float(point[0]), float(point[1])
    for i in range(len(v)):
        a = v[i]
        b = v[(i + 1) % len(v)]
        if _cross(a, b, (px, py)) < -tol:
            return False
    return True


def _clip(subject, a, b):
    # Keep the part of ``subject`` on the left of the directed line a->b.
    out = []
    n = len(subject)
    if n == 0:
        return out
    ax, ay = a
    dx, dy = b[0] - ax, b[1] - ay
    side = [dx * (q[1] - ay) - dy * (q[0] - ax) for q in subject]
    for i in range(n):
        cur, nxt = subject[i], subject[(i + 1) % n]
        sc, sn = side[i], side[(i + 1) % n]
        if sc >= 0:
            out.append(cur)
        if (sc >= 0) != (sn >= 0):
            t = sc / (sc - sn)
            out.append((cur[0] + t * (nxt[0] - cur[0]), cur[1] + t * (nxt[1] - cur[1])))
    return out


def convex_intersection(a: ConvexPolygon, b: ConvexPolygon) -> ConvexPolygon:
    """Sutherland-Hodgman clip of ``a`` by each half-plane of ``b``."""
    if a.is_empty or b.is_empty:
        return ConvexPolygon.empty()
    subject = [tuple(q) for q in a.vertices.tolist()]
    clip = [tuple(q) for q in b.vertices.tolist()]
    for i in range(len(clip)):
        subject = _clip(subject, clip[i], clip[(i + 1) % len(clip)])
        if len(subject) < 3:
            return ConvexPolygon.empty()
    # Clipping can leave duplicate or collinear vertices; tidy them up.
    return convex_hull(subject)


def union_area(a: ConvexPolygon, b: ConvexPolygon) -> float:
    return polygon_area(a) + polygon_area(b) - polygon_area(convex_intersection(a, b))
