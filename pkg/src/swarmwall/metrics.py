"""Coverage and mixing-ratio metrics over robot positions."""
from __future__ import annotations

from dataclasses import dataclass

from .geometry import convex_hull, convex_intersection, polygon_area


@dataclass(frozen=True)
class TickMetrics:
    step: int
    coverage_a: float
    coverage_b: float
    mixing: float


def coverage(positions, arena_width, arena_height) -> float:
    """Percent of the arena covered by the convex hull of ``positions``."""
    area = arena_width * arena_height
    if not area > 0:
        raise ValueError("arena area must be positive")
    return 100.0 * polygon_area(convex_hull(positions)) / area


def _mixing_from_hulls(hull_a, hull_b) -> float:
    area_a = polygon_area(hull_a)
    area_b = polygon_area(hull_b)
    inter = polygon_area(convex_intersection(hull_a, hull_b))
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return min(100.0, max(0.0, 100.0 * inter / union))


def mixing_ratio(positions_a, positions_b) -> float:
    """Hull intersection area as a percentage of the hull union area."""
    return _mixing_from_hulls(convex_hull(positions_a), convex_hull(positions_b))


def tick_metrics(step, positions_a, positions_b, arena_width, arena_height) -> TickMetrics:
    # One hull per swarm, shared by both metrics.
    hull_a = convex_hull(positions_a)
    hull_b = convex_hull(positions_b)
    area = arena_width * arena_height
    return TickMetrics(
        step=step,
        coverage_a=100.0 * polygon_area(hull_a) / area,
        coverage_b=100.0 * polygon_area(hull_b) / area,
        mixing=_mixing_from_hulls(hull_a, hull_b),
    )
