"""Initial placements for the five two-swarm starting configurations.

Case 1: A on the left edge band, B on the right edge band.
Case 2: A in a band centred 1/8 of the arena width from the left edge, B on the right edge band.
Case 3: both swarms uniform over the whole arena.
Case 4: concentric rings, B inside, A outside.
Case 5: both swarms uniform in a small box at the arena centre.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_REJECTIONS = 10_000


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    case_id: int = 1
    n_a: int = 30
    n_b: int = 30
    band_fraction: float = 1 / 16
    offset_fraction: float = 1 / 8
    inner_radius: float = 0.15
    outer_radius: float = 0.30
    center_box_fraction: float = 0.2

    def __post_init__(self):
        if self.case_id not in (1, 2, 3, 4, 5):
            raise ScenarioError(f"case_id must be 1..5, got {self.case_id}")
        if self.n_a < 1 or self.n_b < 1:
            raise ScenarioError("each swarm needs at least one robot")
        for name in ("band_fraction", "offset_fraction", "inner_radius", "outer_radius", "center_box_fraction"):
            if not 0 < getattr(self, name) < 1:
                raise ScenarioError(f"{name} must lie in (0, 1)")
        if not self.inner_radius < self.outer_radius:
            raise ScenarioError("inner_radius must be smaller than outer_radius")


def _rect_sampler(x0, x1, y0, y1):
    def draw(rng):
        return rng.uniform(x0, x1), rng.uniform(y0, y1)
    return draw


def _rejection_fill(placed, n, draw, min_dist, rng):
    min_d2 = min_dist * min_dist
    for _ in range(n):
        for _attempt in range(MAX_REJECTIONS):
            x, y = draw(rng)
            if all((x - px) ** 2 + (y - py) ** 2 >= min_d2 for px, py in placed):
                placed.append((x, y))
                break
        else:
            raise ScenarioError(f"could not place robot without overlap after {MAX_REJECTIONS} samples")


def _ring(n, radius, cx, cy, rng):
    phase = rng.uniform(-np.pi, np.pi)
    ang = phase + 2 * np.pi * np.arange(n) / n
    return np.column_stack([cx + radius * np.cos(ang), cy + radius * np.sin(ang)])


def place(scenario: ScenarioSpec, config, rng) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(positions_a, positions_b)`` with pairwise gaps >= 2 robot radii."""
    W, H, r = config.arena_width, config.arena_height, config.robot_radius
    min_dist = 2 * r
    case = scenario.case_id
    band = scenario.band_fraction * W

    if case == 4:
        cx, cy = W / 2, H / 2
        rin = scenario.inner_radius * W
        rout = scenario.outer_radius * W
        if rout + r > min(cx, cy):
            raise ScenarioError("outer ring does not fit in the arena")
        b = _ring(scenario.n_b, rin, cx, cy, rng)
        a = _ring(scenario.n_a, rout, cx, cy, rng)
        for ring in (a, b):
            if len(ring) > 1 and np.linalg.norm(ring[0] - ring[1]) < min_dist:
                raise ScenarioError("ring too crowded for non-overlapping placement")
        return a, b

    if case == 1:
        draw_a = _rect_sampler(r, band - r, r, H - r)
        draw_b = _rect_sampler(W - band + r, W - r, r, H - r)
    elif case == 2:
        c = scenario.offset_fraction * W
        draw_a = _rect_sampler(max(r, c - band / 2), min(W - r, c + band / 2), r, H - r)
        draw_b = _rect_sampler(W - band + r, W - r, r, H - r)
    elif case == 3:
        draw_a = draw_b = _rect_sampler(r, W - r, r, H - r)
    else:
        side = scenario.center_box_fraction * min(W, H)
        x0, y0 = (W - side) / 2, (H - side) / 2
        draw_a = draw_b = _rect_sampler(x0 + r, x0 + side - r, y0 + r, y0 + side - r)

    placed = []
    _rejection_fill(placed, scenario.n_a, draw_a, min_dist, rng)
    _rejection_fill(placed, scenario.n_b, draw_b, min_dist, rng)
    pts = np.array(placed, dtype=float)
    return pts[: scenario.n_a], pts[scenario.n_a:]
