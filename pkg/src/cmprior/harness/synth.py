"""Procedural semantic maps with a coarse and a fine foreground class."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidParameterError
from .raster import RasterMap

BACKGROUND, ROAD, DIVIDER = 0, 1, 2
CLASS_NAMES = ("background", "road", "divider")


def synth_map(
    seed: int,
    area_m: float = 1000.0,
    meters_per_cell: float = 0.5,
    n_roads: int = 7,
    road_width: tuple[float, float] = (12.0, 24.0),
) -> RasterMap:
    """Straight roads plus one ring road over a square of side ``area_m``.

    Each road is a band around its centerline; a one-cell divider is drawn
    on the centerline itself, so dividers always lie inside roads.
    """
    if area_m < 100:
        raise InvalidParameterError("map side must be at least 100 m")
    rng = np.random.default_rng(seed)
    n = int(round(area_m / meters_per_cell))
    centers = (np.arange(n) + 0.5) * meters_per_cell
    xs = centers[None, :]
    ys = centers[:, None]
    road = np.zeros((n, n), dtype=bool)
    divider = np.zeros((n, n), dtype=bool)
    half_cell = 0.5 * meters_per_cell

    def draw(dist: np.ndarray, width: float) -> None:
        road[dist < width / 2] = True
        divider[dist < half_cell] = True

    for _ in range(n_roads):
        p = rng.uniform(0.1 * area_m, 0.9 * area_m, size=2)
        angle = rng.uniform(0, np.pi)
        # distance to the infinite line through p with direction angle
        dist = np.abs((xs - p[0]) * np.sin(angle) - (ys - p[1]) * np.cos(angle))
        draw(dist, rng.uniform(*road_width))
    c = rng.uniform(0.35 * area_m, 0.65 * area_m, size=2)
    radius = rng.uniform(0.15 * area_m, 0.3 * area_m)
    dist = np.abs(np.hypot(xs - c[0], ys - c[1]) - radius)
    draw(dist, rng.uniform(*road_width))

    data = np.full((n, n), BACKGROUND, dtype=np.uint8)
    data[road] = ROAD
    data[divider & road] = DIVIDER
    return RasterMap(n, n, meters_per_cell, 3, data)
