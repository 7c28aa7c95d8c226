"""Multi-resolution spatial hash encoding over 2D world coordinates.

Each level discretizes the plane into square cells of side ``cell_side``.
A query point is mapped to the four lattice vertices of its cell, each
vertex selects a row of the level's embedding table (through a spatial
hash, or a direct index for levels small enough to store densely), and
the rows are blended with bilinear weights. Level outputs are
concatenated in ascending level order.

All functions accept either a single point or a batch of shape ``(N, 2)``.
The batched ``*_batch`` variants additionally return the row indices and
weights needed to scatter gradients back into the tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DimensionError, InvalidParameterError, OutOfCoverageError

HASH_PRIMES = (1, 2654435761)

# corner offsets in the order (0,0), (1,0), (0,1), (1,1)
CORNER_OFFSETS = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], dtype=np.int64)

Coverage = tuple[float, float, float, float]


@dataclass(frozen=True)
class LevelConfig:
    level_index: int
    cell_side: float
    table_len: int
    dense: bool
    # lattice index of the lowest covered vertex and vertex counts per axis;
    # only meaningful for dense levels
    origin: tuple[int, int] = (0, 0)
    shape: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if not self.cell_side > 0:
            raise InvalidParameterError(f"cell_side must be positive, got {self.cell_side}")
        if self.table_len < 1:
            raise InvalidParameterError("table_len must be >= 1")
        if self.dense and self.shape[0] * self.shape[1] != self.table_len:
            raise InvalidParameterError("dense level shape does not match table_len")
        if not self.dense and self.table_len & (self.table_len - 1):
            raise InvalidParameterError("hashed levels need a power-of-two table_len")


def level_growth(n_levels: int, s_min: float, s_max: float) -> float:
    """Geometric growth factor between consecutive cell sides."""
    if n_levels == 1:
        return 1.0
    return (s_max / s_min) ** (1.0 / (n_levels - 1))


def lattice_extent(coverage: Coverage, cell_side: float) -> tuple[tuple[int, int], tuple[int, int]]:
    """Origin and per-axis vertex counts of the lattice covering ``coverage``."""
    min_x, min_y, max_x, max_y = coverage
    o0, o1 = math.floor(min_x / cell_side), math.floor(min_y / cell_side)
    n0 = math.floor(max_x / cell_side) - o0 + 2
    n1 = math.floor(max_y / cell_side) - o1 + 2
    return (o0, o1), (n0, n1)


def build_levels(
    n_levels: int,
    table_size: int,
    coverage: Coverage,
    s_min: float = 1.0,
    growth: float | None = None,
    s_max: float = 25.0,
) -> list[LevelConfig]:
    """Level layout for a coverage rectangle.

    Cell sides follow ``s_min * growth**l``. A level is stored densely when
    its covering lattice has fewer vertices than ``table_size``.
    """
    if n_levels < 1:
        raise InvalidParameterError("need at least one level")
    if table_size < 1 or table_size & (table_size - 1):
        raise InvalidParameterError(f"table_size must be a power of two, got {table_size}")
    min_x, min_y, max_x, max_y = coverage
    if not (max_x > min_x and max_y > min_y):
        raise InvalidParameterError(f"degenerate coverage {coverage}")
    if growth is None:
        growth = level_growth(n_levels, s_min, s_max)
    levels = []
    for l in range(n_levels):
        side = s_min * growth**l
        origin, shape = lattice_extent(coverage, side)
        n_vertices = shape[0] * shape[1]
        if n_vertices < table_size:
            levels.append(LevelConfig(l, side, n_vertices, True, origin, shape))
        else:
            levels.append(LevelConfig(l, side, table_size, False))
    return levels


@dataclass
class HashGridParams:
    """Configuration plus real-valued embedding tables of every level."""

    levels: list[LevelConfig]
    feature_dim: int
    tables: list[np.ndarray]
    coverage: Coverage
    table_size: int
    s_min: float = 1.0
    growth: float = field(default_factory=lambda: level_growth(4, 1.0, 25.0))

    def __post_init__(self):
        if self.feature_dim < 1:
            raise InvalidParameterError("feature_dim must be >= 1")
        if len(self.tables) != len(self.levels):
            raise DimensionError("one table per level required")
        for level, table in zip(self.levels, self.tables):
            if table.shape != (level.table_len, self.feature_dim):
                raise DimensionError(
                    f"level {level.level_index}: table shape {table.shape}, "
                    f"expected {(level.table_len, self.feature_dim)}"
                )

    @classmethod
    def create(
        cls,
        coverage: Coverage,
        n_levels: int = 4,
        table_size: int = 2**16,
        feature_dim: int = 8,
        s_min: float = 1.0,
        s_max: float = 25.0,
        rng: np.random.Generator | None = None,
        init_scale: float = 1e-4,
        dtype=np.float64,
    ) -> "HashGridParams":
        growth = level_growth(n_levels, s_min, s_max)
        levels = build_levels(n_levels, table_size, coverage, s_min, growth)
        rng = np.random.default_rng(0) if rng is None else rng
        tables = [
            rng.uniform(-init_scale, init_scale, size=(lv.table_len, feature_dim)).astype(dtype)
            for lv in levels
        ]
        return cls(levels, feature_dim, tables, tuple(map(float, coverage)), table_size, s_min, growth)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def output_dim(self) -> int:
        return self.n_levels * self.feature_dim

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of points inside the (closed) coverage rectangle."""
        pts = np.asarray(points, dtype=np.float64)
        min_x, min_y, max_x, max_y = self.coverage
        return (
            (pts[..., 0] >= min_x) & (pts[..., 0] <= max_x)
            & (pts[..., 1] >= min_y) & (pts[..., 1] <= max_y)
        )


class CornerSet(NamedTuple):
    corners: np.ndarray  # (4, 2) int64
    weights: np.ndarray  # (4,) float64


def hash_index(y, level: LevelConfig):
    """Table row for integer lattice coordinate(s) ``y`` (shape ``(..., 2)``)."""
    arr = np.asarray(y, dtype=np.int64)
    scalar = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[-1] != 2:
        raise DimensionError("lattice coordinates must have 2 components")
    if level.dense:
        rel0 = arr[..., 0] - level.origin[0]
        rel1 = arr[..., 1] - level.origin[1]
        if (
            (rel0 < 0).any() or (rel1 < 0).any()
            or (rel0 >= level.shape[0]).any() or (rel1 >= level.shape[1]).any()
        ):
            raise OutOfCoverageError(f"lattice point outside dense level {level.level_index}")
        out = rel0 * level.shape[1] + rel1
    else:
        # int64 -> uint64 is a two's-complement reinterpretation; products wrap mod 2**64
        u = arr.astype(np.uint64)
        h = (u[..., 0] * np.uint64(HASH_PRIMES[0])) ^ (u[..., 1] * np.uint64(HASH_PRIMES[1]))
        out = (h & np.uint64(level.table_len - 1)).astype(np.int64)
    return int(out[0]) if scalar else out


def corner_batch(points: np.ndarray, cell_side: float) -> tuple[np.ndarray, np.ndarray]:
    """Corners ``(N, 4, 2)`` and bilinear weights ``(N, 4)`` for points ``(N, 2)``."""
    scaled = np.asarray(points, dtype=np.float64) / cell_side
    # snap values within a few ulps of an integer so vertex queries are exact
    nearest = np.rint(scaled)
    snap = np.abs(scaled - nearest) <= 8 * np.finfo(np.float64).eps * np.maximum(1.0, np.abs(scaled))
    scaled = np.where(snap, nearest, scaled)
    base = np.floor(scaled)
    frac = scaled - base
    fx, fy = frac[:, 0], frac[:, 1]
    gx, gy = 1.0 - fx, 1.0 - fy
    weights = np.stack([gx * gy, fx * gy, gx * fy, fx * fy], axis=1)
    corners = base.astype(np.int64)[:, None, :] + CORNER_OFFSETS[None]
    return corners, weights


def corner_coords(x, level: LevelConfig) -> CornerSet:
    pt = np.asarray(x, dtype=np.float64).reshape(1, 2)
    if not np.isfinite(pt).all():
        raise InvalidParameterError("query point must be finite")
    corners, weights = corner_batch(pt, level.cell_side)
    return CornerSet(corners[0], weights[0])


def encode_level_batch(points: np.ndarray, level: LevelConfig, table: np.ndarray):
    """Interpolated level features for a batch.

    Returns:
        features ``(N, d)`` in the table's dtype, plus the gathered row
        indices ``(N, 4)`` and weights ``(N, 4)`` for the backward pass.
    """
    if table.shape[0] != level.table_len:
        raise DimensionError(
            f"table has {table.shape[0]} rows, level {level.level_index} expects {level.table_len}"
        )
    corners, weights = corner_batch(points, level.cell_side)
    rows = hash_index(corners.reshape(-1, 2), level).reshape(-1, 4)
    w = weights.astype(table.dtype, copy=False)
    feats = w[:, 0, None] * table[rows[:, 0]]
    for k in range(1, 4):
        feats += w[:, k, None] * table[rows[:, k]]
    return feats, rows, weights


def encode_level(x, level: LevelConfig, table: np.ndarray) -> np.ndarray:
    feats, _, _ = encode_level_batch(np.asarray(x, dtype=np.float64).reshape(1, 2), level, table)
    return feats[0]


def encode_multiscale_batch(
    points: np.ndarray, levels: Sequence[LevelConfig], tables: Sequence[np.ndarray]
):
    """Concatenated features ``(N, L*d)`` and per-level (rows, weights) caches."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    parts, cache = [], []
    for level, table in zip(levels, tables):
        feats, rows, weights = encode_level_batch(pts, level, table)
        parts.append(feats)
        cache.append((rows, weights))
    return np.concatenate(parts, axis=1), cache


def encode_multiscale(x, params: HashGridParams, tables: Sequence[np.ndarray] | None = None) -> np.ndarray:
    """Multi-level encoding of one point (or a batch of points).

    ``tables`` overrides ``params.tables``, e.g. with their binarized form.
    """
    tables = params.tables if tables is None else tables
    pts = np.asarray(x, dtype=np.float64)
    feats, _ = encode_multiscale_batch(pts.reshape(-1, 2), params.levels, tables)
    return feats[0] if pts.ndim == 1 else feats


def scatter_level_grad(
    rows: np.ndarray, weights: np.ndarray, grad_feats: np.ndarray, table_len: int
) -> np.ndarray:
    """Gradient of a level's table given the gradient of its output features."""
    n, d = grad_feats.shape
    contrib = weights.astype(grad_feats.dtype, copy=False)[:, :, None] * grad_feats[:, None, :]
    flat_idx = (rows[:, :, None] * d + np.arange(d)).ravel()
    grad = np.bincount(flat_idx, weights=contrib.ravel(), minlength=table_len * d)
    return grad.reshape(table_len, d).astype(grad_feats.dtype, copy=False)


def scatter_multiscale_grad(cache, grad_feats: np.ndarray, levels: Sequence[LevelConfig]) -> list[np.ndarray]:
    d = grad_feats.shape[1] // len(levels)
    return [
        scatter_level_grad(rows, weights, grad_feats[:, i * d:(i + 1) * d], level.table_len)
        for i, (level, (rows, weights)) in enumerate(zip(levels, cache))
    ]
