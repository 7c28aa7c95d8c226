"""Ego-centric query grids, rigid 2D poses, BEV augmentation and patch masking.

Grid axes are (forward, left); grids are row-major ``(h, w, 2)`` arrays where
row ``i`` runs along the forward axis and column ``j`` along the left axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError


@dataclass(frozen=True)
class Pose2:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if m.shape != (2, 2) or t.shape != (2,):
            raise InvalidParameterError("pose needs a 2x2 rotation and a 2-vector translation")
        if not np.allclose(m.T @ m, np.eye(2), atol=1e-9, rtol=0) or abs(np.linalg.det(m) - 1) > 1e-9:
            raise InvalidParameterError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", m)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_angle(cls, yaw: float, tx: float = 0.0, ty: float = 0.0) -> "Pose2":
        c, s = math.cos(yaw), math.sin(yaw)
        return cls(np.array([[c, -s], [s, c]]), np.array([tx, ty]))

    @classmethod
    def identity(cls) -> "Pose2":
        return cls(np.eye(2), np.zeros(2))

    def inverse(self) -> "Pose2":
        mt = self.rotation.T
        return Pose2(mt, -mt @ self.translation)


@dataclass(frozen=True)
class GridSpec:
    h: int
    w: int
    extent: float

    def __post_init__(self):
        if self.h < 1 or self.w < 1 or not self.extent > 0:
            raise InvalidParameterError(f"invalid grid spec {self}")


def make_ego_grid(spec: GridSpec) -> np.ndarray:
    """Cell-center coordinates of an ego-centered grid, shape ``(h, w, 2)``."""
    fwd = ((np.arange(spec.h) + 0.5) / spec.h - 0.5) * spec.extent
    left = ((np.arange(spec.w) + 0.5) / spec.w - 0.5) * spec.extent
    grid = np.empty((spec.h, spec.w, 2))
    grid[..., 0] = fwd[:, None]
    grid[..., 1] = left[None, :]
    return grid


def apply_pose(grid: np.ndarray, pose: Pose2) -> np.ndarray:
    return grid @ pose.rotation.T + pose.translation


@dataclass(frozen=True)
class BevAugment:
    flip_x: bool = False
    flip_y: bool = False
    rotate_angle: float = 0.0
    scale: float = 1.0


def bev_augment(grid: np.ndarray, aug: BevAugment) -> np.ndarray:
    """Augment query coordinates: flips, then scaling, then rotation."""
    if not aug.scale > 0:
        raise InvalidParameterError("augmentation scale must be positive")
    out = np.array(grid, dtype=np.float64, copy=True)
    if aug.flip_x:
        out[..., 0] = -out[..., 0]
    if aug.flip_y:
        out[..., 1] = -out[..., 1]
    if aug.scale != 1.0:
        out *= aug.scale
    if aug.rotate_angle:
        c, s = math.cos(aug.rotate_angle), math.sin(aug.rotate_angle)
        out = out @ np.array([[c, -s], [s, c]]).T
    return out


def patch_mask(h: int, w: int, ratio: float, seed: int, patch: int = 8) -> np.ndarray:
    """Boolean ``(h, w)`` mask made of whole ``patch x patch`` tiles.

    ``round(ratio * n_tiles)`` tiles are picked without replacement, so the
    masked fraction is exact whenever ``patch`` divides both extents.
    """
    if not 0.0 <= ratio <= 1.0:
        raise InvalidParameterError(f"mask ratio must be in [0, 1], got {ratio}")
    th, tw = -(-h // patch), -(-w // patch)
    n_tiles = th * tw
    n_masked = int(round(ratio * n_tiles))
    tiles = np.zeros(n_tiles, dtype=bool)
    if n_masked:
        rng = np.random.default_rng(seed)
        tiles[rng.choice(n_tiles, size=n_masked, replace=False)] = True
    tiles = tiles.reshape(th, tw)
    return np.repeat(np.repeat(tiles, patch, axis=0), patch, axis=1)[:h, :w]


def random_patch_mask(
    features: np.ndarray, ratio: float, mask_token: np.ndarray, rng_seed: int, patch: int = 8
) -> np.ndarray:
    """Replace random square patches of an ``(h, w, c)`` map with ``mask_token``."""
    h, w, c = features.shape
    if np.shape(mask_token) != (c,):
        raise InvalidParameterError("mask token width must match the feature channels")
    mask = patch_mask(h, w, ratio, rng_seed, patch)
    out = features.copy()
    out[mask] = mask_token
    return out
