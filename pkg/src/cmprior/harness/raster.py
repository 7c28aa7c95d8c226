"""Semantic raster maps and their ``CMPR`` file format.

Row ``r`` / column ``c`` covers world cell ``[c, c+1) x [r, r+1)`` scaled by
``meters_per_cell``; the map's lower-left corner is the world origin.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ..errors import BadMagicError, DimensionError, InvalidParameterError, TruncatedError

MAGIC = b"CMPR"
HEADER = struct.Struct("<4sIIHd")


@dataclass
class RasterMap:
    width: int
    height: int
    meters_per_cell: float
    classes: int
    data: np.ndarray  # (height, width) uint8

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        if self.data.shape != (self.height, self.width):
            raise DimensionError(f"data shape {self.data.shape} != {(self.height, self.width)}")
        if not self.meters_per_cell > 0:
            raise InvalidParameterError("meters_per_cell must be positive")
        if self.data.size and self.data.max() >= self.classes:
            raise InvalidParameterError("class index out of range")

    @property
    def coverage(self) -> tuple[float, float, float, float]:
        return (0.0, 0.0, self.width * self.meters_per_cell, self.height * self.meters_per_cell)

    def cell_centers(self, flat_index: np.ndarray) -> np.ndarray:
        """World coordinates ``(N, 2)`` of the given row-major cell indices."""
        r, c = np.divmod(np.asarray(flat_index), self.width)
        return np.stack([(c + 0.5) * self.meters_per_cell, (r + 0.5) * self.meters_per_cell], axis=1)

    def class_fractions(self) -> np.ndarray:
        return np.bincount(self.data.ravel(), minlength=self.classes) / self.data.size


def save_raster(raster: RasterMap, path) -> None:
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, raster.width, raster.height, raster.classes, raster.meters_per_cell))
        fh.write(np.ascontiguousarray(raster.data, dtype=np.uint8).tobytes())


def load_raster(path) -> RasterMap:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise BadMagicError(f"not a raster file (magic {data[:4]!r})")
    if len(data) < HEADER.size:
        raise TruncatedError("raster header truncated")
    _, width, height, classes, mpc = HEADER.unpack_from(data)
    body = data[HEADER.size:]
    if len(body) != width * height:
        raise TruncatedError(f"raster body has {len(body)} bytes, expected {width * height}")
    cells = np.frombuffer(body, dtype=np.uint8).reshape(height, width).copy()
    return RasterMap(width, height, mpc, classes, cells)
