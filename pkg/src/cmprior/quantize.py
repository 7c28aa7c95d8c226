"""Sign binarization, straight-through gradients, bit packing and size accounting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidParameterError
from .grid_codec import HashGridParams

FULL_PRECISION_BITS = 32


def binarize(table: np.ndarray) -> np.ndarray:
    """Elementwise sign with ``sign(0) = +1``; keeps the input dtype."""
    t = np.asarray(table)
    if not np.isfinite(t).all():
        raise InvalidParameterError("cannot binarize non-finite values")
    dtype = t.dtype if np.issubdtype(t.dtype, np.floating) else np.float64
    return np.where(t >= 0, 1, -1).astype(dtype)


def ste_grad(upstream: np.ndarray, real_values: np.ndarray | None = None, clip: bool = False) -> np.ndarray:
    """Straight-through gradient of ``binarize``.

    Plain STE passes ``upstream`` unchanged. With ``clip=True`` the gradient
    is zeroed where ``|real_values| > 1``.
    """
    if not clip:
        return upstream
    if real_values is None:
        raise InvalidParameterError("clipped STE needs the real-valued inputs")
    return np.where(np.abs(real_values) <= 1, upstream, 0).astype(upstream.dtype)


@dataclass(frozen=True)
class PackedTable:
    table_len: int
    feature_dim: int
    bits: bytes

    @property
    def row_bytes(self) -> int:
        return (self.feature_dim + 7) // 8

    def __post_init__(self):
        if len(self.bits) != self.table_len * self.row_bytes:
            raise FormatError(
                f"packed buffer holds {len(self.bits)} bytes, "
                f"expected {self.table_len * self.row_bytes}"
            )


def pack_bits(signs: np.ndarray) -> PackedTable:
    """Pack a ``(rows, d)`` table of +-1 values, LSB-first, one padded byte run per row."""
    s = np.asarray(signs)
    if s.ndim != 2:
        raise InvalidParameterError("sign table must be 2-D")
    if not np.isin(s, (-1, 1)).all():
        raise InvalidParameterError("pack_bits expects entries in {-1, +1}")
    bits = np.packbits(s > 0, axis=1, bitorder="little")
    return PackedTable(s.shape[0], s.shape[1], bits.tobytes())


def unpack_bits(packed: PackedTable, dtype=np.float64) -> np.ndarray:
    raw = np.frombuffer(packed.bits, dtype=np.uint8)
    if raw.size != packed.table_len * packed.row_bytes:
        raise FormatError("packed buffer length mismatch")
    bits = np.unpackbits(
        raw.reshape(packed.table_len, packed.row_bytes), axis=1,
        count=packed.feature_dim, bitorder="little",
    )
    return np.where(bits == 1, 1, -1).astype(dtype)


@dataclass(frozen=True)
class MemoryReport:
    per_level_bytes: list[int]
    total_bytes: int
    kb_per_km2: float
    area_km2: float

    @property
    def total_kb(self) -> float:
        return self.total_bytes / 1024.0


def memory_report(params: HashGridParams, binarized: bool = True) -> MemoryReport:
    """Storage needed for the embedding tables (KB = 1024 bytes)."""
    return layout_memory(params.levels, params.feature_dim, params.coverage, binarized)


def layout_memory(levels, feature_dim: int, coverage, binarized: bool = True) -> MemoryReport:
    """Like :func:`memory_report` but from a level layout alone, without tables."""
    min_x, min_y, max_x, max_y = coverage
    area_km2 = (max_x - min_x) * (max_y - min_y) / 1e6
    if area_km2 <= 0:
        raise InvalidParameterError("coverage area must be positive")
    if binarized:
        per_level = [lv.table_len * ((feature_dim + 7) // 8) for lv in levels]
    else:
        per_level = [lv.table_len * feature_dim * FULL_PRECISION_BITS // 8 for lv in levels]
    total = sum(per_level)
    return MemoryReport(per_level, total, total / 1024.0 / area_km2, area_km2)
