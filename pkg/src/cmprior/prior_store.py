"""Prior feature pipeline and the frozen, serialized prior.

The same ``query_points`` routine serves the trainable model (tables binarized
on the fly) and the frozen store (tables unpacked from bits), so both produce
identical numbers for identical parameters.

File layout (little-endian)::

    "CMPP" u16 version u16 L u64 T u16 d f64 s_min f64 growth f64[4] coverage
    L x (u64 table_len, u8 dense)
    L x packed table bytes (table_len * ceil(d/8) each)
    u64 n_arrays, n_arrays x (u64 length, f32[length])     # projection MLP
    u64 n_arrays, n_arrays x (u64 length, f32[length])     # head layers

Array sections hold (weight, bias) pairs; each weight's shape is recovered
as ``(len(weight) // len(bias), len(bias))``.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from .errors import (
    BadMagicError,
    DimensionError,
    FormatError,
    InvalidParameterError,
    OutOfCoverageError,
    TruncatedError,
    VersionMismatchError,
)
from .grid_codec import (
    HashGridParams,
    LevelConfig,
    build_levels,
    encode_multiscale_batch,
    scatter_multiscale_grad,
)
from .quantize import PackedTable, binarize, pack_bits, ste_grad, unpack_bits
from .tensor_nn import MlpWeights, Params, mlp_backward, mlp_forward

log = logging.getLogger(__name__)

MAGIC = b"CMPP"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHHQHdd4d")
LEVEL_RECORD = struct.Struct("<QB")

OUT_OF_COVERAGE_POLICIES = ("zero", "error")


def query_points(levels, tables, mlp: MlpWeights, points: np.ndarray):
    """Encode ``(N, 2)`` points and project them; returns ``(features, caches)``."""
    enc, enc_cache = encode_multiscale_batch(points, levels, tables)
    out, mlp_cache = mlp_forward(enc, mlp)
    return out, (enc_cache, mlp_cache)


@dataclass
class PriorModel:
    """Trainable prior: real-valued tables plus the projection MLP."""

    grid: HashGridParams
    mlp: MlpWeights
    binarized: bool = True
    clip_ste: bool = False

    @classmethod
    def create(
        cls,
        coverage,
        n_levels: int = 4,
        table_size: int = 2**16,
        feature_dim: int = 8,
        s_min: float = 1.0,
        s_max: float = 25.0,
        mlp_widths=(32, 32, 128),
        binarized: bool = True,
        rng: np.random.Generator | None = None,
        dtype=np.float64,
        init_scale: float = 1e-4,
    ) -> "PriorModel":
        rng = np.random.default_rng(0) if rng is None else rng
        grid = HashGridParams.create(
            coverage, n_levels, table_size, feature_dim, s_min, s_max, rng, init_scale, dtype
        )
        mlp = MlpWeights.init([grid.output_dim, *mlp_widths], rng, dtype)
        return cls(grid, mlp, binarized)

    @property
    def out_dim(self) -> int:
        return self.mlp.widths[-1]

    def forward_tables(self) -> list[np.ndarray]:
        if self.binarized:
            return [binarize(t) for t in self.grid.tables]
        return self.grid.tables

    def named(self) -> Params:
        tables = {f"table.{i}": t for i, t in enumerate(self.grid.tables)}
        return {**tables, **self.mlp.named("mlp")}

    def forward(self, points: np.ndarray):
        return query_points(self.grid.levels, self.forward_tables(), self.mlp, points)

    def backward(self, cache, grad_out: np.ndarray):
        """Gradients for all parameters; tables get the straight-through gradient."""
        enc_cache, mlp_cache = cache
        g_enc, grads = mlp_backward(self.mlp, mlp_cache, grad_out, "mlp")
        g_tables = scatter_multiscale_grad(enc_cache, g_enc, self.grid.levels)
        for i, g in enumerate(g_tables):
            if self.binarized:
                g = ste_grad(g, self.grid.tables[i], clip=self.clip_ste)
            grads[f"table.{i}"] = g
        return grads

    def contains(self, points):
        return self.grid.contains(points)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class BinaryPriorStore:
    """Frozen, bit-packed prior. Has no mutating operations."""

    table_size: int
    feature_dim: int
    s_min: float
    growth: float
    coverage: tuple[float, float, float, float]
    levels: tuple[LevelConfig, ...]
    packed: tuple[PackedTable, ...]
    mlp_arrays: tuple[np.ndarray, ...]
    head_arrays: tuple[np.ndarray, ...] = ()
    version: int = FORMAT_VERSION
    _signs: tuple[np.ndarray, ...] = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        for name in ("mlp_arrays", "head_arrays"):
            arrays = tuple(_readonly(np.asarray(a, dtype=np.float32)) for a in getattr(self, name))
            if len(arrays) % 2:
                raise FormatError(f"{name} must hold (weight, bias) pairs")
            object.__setattr__(self, name, arrays)
        signs = tuple(_readonly(unpack_bits(p, np.float32)) for p in self.packed)
        object.__setattr__(self, "_signs", signs)

    @property
    def mlp(self) -> MlpWeights:
        return _pairs_to_mlp(self.mlp_arrays)

    @property
    def head(self) -> MlpWeights | None:
        return _pairs_to_mlp(self.head_arrays) if self.head_arrays else None

    @property
    def sign_tables(self) -> tuple[np.ndarray, ...]:
        return self._signs

    @property
    def out_dim(self) -> int:
        return self.mlp_arrays[-1].shape[0]

    def contains(self, points):
        pts = np.asarray(points, dtype=np.float64)
        min_x, min_y, max_x, max_y = self.coverage
        return (
            (pts[..., 0] >= min_x) & (pts[..., 0] <= max_x)
            & (pts[..., 1] >= min_y) & (pts[..., 1] <= max_y)
        )

    def forward(self, points: np.ndarray):
        return query_points(self.levels, self._signs, self.mlp, points)


def _pairs_to_mlp(arrays) -> MlpWeights:
    ws, bs = [], []
    for w, b in zip(arrays[0::2], arrays[1::2]):
        if w.size % b.size:
            raise FormatError("weight length is not a multiple of its bias length")
        ws.append(w.reshape(w.size // b.size, b.size))
        bs.append(b)
    return MlpWeights(ws, bs)


def _mlp_to_pairs(mlp: MlpWeights) -> tuple[np.ndarray, ...]:
    out = []
    for w, b in zip(mlp.weights, mlp.biases):
        out += [w, b]
    return tuple(out)


def prior_features(source, grid_global: np.ndarray, policy: str = "zero", chunk: int = 65536) -> np.ndarray:
    """Prior feature map ``(h, w, out)`` for global query coordinates ``(h, w, 2)``.

    Points outside the coverage rectangle get all-zero features under the
    ``"zero"`` policy and raise :class:`OutOfCoverageError` under ``"error"``.
    """
    if policy not in OUT_OF_COVERAGE_POLICIES:
        raise InvalidParameterError(f"unknown out-of-coverage policy {policy!r}")
    pts = np.asarray(grid_global, dtype=np.float64)
    lead = pts.shape[:-1]
    flat = pts.reshape(-1, 2)
    if not np.isfinite(flat).all():
        raise InvalidParameterError("query coordinates must be finite")
    inside = source.contains(flat)
    n_out = int((~inside).sum())
    if n_out and policy == "error":
        raise OutOfCoverageError(f"{n_out} query points fall outside the prior coverage")
    if n_out:
        log.warning("%d of %d query points outside coverage; substituting zero features", n_out, len(flat))
    dtype = source.mlp_arrays[0].dtype if isinstance(source, BinaryPriorStore) else source.mlp.weights[0].dtype
    out = np.zeros((len(flat), source.out_dim), dtype=dtype)
    idx = np.flatnonzero(inside)
    for start in range(0, len(idx), chunk):
        sel = idx[start:start + chunk]
        out[sel] = source.forward(flat[sel])[0]
    return out.reshape(*lead, source.out_dim)


def freeze(model: PriorModel, head: MlpWeights | None = None) -> BinaryPriorStore:
    """Binarize and pack the tables; weights are stored as float32."""
    for t in model.grid.tables:
        if not np.isfinite(t).all():
            raise InvalidParameterError("cannot freeze non-finite parameters")
    g = model.grid
    packed = tuple(pack_bits(binarize(t)) for t in g.tables)
    return BinaryPriorStore(
        table_size=g.table_size,
        feature_dim=g.feature_dim,
        s_min=float(g.s_min),
        growth=float(g.growth),
        coverage=tuple(float(c) for c in g.coverage),
        levels=tuple(g.levels),
        packed=packed,
        mlp_arrays=_mlp_to_pairs(model.mlp),
        head_arrays=_mlp_to_pairs(head) if head is not None else (),
    )


# ------------------------------------------------------------------ bytes I/O


def _write_arrays(buf: BinaryIO, arrays) -> None:
    buf.write(struct.pack("<Q", len(arrays)))
    for a in arrays:
        data = np.ascontiguousarray(a, dtype="<f4").reshape(-1)
        buf.write(struct.pack("<Q", data.size))
        buf.write(data.tobytes())


def to_bytes(store: BinaryPriorStore) -> bytes:
    buf = io.BytesIO()
    buf.write(HEADER.pack(
        MAGIC, store.version, len(store.levels), store.table_size, store.feature_dim,
        store.s_min, store.growth, *store.coverage,
    ))
    for lv in store.levels:
        buf.write(LEVEL_RECORD.pack(lv.table_len, int(lv.dense)))
    for p in store.packed:
        buf.write(p.bits)
    _write_arrays(buf, store.mlp_arrays)
    _write_arrays(buf, store.head_arrays)
    return buf.getvalue()


def save(store: BinaryPriorStore, sink) -> None:
    """Write to a path or a binary file object."""
    data = to_bytes(store)
    if hasattr(sink, "write"):
        sink.write(data)
    else:
        with open(sink, "wb") as fh:
            fh.write(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"file ends inside {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct, what: str):
        return st.unpack(self.take(st.size, what))

    def arrays(self, what: str) -> tuple[np.ndarray, ...]:
        (count,) = struct.unpack("<Q", self.take(8, what))
        out = []
        for _ in range(count):
            (n,) = struct.unpack("<Q", self.take(8, what))
            out.append(np.frombuffer(self.take(4 * n, what), dtype="<f4").astype(np.float32))
        return tuple(out)


def from_bytes(data: bytes) -> BinaryPriorStore:
    r = _Reader(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"not a prior file (magic {data[:4]!r})")
    magic, version, n_levels, table_size, d, s_min, growth, *coverage = r.unpack(HEADER, "header")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, expected {FORMAT_VERSION}")
    coverage = tuple(coverage)
    records = [r.unpack(LEVEL_RECORD, "level records") for _ in range(n_levels)]
    expected = build_levels(n_levels, table_size, coverage, s_min, growth)
    levels = []
    for lv, (table_len, dense) in zip(expected, records):
        if lv.table_len != table_len or lv.dense != bool(dense):
            raise FormatError(f"level {lv.level_index} record disagrees with header geometry")
        levels.append(lv)
    row_bytes = (d + 7) // 8
    packed = tuple(
        PackedTable(lv.table_len, d, r.take(lv.table_len * row_bytes, f"table {lv.level_index}"))
        for lv in levels
    )
    mlp_arrays = r.arrays("projection weights")
    head_arrays = r.arrays("head weights")
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes")
    if not mlp_arrays:
        raise FormatError("missing projection weights")
    store = BinaryPriorStore(
        table_size, d, s_min, growth, coverage, tuple(levels), packed, mlp_arrays, head_arrays, version
    )
    if store.mlp.widths[0] != n_levels * d:
        raise DimensionError("projection input width does not match L*d")
    return store


def load(source) -> BinaryPriorStore:
    """Read from a path, a binary file object, or raw bytes."""
    if isinstance(source, (bytes, bytearray)):
        return from_bytes(bytes(source))
    if hasattr(source, "read"):
        return from_bytes(source.read())
    with open(source, "rb") as fh:
        return from_bytes(fh.read())
