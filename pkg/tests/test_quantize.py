import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cmprior.errors import FormatError, InvalidParameterError
from cmprior.grid_codec import HashGridParams, encode_multiscale, encode_level_batch, scatter_level_grad, LevelConfig
from cmprior.quantize import PackedTable, binarize, memory_report, pack_bits, ste_grad, unpack_bits

PAPER_TABLE_KB = {2**15: (106.0, 16.6), 2**16: (202.0, 31.6), 2**17: (351.4, 55.0), 2**18: (607.4, 95.0)}


def test_binarize_examples():
    np.testing.assert_array_equal(binarize(np.array([0.3, -0.7, 0.0])), [1, -1, 1])
    np.testing.assert_array_equal(binarize(-np.ones((3, 2))), -np.ones((3, 2)))
    with pytest.raises(InvalidParameterError):
        binarize(np.array([1.0, np.nan]))


def test_ste_is_identity():
    g = np.random.default_rng(0).normal(size=(5, 8))
    np.testing.assert_array_equal(ste_grad(g), g)
    np.testing.assert_array_equal(ste_grad(np.zeros(4)), np.zeros(4))
    clipped = ste_grad(np.ones(3), np.array([0.5, 1.5, -2.0]), clip=True)
    np.testing.assert_array_equal(clipped, [1, 0, 0])


def test_ste_chain_matches_surrogate():
    # with sign replaced by identity the chain is linear in the table
    rng = np.random.default_rng(1)
    level = LevelConfig(0, 1.0, 32, False)
    real = rng.normal(size=(32, 8))
    pts = rng.uniform(0, 10, size=(6, 2))
    up = rng.normal(size=(6, 8))
    _, rows, weights = encode_level_batch(pts, level, binarize(real))
    ste = ste_grad(scatter_level_grad(rows, weights, up, 32))
    h = 1e-6
    fd = np.zeros_like(real)
    for idx in np.ndindex(real.shape):
        plus, minus = real.copy(), real.copy()
        plus[idx] += h
        minus[idx] -= h
        fp = (encode_level_batch(pts, level, plus)[0] * up).sum()
        fm = (encode_level_batch(pts, level, minus)[0] * up).sum()
        fd[idx] = (fp - fm) / (2 * h)
    np.testing.assert_allclose(ste, fd, rtol=1e-6, atol=1e-8)


def test_pack_examples():
    row = np.array([[1, -1, 1, 1, -1, -1, 1, -1]])
    assert pack_bits(row).bits == bytes([0x4D])
    assert pack_bits(np.ones((1, 8))).bits == b"\xff"
    t = binarize(np.random.default_rng(2).normal(size=(1000, 8)))
    p = pack_bits(t)
    assert len(p.bits) == 1000
    np.testing.assert_array_equal(unpack_bits(p), t)


def test_pack_pads_rows():
    t = np.ones((3, 10))
    t[:, 9] = -1
    p = pack_bits(t)
    assert len(p.bits) == 3 * 2
    assert p.bits[:2] == bytes([0xFF, 0x01])
    np.testing.assert_array_equal(unpack_bits(p), t)


def test_unpack_length_mismatch():
    with pytest.raises(FormatError):
        PackedTable(4, 8, b"\x00\x01")
    with pytest.raises(InvalidParameterError):
        pack_bits(np.array([[0.5, 1.0]]))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 40), st.integers(1, 20)),
              elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_round_trip_property(t):
    np.testing.assert_array_equal(unpack_bits(pack_bits(binarize(t))), binarize(t))


def test_binarized_query_equivalence():
    params = HashGridParams.create((0, 0, 800, 800), table_size=2**12, rng=np.random.default_rng(3))
    direct = [binarize(t) for t in params.tables]
    packed = [unpack_bits(pack_bits(binarize(t))) for t in params.tables]
    pts = np.random.default_rng(4).uniform(0, 800, size=(500, 2))
    np.testing.assert_array_equal(encode_multiscale(pts, params, direct), encode_multiscale(pts, params, packed))


def _square(area_km2, table_size):
    side = np.sqrt(area_km2 * 1e6)
    return HashGridParams.create((0, 0, side, side), table_size=table_size)


@pytest.mark.parametrize("table_size", sorted(PAPER_TABLE_KB))
def test_memory_matches_published_sizes(table_size):
    kb, per_km2 = PAPER_TABLE_KB[table_size]
    rep = memory_report(_square(6.4, table_size))
    assert rep.total_kb == pytest.approx(kb, rel=0.02)
    assert rep.kb_per_km2 == pytest.approx(per_km2, rel=0.02)
    assert rep.total_bytes == sum(rep.per_level_bytes)


def test_full_precision_is_32x():
    params = _square(6.4, 2**16)
    full = memory_report(params, binarized=False)
    assert full.total_bytes == 32 * memory_report(params).total_bytes
    # about 1 MB per km^2 at the default size
    assert 0.9 < full.kb_per_km2 / 1024 < 1.1


def test_small_area_all_dense_counts_touched_vertices():
    params = HashGridParams.create((0, 0, 100, 100), table_size=2**16)
    assert all(lv.dense for lv in params.levels)
    # brute force: every lattice vertex any covered point can touch
    expected = 0
    for lv in params.levels:
        xs = np.linspace(0, 100, 2001)
        i = np.unique(np.floor(xs / lv.cell_side).astype(int))
        n_axis = len(np.union1d(i, i + 1))
        expected += n_axis * n_axis  # d = 8 -> one byte per row
    assert memory_report(params).total_bytes == expected


def test_memory_monotone_in_table_size_and_area():
    sizes = [memory_report(_square(2.0, 2**k)).total_bytes for k in range(10, 19)]
    assert sizes == sorted(sizes)
    areas = [memory_report(_square(a, 2**14)).total_bytes for a in (0.1, 0.5, 1.0, 4.0)]
    assert areas == sorted(areas)
