import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from conftest import rand_matrix
from sparsequant import qformat as qf
from sparsequant.engine import gemv_reference
from sparsequant.qformat import Layout


def fields(sb):
    return float(sb.d), float(sb.dmin), list(sb.block_scales), list(sb.block_mins), list(sb.q)


# --- superblock codec -------------------------------------------------------


def test_zero_superblock():
    sb = qf.quantize_superblock(np.zeros(256, np.float32))
    assert float(sb.d) == 0 and float(sb.dmin) == 0
    assert not sb.q.any()
    assert np.array_equal(qf.dequantize_superblock(sb), np.zeros(256, np.float32))


def test_constant_positive_block_is_not_collapsed():
    w = np.zeros(256, np.float32)
    w[:32] = 3.0
    sb = qf.quantize_superblock(w)
    assert (sb.q[:32] == 15).all() and sb.block_mins[0] == 0 and sb.block_scales[0] == 63
    out = qf.dequantize_superblock(sb)
    # exact up to the binary16 rounding of the superblock scale
    d_exact = 3.0 / 15 / 63
    assert out[0] == pytest.approx(3.0, rel=abs(float(sb.d) - d_exact) / d_exact + 1e-7)
    assert out[0] != 0 and np.all(out[:32] == out[0])
    assert not out[32:].any()


def test_constant_negative_block_uses_offset():
    w = np.zeros(256, np.float32)
    w[64:96] = -3.0
    sb = qf.quantize_superblock(w)
    assert (sb.q[64:96] == 0).all() and sb.block_mins[2] == 63
    out = qf.dequantize_superblock(sb)
    assert out[64] == pytest.approx(-3.0, rel=1e-3)
    assert np.all(out[64:96] == out[64])


def test_grid_representable_constant_round_trips_exactly():
    v = 945 * 2.0**-10  # 15 * 63 * d with d an exact binary16
    w = np.full(256, v, np.float32)
    assert np.array_equal(qf.dequantize_superblock(qf.quantize_superblock(w)), w)


def test_dequantize_known_fields():
    d = np.float16(1 / 63)
    sb = qf.QuantSuperblock(d, 0.0, [63] * 8, [0] * 8, qf.pack_codes(np.full(256, 15)))
    expected = np.float32(15) * (np.float32(d) * np.float32(63))
    assert np.all(qf.dequantize_superblock(sb) == expected)
    assert float(d) == oracles.f16(1 / 63)


@pytest.mark.parametrize("seed", range(10))
def test_fit_matches_scalar_oracle(seed):
    w = np.random.default_rng(seed).uniform(-1, 1, 256).astype(np.float32)
    sb = qf.quantize_superblock(w)
    d, dmin, sc, mn, codes = oracles.fit_superblock(w)
    assert fields(sb) == (d, dmin, sc, mn, codes)
    ref = oracles.dequant_superblock(d, dmin, sc, mn, codes)
    out = qf.dequantize_superblock(sb)
    assert np.all(np.abs(out - np.array(ref)) <= np.spacing(np.abs(out)))


def test_fit_matches_oracle_on_one_signed_and_mixed_blocks(rng):
    w = np.concatenate(
        [rng.uniform(2, 3, 32), rng.uniform(-3, -2, 32), np.full(32, 0.5), np.full(32, -0.25), rng.uniform(-1, 1, 128)]
    ).astype(np.float32)
    sb = qf.quantize_superblock(w)
    assert fields(sb) == oracles.fit_superblock(w)
    # positive-only block spans [0, max] and must not saturate its codes
    err = np.abs(qf.dequantize_superblock(sb)[:32] - w[:32])
    assert err.max() <= 3.0 / 15


def test_rejects_non_finite():
    w = np.zeros(256, np.float32)
    w[7] = np.nan
    with pytest.raises(ValueError):
        qf.quantize_superblock(w)
    with pytest.raises(ValueError):
        qf.quantize_superblock(np.zeros(255))


def test_rejects_scale_overflow():
    w = np.zeros(256, np.float32)
    w[0] = 1e30
    with pytest.raises(ValueError):
        qf.quantize_superblock(w)


@given(arrays(np.float32, 256, elements=st.floats(-1e4, 1e4, width=32)))
def test_code_range_safety(w):
    sb = qf.quantize_superblock(w)
    assert sb.q.max() <= 15
    assert sb.block_scales.max() <= 63 and sb.block_mins.max() <= 63
    assert float(sb.d) >= 0 and float(sb.dmin) >= 0
    assert fields(sb) == oracles.fit_superblock(w)


@given(st.integers(0, 7))
def test_zero_block_preserved(b):
    w = np.random.default_rng(b).uniform(-1, 1, 256).astype(np.float32)
    w[32 * b : 32 * b + 32] = 0
    out = qf.dequantize_superblock(qf.quantize_superblock(w))
    assert np.all(out[32 * b : 32 * b + 32] == 0)


def test_pack_nibble_order():
    codes = np.arange(256) % 16
    packed = qf.pack_codes(codes)
    assert packed[0] == (0 | 1 << 4) and packed[1] == (2 | 3 << 4)
    assert np.array_equal(qf.unpack_codes(packed), codes)


# --- matrices ---------------------------------------------------------------


def test_grid_arithmetic():
    w = np.ones((256, 1), np.float32)
    assert qf.quantize_matrix(w, "zigzag").n_superblocks == 1
    q = qf.quantize_matrix(w, "row_grouped")
    assert q.n_superblocks == 256 and q.padded_k == 256
    q = qf.quantize_matrix(np.ones((512, 3), np.float32), Layout.ZIGZAG)
    assert q.grid == (2, 3)
    assert [q.coords(i) for i in range(6)] == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]


@pytest.mark.parametrize("layout", list(Layout))
def test_sentinel_addressing(layout):
    m, k = 600, 700
    w = np.zeros((m, k), np.float32)
    spots = [(0, 0), (255, 1), (256, 5), (599, 699), (300, 256)]
    for r, c in spots:
        w[r, c] = 1.0
    q = qf.quantize_matrix(w, layout)
    nz = set(np.flatnonzero(q.codes.any(axis=1)).tolist())
    if layout is Layout.ZIGZAG:
        expected = {(r // 256) * k + c for r, c in spots}
    else:
        expected = {r * -(-k // 256) + c // 256 for r, c in spots}
    assert nz == expected
    assert np.array_equal(qf.dequantize_matrix(q) != 0, w != 0)


@pytest.mark.parametrize("layout", list(Layout))
def test_zero_matrix(layout):
    q = qf.quantize_matrix(np.zeros((300, 500), np.float32), layout)
    assert not qf.dequantize_matrix(q).any()
    back = qf.convert_layout(q, Layout(1 - layout))
    assert not qf.dequantize_matrix(back).any()


def test_single_superblock_zigzag_is_column(rng):
    w = rng.uniform(-1, 1, (256, 1)).astype(np.float32)
    q = qf.quantize_matrix(w, "zigzag")
    assert np.array_equal(qf.dequantize_matrix(q)[:, 0], qf.dequantize_superblock(q.superblock(0)))


@pytest.mark.parametrize("layout", list(Layout))
def test_matrix_matches_per_slice_oracle(rng, layout):
    w = rand_matrix(rng, 300, 260)
    q = qf.quantize_matrix(w, layout)
    deq = qf.dequantize_matrix(q)
    padded = np.zeros((512, 260) if layout is Layout.ZIGZAG else (300, 512), np.float32)
    padded[:300, :260] = w
    for i in rng.choice(q.n_superblocks, 40, replace=False):
        r, c = q.coords(int(i))
        vec = padded[r * 256 : r * 256 + 256, c] if layout is Layout.ZIGZAG else padded[r, c * 256 : c * 256 + 256]
        d, dmin, sc, mn, codes = oracles.fit_superblock(vec)
        assert fields(q.superblock(int(i))) == (d, dmin, sc, mn, codes)
        ref = np.array(oracles.dequant_superblock(d, dmin, sc, mn, codes), np.float32)
        got = deq[r * 256 : r * 256 + 256, c] if layout is Layout.ZIGZAG else deq[r, c * 256 : c * 256 + 256]
        n = got.size
        assert np.array_equal(got, ref[:n])


def test_layouts_error_distributions_agree(rng):
    w = rand_matrix(rng, 2048, 1024)
    errs = {lay: qf.dequantize_matrix(qf.quantize_matrix(w, lay)) - w for lay in Layout}
    rz, rr = (float(np.sqrt(np.mean(e.astype(np.float64) ** 2))) for e in errs.values())
    assert rz == pytest.approx(rr, rel=0.02)
    qz, qr = (np.quantile(np.abs(e), [0.5, 0.9, 0.99]) for e in errs.values())
    np.testing.assert_allclose(qz, qr, rtol=0.03)


def test_quantize_independent_of_chunking(monkeypatch, rng):
    w = rand_matrix(rng, 512, 300)
    a = qf.quantize_matrix(w, "zigzag")
    monkeypatch.setattr(qf, "_CHUNK", 7)
    b = qf.quantize_matrix(w, "zigzag")
    assert qf.to_bytes(a) == qf.to_bytes(b)


def test_quantize_rejects_bad_input():
    with pytest.raises(ValueError):
        qf.quantize_matrix(np.zeros((0, 3)), "zigzag")
    with pytest.raises(ValueError):
        qf.quantize_matrix(np.array([[np.inf]]), "zigzag")
    with pytest.raises(ValueError):
        qf.quantize_matrix(np.zeros((2, 2)), "diagonal")


def test_superblock_index_overflow():
    with pytest.raises(OverflowError):
        qf.QuantMatrix(Layout.ZIGZAG, 1 << 40, 1 << 40, [], [], [], [], [])


# --- layout conversion ------------------------------------------------------


def _rms(a, b):
    return float(np.sqrt(np.mean((a.astype(np.float64) - b) ** 2)))


@pytest.mark.parametrize("start", list(Layout))
def test_convert_round_trip_error_does_not_grow(rng, start):
    w = rand_matrix(rng, 512, 768)
    q0 = qf.quantize_matrix(w, start)
    q1 = qf.convert_layout(q0, Layout(1 - start))
    q2 = qf.convert_layout(q1, start)
    d0, d1, d2 = map(qf.dequantize_matrix, (q0, q1, q2))
    first, second = _rms(d1, d0), _rms(d2, d1)
    assert second <= first + np.spacing(np.float32(first))
    assert q1.layout is Layout(1 - start) and q2.layout is start


def test_convert_same_layout_rejected(rng):
    q = qf.quantize_matrix(rand_matrix(rng, 256, 256), "zigzag")
    with pytest.raises(ValueError):
        qf.convert_layout(q, "zigzag")


def test_converted_gemv_within_refit_bound(rng):
    w = rand_matrix(rng, 512, 512)
    x = rng.standard_normal(512).astype(np.float32)
    q = qf.quantize_matrix(w, "row_grouped")
    conv = qf.convert_layout(q, "zigzag")
    a, b = qf.dequantize_matrix(q), qf.dequantize_matrix(conv)
    ya, yb = gemv_reference(a, x), gemv_reference(b, x)
    # Cauchy-Schwarz: |(A - B) x|_i <= ||A_i - B_i|| ||x||, plus float32 output rounding
    bound = np.linalg.norm((a - b).astype(np.float64), axis=1) * np.linalg.norm(x.astype(np.float64))
    bound += np.spacing(np.abs(ya)) + np.spacing(np.abs(yb))
    assert np.all(np.abs(ya.astype(np.float64) - yb) <= bound)


# --- container --------------------------------------------------------------


@pytest.mark.parametrize("layout", list(Layout))
def test_serialization_round_trip(rng, layout, tmp_path):
    q = qf.quantize_matrix(rand_matrix(rng, 300, 520), layout)
    blob = qf.to_bytes(q)
    assert len(blob) == 36 + 148 * q.n_superblocks
    again = qf.to_bytes(qf.from_bytes(blob))
    assert blob == again
    qf.save(q, tmp_path / "m.spqt")
    assert (tmp_path / "m.spqt").read_bytes() == blob


def test_wire_format_fields():
    w = np.zeros((256, 2), np.float32)
    w[:, 1] = np.linspace(-1, 1, 256)
    q = qf.quantize_matrix(w, "zigzag")
    blob = qf.to_bytes(q)
    magic, ver, lay, bits, res, m, k, n = struct.unpack_from("<4sIBBHQQQ", blob)
    assert (magic, ver, lay, bits, res, m, k, n) == (b"SPQT", 1, 1, 4, 0, 256, 2, 2)
    sb = blob[36 + 148 : 36 + 296]
    assert struct.unpack_from("<e", sb, 0)[0] == float(q.d[1])
    assert struct.unpack_from("<e", sb, 2)[0] == float(q.dmin[1])
    assert list(sb[4:12]) == list(q.scales[1]) and list(sb[12:20]) == list(q.mins[1])
    codes = q.superblock(1).q
    assert sb[20] == codes[0] | (codes[1] << 4)


@pytest.mark.parametrize(
    "patch",
    [
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:4] + struct.pack("<I", 2) + b[8:],
        lambda b: b[:8] + bytes([7]) + b[9:],
        lambda b: b[:9] + bytes([8]) + b[10:],
        lambda b: b[:10] + b"\x01\x00" + b[12:],
        lambda b: b[:-1],
        lambda b: b[:36 + 4] + bytes([64]) + b[36 + 5 :],
        lambda b: b[:36] + struct.pack("<e", -1.0) + b[38:],
    ],
)
def test_parse_rejects_corruption(patch):
    blob = qf.to_bytes(qf.quantize_matrix(np.ones((256, 2), np.float32), "zigzag"))
    with pytest.raises(qf.ContainerError):
        qf.from_bytes(patch(blob))


def test_float_matrix_io(tmp_path, rng):
    w = rand_matrix(rng, 3, 5)
    qf.save_float_matrix(w, tmp_path / "w.f32")
    assert np.array_equal(qf.load_float_matrix(tmp_path / "w.f32", 3, 5), w)
    with pytest.raises(ValueError):
        qf.load_float_matrix(tmp_path / "w.f32", 4, 5)
