"""
4-bit superblock codec and the two weight layouts.

Superblock (256 weights = 8 blocks x 32):
    d         f16      superblock scale
    dmin      f16      superblock min
    scales    u8[8]    6-bit block scales, one per byte
    mins      u8[8]    6-bit block mins, one per byte
    codes     u8[128]  256 x 4-bit codes, element 2i in the low nibble of byte i

    w[j] = (d * scales[b]) * codes[j] - (dmin * mins[b])      b = j // 32

Layouts:
    ROW_GROUPED  superblock (r, c) covers row r, columns [256c, 256c + 256).
                 Grid m x ceil(k/256), stored row-major.
    ZIGZAG       superblock (R, c) covers rows [256R, 256R + 256), column c.
                 Grid ceil(m/256) x k, stored row-major, so all k superblocks
                 of a superblock-row are contiguous.

Container (little-endian):
    "SPQT" u32 version u8 layout u8 bits u16 reserved u64 m u64 k u64 count
    followed by `count` 148-byte superblocks in storage order.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

QK = 256  # weights per superblock
BLOCK = 32  # weights per block
N_BLOCKS = QK // BLOCK
MAX_CODE = 15
MAX_SCALE = 63

MAGIC = b"SPQT"
VERSION = 1
BITS = 4
HEADER = struct.Struct("<4sIBBHQQQ")

SUPERBLOCK_DTYPE = np.dtype(
    [
        ("d", "<f2"),
        ("dmin", "<f2"),
        ("scales", "u1", (N_BLOCKS,)),
        ("mins", "u1", (N_BLOCKS,)),
        ("codes", "u1", (QK // 2,)),
    ]
)
assert SUPERBLOCK_DTYPE.itemsize == 148

# superblocks fitted per vectorized pass; bounds float64 scratch at ~128 MiB
_CHUNK = 1 << 16
_MAX_SUPERBLOCKS = 1 << 62


class Layout(enum.IntEnum):
    ROW_GROUPED = 0
    ZIGZAG = 1

    @classmethod
    def parse(cls, value: "Layout | str | int") -> "Layout":
        if isinstance(value, Layout):
            return value
        if isinstance(value, str):
            key = value.strip().lower().replace("-", "").replace("_", "")
            aliases = {"rowgrouped": cls.ROW_GROUPED, "row": cls.ROW_GROUPED, "zigzag": cls.ZIGZAG}
            if key not in aliases:
                raise ValueError(f"unknown layout {value!r}")
            return aliases[key]
        return cls(int(value))


class ContainerError(ValueError):
    """Raised when a container is malformed or inconsistent."""


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def pack_codes(codes: np.ndarray) -> np.ndarray:
    """(..., 256) codes in 0..15 -> (..., 128) bytes, even element in the low nibble."""
    codes = np.asarray(codes, dtype=np.uint8)
    return (codes[..., 0::2] | (codes[..., 1::2] << 4)).astype(np.uint8)


def unpack_codes(packed: np.ndarray) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    out = np.empty(packed.shape[:-1] + (packed.shape[-1] * 2,), dtype=np.uint8)
    out[..., 0::2] = packed & 0x0F
    out[..., 1::2] = packed >> 4
    return out


# ---------------------------------------------------------------------------
# Codec
# ---------------------------------------------------------------------------


def _fit(w: np.ndarray):
    """Fit n superblocks at once. `w` is (n, 256) float64.

    Per block: lo = min(min_b, 0), scale_b = (max_b - lo) / 15, off_b = -lo.
    A block lying entirely above zero keeps offset 0 and spans [0, max_b] with
    its codes; a constant positive block therefore encodes as codes 15 and a
    constant negative block as codes 0 with the full offset.
    Rounding is half-to-even throughout.
    """
    n = w.shape[0]
    x = w.reshape(n, N_BLOCKS, BLOCK)
    hi = x.max(axis=2)
    lo = np.minimum(x.min(axis=2), 0.0)
    scale = (hi - lo) / MAX_CODE
    off = -lo

    with np.errstate(over="ignore"):
        d = (scale.max(axis=1) / MAX_SCALE).astype(np.float16)
        dmin = (off.max(axis=1) / MAX_SCALE).astype(np.float16)
    if not (np.isfinite(d).all() and np.isfinite(dmin).all()):
        raise ValueError("weights exceed the range representable by a 16-bit superblock scale")

    df = d.astype(np.float64)[:, None]
    dminf = dmin.astype(np.float64)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        sc = np.where(df > 0, np.clip(np.rint(scale / df), 0, MAX_SCALE), 0.0)
        mn = np.where(dminf > 0, np.clip(np.rint(off / dminf), 0, MAX_SCALE), 0.0)
        div = (df * sc)[:, :, None]
        num = x + (dminf * mn)[:, :, None]
        q = np.where(div > 0, np.clip(np.rint(num / div), 0, MAX_CODE), 0.0)
    return d, dmin, sc.astype(np.uint8), mn.astype(np.uint8), q.reshape(n, QK).astype(np.uint8)


def _dequantize(d, dmin, scales, mins, packed) -> np.ndarray:
    """Vectorized 32-bit dequantization of n superblocks -> (n, 256) float32."""
    n = packed.shape[0]
    a = np.asarray(d).astype(np.float32)[:, None] * scales.astype(np.float32)
    b = np.asarray(dmin).astype(np.float32)[:, None] * mins.astype(np.float32)
    q = unpack_codes(packed).reshape(n, N_BLOCKS, BLOCK).astype(np.float32)
    return (a[:, :, None] * q - b[:, :, None]).reshape(n, QK)


@dataclass(frozen=True)
class QuantSuperblock:
    d: np.float16
    dmin: np.float16
    block_scales: np.ndarray  # (8,) uint8
    block_mins: np.ndarray  # (8,) uint8
    codes: np.ndarray  # (128,) uint8, packed

    def __post_init__(self):
        for name in ("block_scales", "block_mins", "codes"):
            arr = np.array(getattr(self, name), dtype=np.uint8)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "d", np.float16(self.d))
        object.__setattr__(self, "dmin", np.float16(self.dmin))
        if self.block_scales.shape != (N_BLOCKS,) or self.block_mins.shape != (N_BLOCKS,):
            raise ValueError("block scales/mins must have 8 entries")
        if self.codes.shape != (QK // 2,):
            raise ValueError("packed codes must be 128 bytes")
        if self.block_scales.max() > MAX_SCALE or self.block_mins.max() > MAX_SCALE:
            raise ValueError("block scale/min exceeds 6 bits")
        if not (np.isfinite(self.d) and np.isfinite(self.dmin)) or self.d < 0 or self.dmin < 0:
            raise ValueError("superblock scale/min must be finite and non-negative")

    @property
    def q(self) -> np.ndarray:
        """Unpacked 256 codes."""
        return unpack_codes(self.codes)


def quantize_superblock(weights) -> QuantSuperblock:
    w = np.asarray(weights, dtype=np.float32).astype(np.float64)
    if w.shape != (QK,):
        raise ValueError(f"expected {QK} weights, got shape {w.shape}")
    if not np.isfinite(w).all():
        raise ValueError("weights must be finite")
    d, dmin, sc, mn, q = _fit(w[None, :])
    return QuantSuperblock(d[0], dmin[0], sc[0], mn[0], pack_codes(q[0]))


def dequantize_superblock(sb: QuantSuperblock) -> np.ndarray:
    return _dequantize(
        np.array([sb.d]), np.array([sb.dmin]), sb.block_scales[None], sb.block_mins[None], sb.codes[None]
    )[0]


# ---------------------------------------------------------------------------
# Matrices
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuantMatrix:
    """A grid of superblocks in storage order. Field arrays are read-only."""

    layout: Layout
    m: int
    k: int
    d: np.ndarray  # (n,) float16
    dmin: np.ndarray  # (n,) float16
    scales: np.ndarray  # (n, 8) uint8
    mins: np.ndarray  # (n, 8) uint8
    codes: np.ndarray  # (n, 128) uint8

    def __post_init__(self):
        object.__setattr__(self, "layout", Layout.parse(self.layout))
        if self.m < 1 or self.k < 1:
            raise ValueError("matrix dimensions must be positive")
        n = self.n_superblocks
        if n > _MAX_SUPERBLOCKS:
            raise OverflowError("superblock index space overflow")
        shapes = {"d": (n,), "dmin": (n,), "scales": (n, N_BLOCKS), "mins": (n, N_BLOCKS), "codes": (n, QK // 2)}
        for name, shape in shapes.items():
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float16 if name in ("d", "dmin") else np.uint8)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def grid(self) -> tuple[int, int]:
        if self.layout is Layout.ZIGZAG:
            return _ceil_div(self.m, QK), self.k
        return self.m, _ceil_div(self.k, QK)

    @property
    def n_superblocks(self) -> int:
        g = self.grid
        return g[0] * g[1]

    @property
    def padded_m(self) -> int:
        return _ceil_div(self.m, QK) * QK if self.layout is Layout.ZIGZAG else self.m

    @property
    def padded_k(self) -> int:
        return self.k if self.layout is Layout.ZIGZAG else _ceil_div(self.k, QK) * QK

    @property
    def superblock_rows(self) -> int:
        return self.grid[0]

    def superblock_index(self, row: int, col: int) -> int:
        rows, cols = self.grid
        if not (0 <= row < rows and 0 <= col < cols):
            raise IndexError(f"superblock ({row}, {col}) outside grid {self.grid}")
        return row * cols + col

    def coords(self, index: int) -> tuple[int, int]:
        return divmod(index, self.grid[1])

    def superblock(self, index: int) -> QuantSuperblock:
        return QuantSuperblock(self.d[index], self.dmin[index], self.scales[index], self.mins[index], self.codes[index])

    def validate(self) -> None:
        """Check field ranges; raise ContainerError on the first bad superblock."""
        bad = (self.scales > MAX_SCALE).any(axis=1) | (self.mins > MAX_SCALE).any(axis=1)
        d = self.d.astype(np.float32)
        dmin = self.dmin.astype(np.float32)
        bad |= ~np.isfinite(d) | ~np.isfinite(dmin) | (d < 0) | (dmin < 0)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise ContainerError(f"invalid superblock fields at grid coordinate {self.coords(i)}")


def _slices(w: np.ndarray, layout: Layout) -> np.ndarray:
    """Padded (n, 256) float32 slices of `w` along the grouped axis, in storage order."""
    m, k = w.shape
    if layout is Layout.ZIGZAG:
        mp = _ceil_div(m, QK) * QK
        if mp != m:
            w = np.pad(w, ((0, mp - m), (0, 0)))
        # (R, 256, k) -> (R, k, 256)
        return w.reshape(mp // QK, QK, k).transpose(0, 2, 1).reshape(-1, QK)
    kp = _ceil_div(k, QK) * QK
    if kp != k:
        w = np.pad(w, ((0, 0), (0, kp - k)))
    return w.reshape(m * (kp // QK), QK)


def quantize_matrix(w, layout: Layout | str) -> QuantMatrix:
    """Quantize an (m, k) float matrix into `layout`.

    Each superblock is fitted from its own 256 inputs only, so chunking does
    not change the result.
    """
    layout = Layout.parse(layout)
    w = np.asarray(w, dtype=np.float32)
    if w.ndim != 2 or min(w.shape) < 1:
        raise ValueError("expected a non-empty 2-D matrix")
    m, k = w.shape
    n_sb = (_ceil_div(m, QK) * k) if layout is Layout.ZIGZAG else (m * _ceil_div(k, QK))
    if n_sb > _MAX_SUPERBLOCKS:
        raise OverflowError("superblock index space overflow")
    if not np.isfinite(w).all():
        raise ValueError("weights must be finite")

    sl = _slices(w, layout)
    n = sl.shape[0]
    d = np.empty(n, np.float16)
    dmin = np.empty(n, np.float16)
    scales = np.empty((n, N_BLOCKS), np.uint8)
    mins = np.empty((n, N_BLOCKS), np.uint8)
    codes = np.empty((n, QK // 2), np.uint8)
    for s in range(0, n, _CHUNK):
        e = min(s + _CHUNK, n)
        fd, fdmin, fsc, fmn, fq = _fit(np.ascontiguousarray(sl[s:e], dtype=np.float64))
        d[s:e], dmin[s:e], scales[s:e], mins[s:e] = fd, fdmin, fsc, fmn
        codes[s:e] = pack_codes(fq)
    return QuantMatrix(layout, m, k, d, dmin, scales, mins, codes)


def dequantize_rows(q: QuantMatrix, start: int, stop: int) -> np.ndarray:
    """Dequantize superblocks [start, stop) in storage order -> (n, 256) float32."""
    return _dequantize(q.d[start:stop], q.dmin[start:stop], q.scales[start:stop], q.mins[start:stop], q.codes[start:stop])


def dequantize_matrix(q: QuantMatrix) -> np.ndarray:
    """Logical (m, k) float32 matrix; padding is dropped."""
    vals = np.empty((q.n_superblocks, QK), np.float32)
    for s in range(0, q.n_superblocks, _CHUNK):
        e = min(s + _CHUNK, q.n_superblocks)
        vals[s:e] = dequantize_rows(q, s, e)
    rows, cols = q.grid
    if q.layout is Layout.ZIGZAG:
        full = vals.reshape(rows, cols, QK).transpose(0, 2, 1).reshape(rows * QK, cols)
    else:
        full = vals.reshape(rows, cols * QK)
    return np.ascontiguousarray(full[: q.m, : q.k])


def convert_layout(q: QuantMatrix, target: Layout | str) -> QuantMatrix:
    """Re-quantize `q` into `target`.

    This is a lossy re-fit of the dequantized values, not a bit-level
    permutation: the new superblocks group different weights and get their
    own scales.
    """
    target = Layout.parse(target)
    if target is q.layout:
        raise ValueError(f"matrix is already in layout {target.name}")
    return quantize_matrix(dequantize_matrix(q), target)


# ---------------------------------------------------------------------------
# Container I/O
# ---------------------------------------------------------------------------


def to_bytes(q: QuantMatrix) -> bytes:
    header = HEADER.pack(MAGIC, VERSION, int(q.layout), BITS, 0, q.m, q.k, q.n_superblocks)
    body = np.empty(q.n_superblocks, SUPERBLOCK_DTYPE)
    body["d"], body["dmin"] = q.d, q.dmin
    body["scales"], body["mins"], body["codes"] = q.scales, q.mins, q.codes
    return header + body.tobytes()


def from_bytes(data: bytes) -> QuantMatrix:
    if len(data) < HEADER.size:
        raise ContainerError("truncated header")
    magic, version, layout, bits, reserved, m, k, count = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported version {version}")
    if bits != BITS:
        raise ContainerError(f"unsupported bit width {bits}")
    if reserved != 0:
        raise ContainerError("reserved header field must be zero")
    try:
        layout = Layout(layout)
    except ValueError:
        raise ContainerError(f"unknown layout tag {layout}") from None
    if m < 1 or k < 1:
        raise ContainerError("matrix dimensions must be positive")
    expected = _ceil_div(m, QK) * k if layout is Layout.ZIGZAG else m * _ceil_div(k, QK)
    if count != expected:
        raise ContainerError(f"superblock count {count} does not match grid ({expected})")
    if len(data) != HEADER.size + count * SUPERBLOCK_DTYPE.itemsize:
        raise ContainerError("payload length does not match superblock count")
    body = np.frombuffer(data, SUPERBLOCK_DTYPE, count=count, offset=HEADER.size)
    q = QuantMatrix(layout, m, k, body["d"], body["dmin"], body["scales"], body["mins"], body["codes"])
    q.validate()
    return q


def save(q: QuantMatrix, path) -> None:
    Path(path).write_bytes(to_bytes(q))


def load(path) -> QuantMatrix:
    return from_bytes(Path(path).read_bytes())


def load_float_matrix(path, m: int, k: int) -> np.ndarray:
    """Raw little-endian float32 row-major file -> (m, k) array."""
    raw = Path(path).read_bytes()
    if len(raw) != 4 * m * k:
        raise ValueError(f"{path}: expected {4 * m * k} bytes for {m}x{k}, got {len(raw)}")
    w = np.frombuffer(raw, "<f4").reshape(m, k).astype(np.float32)
    if not np.isfinite(w).all():
        raise ValueError(f"{path}: non-finite values")
    return w


def save_float_matrix(w: np.ndarray, path) -> None:
    Path(path).write_bytes(np.ascontiguousarray(w, dtype="<f4").tobytes())
