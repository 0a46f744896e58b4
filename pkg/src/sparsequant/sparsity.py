"""Activation sparsity: threshold calibration, masks and sparse index collection."""

from __future__ import annotations

import enum
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

DEFAULT_SEGMENT_CAPACITY = 1024


class ThresholdMode(enum.Enum):
    UNIFIED = "unified"
    GROUPED = "grouped"


class Ordering(enum.Enum):
    DETERMINISTIC = "deterministic"
    RESERVATION_ORDER = "reservation"


@dataclass(frozen=True)
class SparsityThreshold:
    value: float
    target_sparsity: float
    mode: ThresholdMode = ThresholdMode.UNIFIED
    group_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "value", float(np.float32(self.value)))
        if not self.value >= 0:
            raise ValueError("threshold must be non-negative")
        if not 0 <= self.target_sparsity < 1:
            raise ValueError("target sparsity must be in [0, 1)")


@dataclass(frozen=True, eq=False)
class ActiveIndexList:
    indices: np.ndarray
    source_len: int
    n_ns: int = field(init=False)

    def __post_init__(self):
        idx = np.ascontiguousarray(self.indices, dtype=np.int64)
        if idx.ndim != 1:
            raise ValueError("indices must be 1-D")
        if idx.size and (idx.min() < 0 or idx.max() >= self.source_len):
            raise ValueError("index out of range of the source vector")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "n_ns", int(idx.size))

    @property
    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.indices) > 0))

    def sorted(self) -> "ActiveIndexList":
        return ActiveIndexList(np.sort(self.indices), self.source_len)

    def __len__(self):
        return self.n_ns


def _threshold_value(threshold) -> float:
    if isinstance(threshold, SparsityThreshold):
        return threshold.value
    return float(threshold)


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


def _rank(s: float, n: int) -> int:
    # guard against s*n landing a hair above an integer (0.29 * 100 = 28.999...)
    return max(1, math.ceil(round(s * n, 9)))


def calibrate_threshold(magnitude_samples, target_sparsity: float) -> SparsityThreshold:
    """Nearest-rank quantile: sorted[ceil(s*N) - 1] for s > 0, 0 for s = 0."""
    samples = np.abs(np.asarray(magnitude_samples, dtype=np.float32).ravel())
    if samples.size == 0:
        raise ValueError("calibration needs at least one sample")
    if not 0 <= target_sparsity < 1:
        raise ValueError("target sparsity must be in [0, 1)")
    if not np.isfinite(samples).all():
        raise ValueError("calibration samples must be finite")
    if target_sparsity == 0:
        return SparsityThreshold(0.0, 0.0)
    ordered = np.sort(samples, kind="stable")
    return SparsityThreshold(ordered[_rank(target_sparsity, ordered.size) - 1], target_sparsity)


def calibrate_grouped(
    per_tensor_samples: Mapping[str, np.ndarray],
    groups: Sequence[Sequence[str]],
    target_sparsity: float,
) -> dict[str, SparsityThreshold]:
    """One shared threshold per group, computed over the group's concatenated samples."""
    seen: list[str] = [label for g in groups for label in g]
    if len(seen) != len(set(seen)):
        raise ValueError("a tensor label appears in more than one group")
    missing = [label for label in seen if label not in per_tensor_samples]
    if missing:
        raise ValueError(f"no samples for grouped tensor(s): {', '.join(missing)}")
    ungrouped = sorted(set(per_tensor_samples) - set(seen))
    if ungrouped:
        raise ValueError(f"tensor(s) not covered by any group: {', '.join(ungrouped)}")

    out = {}
    for g in groups:
        if not g:
            raise ValueError("empty group")
        merged = np.concatenate([np.asarray(per_tensor_samples[label], dtype=np.float32).ravel() for label in g])
        base = calibrate_threshold(merged, target_sparsity)
        gid = "+".join(g)
        for label in g:
            out[label] = SparsityThreshold(base.value, target_sparsity, ThresholdMode.GROUPED, gid)
    return out


def build_mask(x, threshold) -> np.ndarray:
    """mask[i] = |x[i]| >= threshold; entries exactly at the threshold stay active."""
    x = np.asarray(x, dtype=np.float32)
    return np.abs(x) >= np.float32(_threshold_value(threshold))


def zero_sparse(x, threshold) -> np.ndarray:
    """Copy of `x` with sub-threshold entries set to zero."""
    x = np.asarray(x, dtype=np.float32)
    return np.where(build_mask(x, threshold), x, np.float32(0))


# ---------------------------------------------------------------------------
# Index collection
# ---------------------------------------------------------------------------


def collect_indices_sequential(mask) -> ActiveIndexList:
    mask = np.asarray(mask, dtype=bool).ravel()
    return ActiveIndexList(np.flatnonzero(mask), mask.size)


def _check_capacity(capacity: int) -> None:
    if not (2 <= capacity <= 65536) or capacity & (capacity - 1):
        raise ValueError(f"segment capacity must be a power of two in [2, 65536], got {capacity}")


def blelloch_exclusive_scan(bits, segment_capacity: int = DEFAULT_SEGMENT_CAPACITY) -> tuple[np.ndarray, int]:
    """Work-efficient exclusive prefix sum of one segment.

    Each level of the up-sweep and down-sweep is one vectorized step over the
    active tree nodes, i.e. what the threads of one threadgroup do in lockstep.
    Non power-of-two segments are padded with zeros. Returns (scan, total).
    """
    a = np.asarray(bits, dtype=np.int64).ravel()
    n = a.size
    if n > segment_capacity:
        raise ValueError(f"segment of length {n} exceeds capacity {segment_capacity}")
    if n == 0:
        return np.zeros(0, np.int64), 0
    size = 1 << (n - 1).bit_length()
    t = np.zeros(size, np.int64)
    t[:n] = a

    stride = 1
    while stride < size:  # up-sweep: t[i + 2s - 1] += t[i + s - 1]
        t[2 * stride - 1 :: 2 * stride] += t[stride - 1 :: 2 * stride]
        stride *= 2
    total = int(t[-1])
    t[-1] = 0
    stride = size // 2
    while stride >= 1:  # down-sweep: swap-and-add
        left = t[stride - 1 :: 2 * stride].copy()
        t[stride - 1 :: 2 * stride] = t[2 * stride - 1 :: 2 * stride]
        t[2 * stride - 1 :: 2 * stride] += left
        stride //= 2
    return t[:n], total


class _AtomicCounter:
    def __init__(self):
        self._value = 0
        self._lock = threading.Lock()

    def fetch_add(self, n: int) -> int:
        with self._lock:
            old = self._value
            self._value += n
            return old

    @property
    def value(self) -> int:
        return self._value


def collect_indices_parallel(
    mask,
    segment_capacity: int = DEFAULT_SEGMENT_CAPACITY,
    ordering: Ordering | str = Ordering.DETERMINISTIC,
    workers: int = 1,
) -> ActiveIndexList:
    """Segmented scan-and-scatter of the set bits of `mask`.

    DETERMINISTIC: segment bases are the exclusive prefix of segment totals,
    known after a barrier, so the output is globally ascending.
    RESERVATION_ORDER: each segment reserves its base with one atomic
    fetch-add as it finishes; the output holds ascending runs per segment in
    completion order.
    """
    _check_capacity(segment_capacity)
    ordering = Ordering(ordering)
    mask = np.asarray(mask, dtype=bool).ravel()
    n = mask.size
    n_seg = -(-n // segment_capacity)
    out = np.empty(n, np.int64)

    def scan(s):
        lo = s * segment_capacity
        seg = mask[lo : lo + segment_capacity]
        prefix, total = blelloch_exclusive_scan(seg, segment_capacity)
        return prefix, total

    def scatter(s, prefix, base):
        lo = s * segment_capacity
        seg = mask[lo : lo + segment_capacity]
        local = np.flatnonzero(seg)
        out[base + prefix[local]] = lo + local

    counter = _AtomicCounter()

    def reserve_and_scatter(s):
        prefix, total = scan(s)
        base = counter.fetch_add(total)
        scatter(s, prefix, base)

    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        run = pool.map if pool else map
        if ordering is Ordering.DETERMINISTIC:
            scans = list(run(scan, range(n_seg)))
            totals = np.array([t for _, t in scans], dtype=np.int64)
            bases = np.concatenate(([0], np.cumsum(totals)[:-1])) if n_seg else totals
            list(run(scatter, range(n_seg), [p for p, _ in scans], bases))
            n_ns = int(totals.sum())
        else:
            list(run(reserve_and_scatter, range(n_seg)))
            n_ns = counter.value
    finally:
        if pool:
            pool.shutdown()
    return ActiveIndexList(out[:n_ns], n)


def collect_active(x, threshold, **kwargs) -> ActiveIndexList:
    """Mask `x` against `threshold` and collect the active indices."""
    return collect_indices_parallel(build_mask(x, threshold), **kwargs)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def load_samples(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise ValueError(f"{path}: length is not a multiple of 4 bytes")
    return np.frombuffer(raw, "<f4").astype(np.float32)


def format_manifest(sections: Sequence[tuple[ThresholdMode, float, Mapping[str, SparsityThreshold]]]) -> str:
    """Plain-text threshold manifest.

    Each section starts with a header line ``[mode=<mode> target_sparsity=<s>]``
    followed by ``label = value`` lines.
    """
    lines = []
    for mode, s, thresholds in sections:
        lines.append(f"[mode={ThresholdMode(mode).value} target_sparsity={s!r}]")
        for label, th in thresholds.items():
            lines.append(f"{label} = {th.value!r}")
        lines.append("")
    return "\n".join(lines)


def parse_manifest(text: str) -> list[tuple[ThresholdMode, float, dict[str, SparsityThreshold]]]:
    sections: list[tuple[ThresholdMode, float, dict[str, SparsityThreshold]]] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            fields = dict(kv.split("=", 1) for kv in line[1:-1].split())
            try:
                sections.append((ThresholdMode(fields["mode"]), float(fields["target_sparsity"]), {}))
            except (KeyError, ValueError) as e:
                raise ValueError(f"manifest line {lineno}: bad section header") from e
            continue
        if not sections or "=" not in line:
            raise ValueError(f"manifest line {lineno}: expected 'label = value' inside a section")
        label, value = (part.strip() for part in line.split("=", 1))
        mode, s, table = sections[-1]
        table[label] = SparsityThreshold(float(value), s, mode)
    return sections
