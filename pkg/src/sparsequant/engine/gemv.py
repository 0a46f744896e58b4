"""GEMV kernel family on a virtual threadgroup/simdgroup scheduler.

Every zigzag kernel launches, per superblock-row, n1 * n2 virtual simdgroups.
Each owns a private 256-element partial accumulator; after all of them finish
a row (the barrier), partials are reduced into the output. The virtual
simdgroups are batched onto `worker_threads` OS threads; the compiled loops
release the GIL.
"""

from __future__ import annotations

import enum
import functools
import threading
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from ..qformat import QK, Layout, QuantMatrix, _dequantize
from ..sparsity import ActiveIndexList, _threshold_value, collect_active
from . import _kernels


class KernelId(str, enum.Enum):
    REFERENCE = "reference"
    ROWQUANT = "rowquant"
    B1_NAIVE = "b1_naive"
    ZIGZAG_DENSE = "zigzag_dense"
    B2_UNBALANCED = "b2_unbalanced"
    B3_BALANCED = "b3_balanced"
    ZIGZAG_SEQUENTIAL = "zigzag_sequential"


@dataclass(frozen=True)
class KernelConfig:
    n1: int = 32  # threadgroups per superblock-row
    n2: int = 2  # simdgroups per threadgroup
    worker_threads: int = 1
    deterministic_reduction: bool = True

    def __post_init__(self):
        for name in ("n1", "n2", "worker_threads"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")

    @property
    def n_simdgroups(self) -> int:
        return self.n1 * self.n2


@dataclass
class ExecutionReport:
    kernel_id: KernelId
    shape: tuple[int, int]
    per_simdgroup_superblocks: np.ndarray  # (superblock_rows, workers); empty for row kernels
    total_superblock_macs: int
    elementwise_branch_checks: int = 0
    skipped_elements: int = 0
    wall_clock_ns: int = 0
    config: KernelConfig | None = None
    n_workers: int = 0  # effective simdgroups per superblock-row after clamping
    n_ns: int | None = None
    threshold: float | None = None

    def balance_stats(self) -> dict:
        c = self.per_simdgroup_superblocks
        if c.size == 0:
            return {"min": 0, "max": 0, "mean": 0.0, "max_row_spread": 0}
        return {
            "min": int(c.min()),
            "max": int(c.max()),
            "mean": float(c.mean()),
            "max_row_spread": int((c.max(axis=1) - c.min(axis=1)).max()),
        }

    def to_dict(self) -> dict:
        return {
            "kernel_id": KernelId(self.kernel_id).value,
            "config": asdict(self.config) if self.config else None,
            "shape": list(self.shape),
            "n_workers": self.n_workers,
            "threshold": self.threshold,
            "n_ns": self.n_ns,
            "total_superblock_macs": int(self.total_superblock_macs),
            "elementwise_branch_checks": int(self.elementwise_branch_checks),
            "skipped_elements": int(self.skipped_elements),
            "per_simdgroup": self.balance_stats(),
            "wall_clock_ns": int(self.wall_clock_ns),
        }


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=None)
def _pool(workers: int) -> ThreadPoolExecutor:
    return ThreadPoolExecutor(workers, thread_name_prefix="sparsequant")


def _run(fn, chunks, workers: int):
    if workers <= 1 or len(chunks) <= 1:
        return [fn(*c) for c in chunks]
    return list(_pool(workers).map(lambda c: fn(*c), chunks))


def _split(n: int, parts: int) -> list[tuple[int, int]]:
    """Contiguous near-equal ranges, larger ones first."""
    base, extra = divmod(n, parts)
    out, lo = [], 0
    for i in range(parts):
        hi = lo + base + (1 if i < extra else 0)
        out.append((lo, hi))
        lo = hi
    return out


def _fields(q: QuantMatrix):
    return q.d.astype(np.float32), q.dmin.astype(np.float32), q.scales, q.mins, q.codes


def _hidden(x, k: int) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim != 1 or x.size != k:
        raise ValueError(f"hidden state length {x.size} does not match matrix columns {k}")
    if not np.isfinite(x).all():
        raise ValueError("hidden state must be finite")
    return x


def _expect(q: QuantMatrix, layout: Layout) -> None:
    if q.layout is not layout:
        raise ValueError(f"kernel needs a {layout.name} matrix, got {q.layout.name}")


def _thr32(threshold) -> float:
    # same float32 comparison as sparsity.build_mask
    return float(np.float32(_threshold_value(threshold)))


# ---------------------------------------------------------------------------
# reference
# ---------------------------------------------------------------------------


def gemv_reference(w, x) -> np.ndarray:
    """y = W x accumulated in float64, rounded to float32."""
    w = np.asarray(w)
    x = np.asarray(x)
    if w.ndim != 2 or x.ndim != 1 or w.shape[1] != x.size:
        raise ValueError(f"dimension mismatch: W {w.shape} x {x.shape}")
    return (w.astype(np.float64) @ x.astype(np.float64)).astype(np.float32)


# ---------------------------------------------------------------------------
# row-grouped kernels
# ---------------------------------------------------------------------------

ROWS_PER_TASK = 4


def _rowquant(q, x, threshold, guarded, worker_threads, kernel_id):
    _expect(q, Layout.ROW_GROUPED)
    x = _hidden(x, q.k)
    xp = np.zeros(q.padded_k, np.float32)
    xp[: q.k] = x
    thr = _thr32(threshold)
    nsb = q.grid[1]
    fields = _fields(q)
    y = np.zeros(q.m, np.float64)

    # tasks of 4 rows, dealt to workers in contiguous runs
    n_tasks = -(-q.m // ROWS_PER_TASK)
    chunks = [
        (*fields, xp, nsb, lo * ROWS_PER_TASK, min(hi * ROWS_PER_TASK, q.m), thr, guarded, y)
        for lo, hi in _split(n_tasks, max(1, min(worker_threads, n_tasks)))
        if hi > lo
    ]
    t0 = time.perf_counter_ns()
    skipped = sum(_run(_kernels.rowquant_rows, chunks, worker_threads))
    elapsed = time.perf_counter_ns() - t0
    report = ExecutionReport(
        kernel_id,
        (q.m, q.k),
        np.zeros((0, 0), np.int64),
        total_superblock_macs=q.n_superblocks,
        elementwise_branch_checks=q.m * q.padded_k if guarded else 0,
        skipped_elements=int(skipped),
        wall_clock_ns=elapsed,
        threshold=thr if guarded else None,
    )
    return y.astype(np.float32), report


def gemv_rowquant_dense(q: QuantMatrix, x, worker_threads: int = 1) -> np.ndarray:
    """Dense row-grouped quantized GEMV (the conventional layout baseline)."""
    return _rowquant(q, x, 0.0, False, worker_threads, KernelId.ROWQUANT)[0]


def gemv_rowquant_naive_sparse(q: QuantMatrix, x, threshold, worker_threads: int = 1):
    """Row-grouped GEMV skipping sub-threshold elements one multiply at a time.

    Every element is guarded, so the report counts m * padded_k branch checks.
    On a CPU the branches are cheap; the counter stands in for the SIMT
    divergence cost.
    """
    return _rowquant(q, x, threshold, True, worker_threads, KernelId.B1_NAIVE)


# ---------------------------------------------------------------------------
# zigzag kernels
# ---------------------------------------------------------------------------


def partition_indices(idx: ActiveIndexList | int, n_workers: int) -> list[range]:
    """Split n_ns active entries into `n_workers` contiguous ranges.

    Sizes differ by at most one; the larger ranges go to lower worker indices.
    """
    if n_workers < 1:
        raise ValueError("n_workers must be positive")
    n = idx if isinstance(idx, int) else idx.n_ns
    return [range(lo, hi) for lo, hi in _split(n, n_workers)]


def _effective_workers(cfg: KernelConfig, k: int) -> int:
    w = cfg.n_simdgroups
    if w > k:
        warnings.warn(f"n1*n2 = {w} exceeds the {k} available columns; clamping to {k} simdgroups", stacklevel=3)
        w = k
    return w


def _zigzag(q, x, cols, ranges, thr, cfg, kernel_id):
    """Launch n_rows * W virtual simdgroups; simdgroup w of every row walks cols[ranges[w]]."""
    rows = q.superblock_rows
    n_workers = len(ranges)
    n_tasks = rows * n_workers
    task_row = np.repeat(np.arange(rows, dtype=np.int64), n_workers)
    task_lo = np.tile(np.array([r.start for r in ranges], np.int64), rows)
    task_hi = np.tile(np.array([r.stop for r in ranges], np.int64), rows)
    partials = np.zeros((n_tasks, QK), np.float64)
    counts = np.zeros(n_tasks, np.int64)
    fields = _fields(q)
    threads = max(1, min(cfg.worker_threads, n_tasks))
    spans = [s for s in _split(n_tasks, threads) if s[1] > s[0]]

    def launch(lo, hi):
        _kernels.zigzag_tasks(
            *fields, x, q.k, cols, task_row[lo:hi], task_lo[lo:hi], task_hi[lo:hi], thr, partials[lo:hi], counts[lo:hi]
        )

    t0 = time.perf_counter_ns()
    if cfg.deterministic_reduction:
        _run(launch, spans, threads)
        acc = np.zeros((rows, QK), np.float64)
        by_row = partials.reshape(rows, n_workers, QK)
        for w in range(n_workers):  # ascending simdgroup index
            acc += by_row[:, w]
    else:
        acc = np.zeros(rows * QK, np.float64)
        lock = threading.Lock()

        def launch_and_reduce(lo, hi):
            launch(lo, hi)
            with lock:  # completion-order accumulation, like atomic adds
                for t in range(lo, hi):
                    r = int(task_row[t])
                    acc[r * QK : (r + 1) * QK] += partials[t]

        _run(launch_and_reduce, spans, threads)
    elapsed = time.perf_counter_ns() - t0

    y = acc.reshape(-1)[: q.m].astype(np.float32)
    report = ExecutionReport(
        kernel_id,
        (q.m, q.k),
        counts.reshape(rows, n_workers),
        total_superblock_macs=int(counts.sum()),
        wall_clock_ns=elapsed,
        config=cfg,
        n_workers=n_workers,
    )
    return y, report


def gemv_zigzag_dense(q: QuantMatrix, x, cfg: KernelConfig = KernelConfig()):
    """Zigzag GEMV with each row's k columns split statically across n1*n2 simdgroups."""
    _expect(q, Layout.ZIGZAG)
    x = _hidden(x, q.k)
    w = _effective_workers(cfg, q.k)
    cols = np.arange(q.k, dtype=np.int64)
    return _zigzag(q, x, cols, partition_indices(q.k, w), 0.0, cfg, KernelId.ZIGZAG_DENSE)


def gemv_zigzag_sparse_unbalanced(q: QuantMatrix, x, threshold, cfg: KernelConfig = KernelConfig()):
    """Static column segments as in the dense kernel; sub-threshold columns are skipped in place.

    Workers whose segment happens to be dense become stragglers; the report's
    per-simdgroup counts expose that.
    """
    _expect(q, Layout.ZIGZAG)
    x = _hidden(x, q.k)
    w = _effective_workers(cfg, q.k)
    cols = np.arange(q.k, dtype=np.int64)
    thr = _thr32(threshold)
    y, report = _zigzag(q, x, cols, partition_indices(q.k, w), thr, cfg, KernelId.B2_UNBALANCED)
    report.threshold = thr
    report.n_ns = int((np.abs(x) >= np.float32(thr)).sum())
    return y, report


def gemv_zigzag_sparse_balanced(q: QuantMatrix, x, idx: ActiveIndexList, cfg: KernelConfig = KernelConfig()):
    """Zigzag GEMV over the active columns only, split evenly across simdgroups.

    `idx` comes from a separate index-collection pass. Columns not in `idx`
    are treated as zero.
    """
    _expect(q, Layout.ZIGZAG)
    x = _hidden(x, q.k)
    cols = np.ascontiguousarray(idx.indices, dtype=np.int64)
    if cols.size and (cols.min() < 0 or cols.max() >= q.k):
        raise ValueError("active index out of range of the matrix columns")
    if cols.size > 1 and not np.all(np.diff(cols) > 0):
        if cfg.deterministic_reduction:
            raise ValueError("active indices must be strictly ascending for deterministic execution")
        cols = np.unique(cols)
    w = _effective_workers(cfg, q.k)
    # thr = -1 disables the in-kernel skip check
    y, report = _zigzag(q, x, cols, partition_indices(int(cols.size), w), -1.0, cfg, KernelId.B3_BALANCED)
    report.n_ns = int(cols.size)
    return y, report


def gemv_zigzag_sequential(q: QuantMatrix, x) -> np.ndarray:
    """Plain traversal of a zigzag matrix: one accumulator per superblock-row, columns ascending."""
    _expect(q, Layout.ZIGZAG)
    x = _hidden(x, q.k)
    rows = q.superblock_rows
    acc = np.zeros((rows, QK), np.float64)
    sb_rows = np.arange(rows) * q.k
    for c in range(q.k):
        sel = sb_rows + c
        w = _dequantize(q.d[sel], q.dmin[sel], q.scales[sel], q.mins[sel], q.codes[sel])
        acc += w.astype(np.float64) * np.float64(x[c])
    return acc.reshape(-1)[: q.m].astype(np.float32)


def run_kernel(kernel, q, x, cfg: KernelConfig, threshold=0.0, idx: ActiveIndexList | None = None, w=None):
    """Uniform dispatch used by the benchmark harness and the verifier.

    `q` must be in the layout the kernel expects; `w` is the float matrix for
    the reference kernel. Returns (y, report).
    """
    kernel = KernelId(kernel)
    if kernel is KernelId.REFERENCE:
        t0 = time.perf_counter_ns()
        y = gemv_reference(w, x)
        return y, ExecutionReport(kernel, tuple(w.shape), np.zeros((0, 0), np.int64), 0, wall_clock_ns=time.perf_counter_ns() - t0)
    if kernel is KernelId.ROWQUANT:
        return _rowquant(q, x, 0.0, False, cfg.worker_threads, kernel)
    if kernel is KernelId.B1_NAIVE:
        return gemv_rowquant_naive_sparse(q, x, threshold, cfg.worker_threads)
    if kernel is KernelId.ZIGZAG_DENSE:
        return gemv_zigzag_dense(q, x, cfg)
    if kernel is KernelId.B2_UNBALANCED:
        return gemv_zigzag_sparse_unbalanced(q, x, threshold, cfg)
    if kernel is KernelId.B3_BALANCED:
        if idx is None:
            idx = collect_active(x, threshold)
        return gemv_zigzag_sparse_balanced(q, x, idx, cfg)
    t0 = time.perf_counter_ns()
    y = gemv_zigzag_sequential(q, x)
    return y, ExecutionReport(
        kernel, (q.m, q.k), np.zeros((0, 0), np.int64), q.n_superblocks, wall_clock_ns=time.perf_counter_ns() - t0
    )


def reference_from_quant(q: QuantMatrix, x) -> np.ndarray:
    """float64 dequantize-then-reference GEMV, unrounded, computed in superblock-row chunks.

    Same definition as gemv_reference(dequantize_matrix(q), x) without
    materializing the whole float matrix.
    """
    x = _hidden(x, q.k).astype(np.float64)
    rows, cols = q.grid
    out = np.empty(q.padded_m, np.float64)
    if q.layout is Layout.ZIGZAG:
        for r in range(rows):
            w = _dequantize(*(a[r * cols : (r + 1) * cols] for a in (q.d, q.dmin, q.scales, q.mins, q.codes)))
            out[r * QK : (r + 1) * QK] = x @ w.astype(np.float64)
    else:
        xp = np.zeros(q.padded_k, np.float64)
        xp[: q.k] = x
        step = max(1, (1 << 16) // cols)
        for r0 in range(0, rows, step):
            r1 = min(rows, r0 + step)
            sl = slice(r0 * cols, r1 * cols)
            w = _dequantize(q.d[sl], q.dmin[sl], q.scales[sl], q.mins[sl], q.codes[sl])
            out[r0:r1] = w.reshape(r1 - r0, cols * QK).astype(np.float64) @ xp
    return out[: q.m]
