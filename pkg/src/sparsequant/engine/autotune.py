"""Grid search over (n1, n2) for the zigzag kernels."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from ..qformat import QK, QuantMatrix
from ..sparsity import collect_active
from .gemv import ExecutionReport, KernelConfig, KernelId, run_kernel

DEFAULT_N1 = (1, 2, 4, 8, 16, 32, 64)
DEFAULT_N2 = (1, 2, 4)
SUPERBLOCK_BYTES = 148


def default_grid() -> list[tuple[int, int]]:
    return list(itertools.product(DEFAULT_N1, DEFAULT_N2))


@dataclass(frozen=True)
class CostWeights:
    """Weights of the virtual cost model (arbitrary units).

    Cross-threadgroup synchronization is priced above intra-threadgroup
    synchronization, which keeps n1 and n2 distinguishable in a model where
    they are otherwise interchangeable.
    """

    mac: float = 1.0
    sync_intra: float = 4.0
    sync_cross: float = 16.0
    byte: float = 1.0 / 256


def virtual_cost(report: ExecutionReport, cfg: KernelConfig, weights: CostWeights = CostWeights()) -> float:
    counts = report.per_simdgroup_superblocks
    rows, workers = counts.shape
    n2 = min(cfg.n2, workers)
    n1 = -(-workers // n2)
    critical = float(counts.max(axis=1).sum()) if counts.size else 0.0
    bytes_touched = report.total_superblock_macs * SUPERBLOCK_BYTES + rows * workers * QK * 4
    return (
        weights.mac * critical
        + weights.sync_intra * rows * workers
        + weights.sync_cross * rows * n1
        + weights.byte * bytes_touched
    )


@dataclass
class AutotuneResult:
    best: KernelConfig
    table: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    mode: str = "wallclock"


def autotune(
    q: QuantMatrix,
    x=None,
    candidate_grid=None,
    *,
    repeats: int = 20,
    mode: str = "wallclock",
    kernel: KernelId | str = KernelId.ZIGZAG_DENSE,
    threshold: float = 0.0,
    worker_threads: int = 1,
    weights: CostWeights = CostWeights(),
    seed: int = 0,
) -> AutotuneResult:
    """Pick the (n1, n2) with the lowest median cost on representative inputs.

    `x` is one hidden state or a stack of them; by default 4 seeded
    standard-normal vectors. mode="wallclock" times the kernel `repeats`
    times; mode="virtual" evaluates the deterministic cost model once per
    input.
    """
    grid = default_grid() if candidate_grid is None else [tuple(c) for c in candidate_grid]
    if not grid:
        raise ValueError("candidate grid is empty")
    if mode not in ("wallclock", "virtual"):
        raise ValueError(f"unknown autotune mode {mode!r}")
    kernel = KernelId(kernel)
    if x is None:
        x = np.random.default_rng(seed).standard_normal((4, q.k)).astype(np.float32)
    xs = np.atleast_2d(np.asarray(x, dtype=np.float32))
    idxs = [collect_active(v, threshold) for v in xs] if kernel is KernelId.B3_BALANCED else [None] * len(xs)

    table = []
    for n1, n2 in grid:
        cfg = KernelConfig(n1, n2, worker_threads)
        samples = []
        runs = len(xs) if mode == "virtual" else max(repeats, 1)
        for r in range(runs):
            i = r % len(xs)
            _, rep = run_kernel(kernel, q, xs[i], cfg, threshold=threshold, idx=idxs[i])
            samples.append(virtual_cost(rep, cfg, weights) if mode == "virtual" else rep.wall_clock_ns)
        table.append({"n1": n1, "n2": n2, "median": float(np.median(samples)), "runs": runs})

    best_row = min(table, key=lambda row: row["median"])  # ties keep grid order
    best = KernelConfig(best_row["n1"], best_row["n2"], worker_threads)
    return AutotuneResult(best, table, _annotate(table, mode), mode)


def _annotate(table: list[dict], mode: str) -> list[str]:
    by_n2: dict[int, float] = {}
    for row in table:
        by_n2[row["n2"]] = min(by_n2.get(row["n2"], np.inf), row["median"])
    notes = []
    if len(by_n2) > 1:
        best_n2 = min(by_n2, key=by_n2.get)
        verdict = "inside" if 2 <= best_n2 <= 4 else "outside"
        notes.append(f"fastest simdgroup count n2={best_n2} ({mode}); {verdict} the 2-4 range usually best on GPUs")
    return notes
