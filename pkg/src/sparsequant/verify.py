"""Check a quantized container against its float source and all applicable kernels."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import qformat
from .engine import KernelConfig, KernelId, reference_from_quant, run_kernel
from .qformat import Layout, QuantMatrix
from .sparsity import calibrate_threshold, collect_active, zero_sparse

REL_TOL = 1e-4
ABS_FLOOR = 1e-6

KERNELS = {
    Layout.ROW_GROUPED: [KernelId.ROWQUANT, KernelId.B1_NAIVE],
    Layout.ZIGZAG: [KernelId.ZIGZAG_DENSE, KernelId.B2_UNBALANCED, KernelId.B3_BALANCED],
}
SPARSE = {KernelId.B1_NAIVE, KernelId.B2_UNBALANCED, KernelId.B3_BALANCED}


def relative_error(y, ref) -> np.ndarray:
    """|y - ref| / max(|ref|, 1e-6), element-wise."""
    ref = np.asarray(ref, dtype=np.float64)
    return np.abs(np.asarray(y, dtype=np.float64) - ref) / np.maximum(np.abs(ref), ABS_FLOOR)


def within_tolerance(y, ref) -> bool:
    return bool(np.all(relative_error(y, ref) <= REL_TOL))


@dataclass
class VerifyReport:
    shape: tuple[int, int]
    layout: str
    quant_rmse: float
    mismatched_superblocks: list[tuple[int, int]] = field(default_factory=list)
    n_mismatched: int = 0
    kernel_max_rel_err: dict[str, float] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "shape": list(self.shape),
            "layout": self.layout,
            "quant_rmse": self.quant_rmse,
            "n_mismatched_superblocks": self.n_mismatched,
            "mismatched_superblocks": [list(c) for c in self.mismatched_superblocks],
            "kernel_max_rel_err": self.kernel_max_rel_err,
            "tolerance": {"rel": REL_TOL, "abs_floor": ABS_FLOOR},
            "failures": self.failures,
        }


def _mismatches(q: QuantMatrix, expected: QuantMatrix) -> np.ndarray:
    bad = (q.d.view(np.uint16) != expected.d.view(np.uint16)) | (q.dmin.view(np.uint16) != expected.dmin.view(np.uint16))
    for name in ("scales", "mins", "codes"):
        bad |= (getattr(q, name) != getattr(expected, name)).any(axis=1)
    return np.flatnonzero(bad)


def verify(
    q: QuantMatrix,
    source: np.ndarray,
    sparsity: float | None = 0.5,
    cases: int = 3,
    seed: int = 0,
    cfg: KernelConfig = KernelConfig(),
    max_listed: int = 10,
) -> VerifyReport:
    """Compare `q` with a deterministic re-quantization of `source`, then run every
    kernel for q's layout against the dequantize-then-reference oracle."""
    source = np.asarray(source, dtype=np.float32)
    if source.shape != (q.m, q.k):
        raise ValueError(f"source shape {source.shape} does not match container {q.m}x{q.k}")
    expected = qformat.quantize_matrix(source, q.layout)
    deq = qformat.dequantize_matrix(q)
    report = VerifyReport((q.m, q.k), q.layout.name.lower(), float(np.sqrt(np.mean((deq - source) ** 2.0))))

    bad = _mismatches(q, expected)
    if bad.size:
        report.n_mismatched = int(bad.size)
        report.mismatched_superblocks = [q.coords(int(i)) for i in bad[:max_listed]]
        r, c = report.mismatched_superblocks[0]
        report.failures.append(f"{bad.size} superblock(s) differ from the source quantization, first at ({r}, {c})")

    rng = np.random.default_rng(seed)
    s = 0.0 if sparsity is None else sparsity
    threshold = calibrate_threshold(np.abs(rng.standard_normal(1 << 16)), s)
    worst: dict[str, float] = {}
    for _ in range(cases):
        x = rng.standard_normal(q.k).astype(np.float32)
        ref_dense = reference_from_quant(q, x)
        ref_sparse = reference_from_quant(q, zero_sparse(x, threshold))
        idx = collect_active(x, threshold)
        for kern in KERNELS[q.layout]:
            y, _ = run_kernel(kern, q, x, cfg, threshold=threshold, idx=idx)
            err = float(relative_error(y, ref_sparse if kern in SPARSE else ref_dense).max())
            worst[kern.value] = max(worst.get(kern.value, 0.0), err)
    report.kernel_max_rel_err = worst
    for name, err in worst.items():
        if not err <= REL_TOL:
            report.failures.append(f"{name}: max relative error {err:.3g} exceeds {REL_TOL:g}")
    return report
