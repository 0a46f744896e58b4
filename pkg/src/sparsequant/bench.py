"""Benchmark harness: kernel latency, work counters and load balance over GEMV shapes."""

from __future__ import annotations

import csv
import hashlib
import io
import os
import platform
import time
from dataclasses import dataclass, field

import numpy as np

from . import qformat
from .engine import KernelConfig, KernelId, autotune, reference_from_quant, run_kernel
from .qformat import QK, Layout
from .sparsity import calibrate_threshold, collect_active

SCHEMA_VERSION = 1

SHAPE_GRID = [(m, k) for m in (2048, 4096, 8192) for k in (1024, 2048, 4096, 8192, 16384)]

# (m, k) of the decode GEMVs per model: attention q/k/v/o, ffn up/gate, ffn down
LLAMA_MODELS = {
    "llama-2-7b": [(4096, 4096), (11008, 4096), (4096, 11008)],
    "llama-2-13b": [(5120, 5120), (13824, 5120), (5120, 13824)],
    "llama-2-70b": [(8192, 8192), (1024, 8192), (28672, 8192), (8192, 28672)],
    "llama-3-8b": [(4096, 4096), (1024, 4096), (14336, 4096), (4096, 14336)],
}


def _dedupe(shapes):
    return list(dict.fromkeys(shapes))


PRESETS = {
    "paper-grid": SHAPE_GRID,
    "llama-shapes": _dedupe(s for shapes in LLAMA_MODELS.values() for s in shapes),
    **LLAMA_MODELS,
}

ALL_KERNELS = [k.value for k in KernelId]
DEFAULT_KERNELS = ["rowquant", "b1_naive", "zigzag_dense", "b2_unbalanced", "b3_balanced"]
LAYOUT_OF = {
    KernelId.ROWQUANT: Layout.ROW_GROUPED,
    KernelId.B1_NAIVE: Layout.ROW_GROUPED,
    KernelId.ZIGZAG_DENSE: Layout.ZIGZAG,
    KernelId.B2_UNBALANCED: Layout.ZIGZAG,
    KernelId.B3_BALANCED: Layout.ZIGZAG,
    KernelId.ZIGZAG_SEQUENTIAL: Layout.ZIGZAG,
}
SPARSE_KERNELS = {KernelId.B1_NAIVE, KernelId.B2_UNBALANCED, KernelId.B3_BALANCED}

MACHINE_DEPENDENT = ["median_ns", "p10_ns", "p90_ns", "collect_median_ns", "speedup_vs_rowquant", "speedup_vs_zigzag_dense"]


def parse_shape(text: str) -> tuple[int, int]:
    m, _, k = text.lower().partition("x")
    shape = int(m), int(k)
    if min(shape) < 1:
        raise ValueError(f"bad shape {text!r}")
    return shape


def shape_key(shape) -> str:
    return f"{shape[0]}x{shape[1]}"


@dataclass
class BenchSpec:
    shapes: list[tuple[int, int]]
    kernels: list[str] = field(default_factory=lambda: list(DEFAULT_KERNELS))
    sparsity: list[float] = field(default_factory=lambda: [0.5])
    layouts: list[str] = field(default_factory=lambda: ["row_grouped", "zigzag"])
    repeats: int = 20
    warmup: int = 3
    seed: int = 0
    config: KernelConfig = field(default_factory=KernelConfig)
    tuned: dict[str, tuple[int, int]] = field(default_factory=dict)  # shape key -> (n1, n2)
    autotune: str | None = None  # None, "wallclock" or "virtual"
    check_correctness: bool = True

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if not self.shapes or any(min(s) < 1 for s in self.shapes):
            raise ValueError("shapes must be positive")
        if any(not 0 <= s < 1 for s in self.sparsity):
            raise ValueError("sparsity levels must be in [0, 1)")
        unknown = [k for k in self.kernels if k not in ALL_KERNELS]
        if unknown:
            raise ValueError(f"unknown kernel(s): {', '.join(unknown)}")
        layouts = {Layout.parse(name) for name in self.layouts}
        self.layouts = [lay.name.lower() for lay in sorted(layouts)]
        if self.autotune not in (None, "wallclock", "virtual"):
            raise ValueError(f"unknown autotune mode {self.autotune!r}")

    @classmethod
    def from_preset(cls, name: str, **kwargs) -> "BenchSpec":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
        return cls(shapes=list(PRESETS[name]), **kwargs)


def _rng(seed: int, *salt: int) -> np.random.Generator:
    return np.random.default_rng([seed, *salt])


def make_problem(shape, seed: int):
    """Seeded weights ~ U(-1, 1) and hidden state ~ N(0, 1)."""
    m, k = shape
    w = _rng(seed, m, k, 0).uniform(-1, 1, (m, k)).astype(np.float32)
    x = _rng(seed, m, k, 1).standard_normal(k).astype(np.float32)
    return w, x


def calibration_threshold(s: float, seed: int, n: int = 1 << 16):
    """Threshold for sparsity `s` calibrated on standard-normal magnitudes."""
    return calibrate_threshold(np.abs(_rng(seed, 7).standard_normal(n)), s)


def _time(fn, warmup: int, repeats: int):
    for _ in range(warmup):
        fn()
    times, last = [], None
    for _ in range(repeats):
        last = fn()
        times.append(last[1].wall_clock_ns)
    return last, np.asarray(times, dtype=np.float64)


def _digest(y: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(y, np.float32).tobytes()).hexdigest()[:16]


def _max_rel_err(y, ref) -> float:
    return float((np.abs(y.astype(np.float64) - ref) / np.maximum(np.abs(ref), 1e-6)).max()) if ref.size else 0.0


def run_bench(spec: BenchSpec, log=None) -> dict:
    records = []
    kernels = [KernelId(k) for k in spec.kernels]
    layouts = {Layout.parse(name) for name in spec.layouts}
    kernels = [k for k in kernels if k is KernelId.REFERENCE or LAYOUT_OF[k] in layouts]

    for shape in spec.shapes:
        m, k = shape
        w, x = make_problem(shape, spec.seed)
        mats = {lay: qformat.quantize_matrix(w, lay) for lay in layouts}
        oracle = {lay: reference_from_quant(q, x) for lay, q in mats.items()} if spec.check_correctness else {}

        cfg = spec.config
        if shape_key(shape) in spec.tuned:
            n1, n2 = spec.tuned[shape_key(shape)]
            cfg = KernelConfig(n1, n2, cfg.worker_threads, cfg.deterministic_reduction)
        elif spec.autotune and Layout.ZIGZAG in mats:
            cfg = autotune(mats[Layout.ZIGZAG], x, mode=spec.autotune, repeats=spec.repeats, worker_threads=cfg.worker_threads).best

        dense_macs = -(-m // QK) * k
        medians: dict[tuple[KernelId, float], float] = {}
        for s in sorted(set([0.0, *spec.sparsity])):
            th = calibration_threshold(s, spec.seed)
            x_eff = np.where(np.abs(x) >= np.float32(th.value), x, np.float32(0))
            for kern in kernels:
                if s > 0 and kern not in SPARSE_KERNELS:
                    continue  # dense kernels are measured once, at s = 0
                if s == 0 and kern in SPARSE_KERNELS and 0.0 not in spec.sparsity:
                    continue
                q = mats.get(LAYOUT_OF.get(kern))
                idx = None
                collect = None
                if kern is KernelId.B3_BALANCED:
                    ts = []
                    for _ in range(spec.repeats):
                        t0 = time.perf_counter_ns()
                        idx = collect_active(x, th)
                        ts.append(time.perf_counter_ns() - t0)
                    collect = float(np.median(ts))
                (y, rep), times = _time(
                    lambda: run_kernel(kern, q, x, cfg, threshold=th, idx=idx, w=w), spec.warmup, spec.repeats
                )
                medians[(kern, s)] = float(np.median(times))
                err = None
                if oracle and kern is not KernelId.REFERENCE:
                    ref = reference_from_quant(q, x_eff) if kern in SPARSE_KERNELS else oracle[LAYOUT_OF[kern]]
                    err = _max_rel_err(y, ref)
                bal = rep.balance_stats()
                rec = {
                    "m": m,
                    "k": k,
                    "kernel": kern.value,
                    "sparsity": s,
                    "threshold": th.value,
                    "n1": cfg.n1,
                    "n2": cfg.n2,
                    "worker_threads": cfg.worker_threads,
                    "n_workers": rep.n_workers,
                    "repeats": spec.repeats,
                    "n_ns": rep.n_ns,
                    "total_superblock_macs": int(rep.total_superblock_macs),
                    "mac_ratio_vs_dense": (
                        rep.total_superblock_macs / dense_macs if LAYOUT_OF.get(kern) is Layout.ZIGZAG else None
                    ),
                    "elementwise_branch_checks": int(rep.elementwise_branch_checks),
                    "skipped_elements": int(rep.skipped_elements),
                    "simdgroup_min": bal["min"],
                    "simdgroup_max": bal["max"],
                    "simdgroup_mean": bal["mean"],
                    "simdgroup_max_row_spread": bal["max_row_spread"],
                    "max_rel_err": err,
                    "output_digest": _digest(y),
                    "latency": {
                        "machine_dependent": True,
                        "median_ns": float(np.median(times)),
                        "p10_ns": float(np.percentile(times, 10)),
                        "p90_ns": float(np.percentile(times, 90)),
                        "collect_median_ns": collect,
                        "speedup_vs_rowquant": None,
                        "speedup_vs_zigzag_dense": None,
                    },
                }
                records.append(rec)
                if log:
                    log(f"{shape_key(shape):>12} {kern.value:<18} s={s:<5} median={rec['latency']['median_ns'] / 1e6:9.3f} ms")

        for rec in records:
            if (rec["m"], rec["k"]) != shape:
                continue
            lat = rec["latency"]
            for base, key in ((KernelId.ROWQUANT, "speedup_vs_rowquant"), (KernelId.ZIGZAG_DENSE, "speedup_vs_zigzag_dense")):
                if (base, 0.0) in medians and lat["median_ns"] > 0:
                    lat[key] = medians[(base, 0.0)] / lat["median_ns"]

    return {
        "schema_version": SCHEMA_VERSION,
        "machine": {"platform": platform.platform(), "cpu_count": os.cpu_count(), "python": platform.python_version()},
        "machine_dependent_fields": MACHINE_DEPENDENT,
        "spec": {
            "shapes": [list(s) for s in spec.shapes],
            "kernels": [k.value for k in kernels],
            "sparsity": list(spec.sparsity),
            "repeats": spec.repeats,
            "warmup": spec.warmup,
            "seed": spec.seed,
        },
        "records": records,
    }


CSV_COLUMNS = [
    "m", "k", "kernel", "sparsity", "threshold", "n1", "n2", "worker_threads", "n_workers", "repeats", "n_ns",
    "total_superblock_macs", "mac_ratio_vs_dense", "elementwise_branch_checks", "skipped_elements",
    "simdgroup_min", "simdgroup_max", "simdgroup_mean", "simdgroup_max_row_spread", "max_rel_err", "output_digest",
    "median_ns", "p10_ns", "p90_ns", "collect_median_ns", "speedup_vs_rowquant", "speedup_vs_zigzag_dense",
]  # fmt: skip


def to_csv(report: dict) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for rec in report["records"]:
        row = {k: v for k, v in rec.items() if k != "latency"}
        row.update(rec["latency"])
        row.pop("machine_dependent")
        writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in CSV_COLUMNS})
    return buf.getvalue()


_num = {"type": "number"}
_opt_num = {"type": ["number", "null"]}
_int = {"type": "integer", "minimum": 0}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "machine", "machine_dependent_fields", "spec", "records"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "machine_dependent_fields": {"type": "array", "items": {"type": "string"}},
        "records": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": [c for c in CSV_COLUMNS if c not in MACHINE_DEPENDENT] + ["latency"],
                "properties": {
                    "m": {"type": "integer", "minimum": 1},
                    "k": {"type": "integer", "minimum": 1},
                    "kernel": {"enum": ALL_KERNELS},
                    "sparsity": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                    "threshold": {"type": "number", "minimum": 0},
                    "n1": {"type": "integer", "minimum": 1},
                    "n2": {"type": "integer", "minimum": 1},
                    "worker_threads": {"type": "integer", "minimum": 1},
                    "n_workers": _int,
                    "repeats": {"type": "integer", "minimum": 1},
                    "n_ns": {"type": ["integer", "null"], "minimum": 0},
                    "total_superblock_macs": _int,
                    "mac_ratio_vs_dense": _opt_num,
                    "elementwise_branch_checks": _int,
                    "skipped_elements": _int,
                    "simdgroup_min": _int,
                    "simdgroup_max": _int,
                    "simdgroup_mean": _num,
                    "simdgroup_max_row_spread": _int,
                    "max_rel_err": _opt_num,
                    "output_digest": {"type": "string", "pattern": "^[0-9a-f]{16}$"},
                    "latency": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["machine_dependent", "median_ns", "p10_ns", "p90_ns"],
                        "properties": {
                            "machine_dependent": {"const": True},
                            "median_ns": _num,
                            "p10_ns": _num,
                            "p90_ns": _num,
                            "collect_median_ns": _opt_num,
                            "speedup_vs_rowquant": _opt_num,
                            "speedup_vs_zigzag_dense": _opt_num,
                        },
                    },
                },
            },
        },
    },
}
