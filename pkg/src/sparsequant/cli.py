"""sparsequant command line: quantize, convert, calibrate, verify, bench, autotune."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import bench, qformat, sparsity
from .engine import KernelConfig, autotune
from .qformat import Layout
from .verify import verify

DEFAULT_LEVELS = "0.25,0.40,0.50,0.65"


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _write_outputs(args, payload: dict, csv_text: str | None = None) -> None:
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(payload, indent=2) + "\n")
    if args.csv_out and csv_text is not None:
        Path(args.csv_out).write_text(csv_text)


def _config(args) -> KernelConfig:
    return KernelConfig(args.n1, args.n2, args.threads)


# ---------------------------------------------------------------------------


def cmd_quantize(args) -> int:
    m, k = bench.parse_shape(args.dims)
    w = qformat.load_float_matrix(args.input, m, k)
    q = qformat.quantize_matrix(w, args.layout)
    qformat.save(q, args.output)
    rmse = float(np.sqrt(np.mean((qformat.dequantize_matrix(q) - w) ** 2.0)))
    print(f"{args.output}: {m}x{k} {q.layout.name.lower()} {q.n_superblocks} superblocks, round-trip RMSE {rmse:.6g}")
    _write_outputs(args, {"output": str(args.output), "shape": [m, k], "layout": q.layout.name.lower(), "rmse": rmse})
    return 0


def cmd_convert(args) -> int:
    q = qformat.load(args.input)
    out = qformat.convert_layout(q, args.to)
    qformat.save(out, args.output)
    diff = qformat.dequantize_matrix(out) - qformat.dequantize_matrix(q)
    rmse = float(np.sqrt(np.mean(diff.astype(np.float64) ** 2)))
    print(f"{args.output}: {q.layout.name.lower()} -> {out.layout.name.lower()}, re-fit RMSE {rmse:.6g}")
    return 0


def cmd_calibrate(args) -> int:
    samples = {}
    for item in args.samples:
        label, sep, path = item.partition("=")
        if not sep:
            label, path = Path(item).stem, item
        samples[label] = sparsity.load_samples(path)
        if samples[label].size == 0:
            raise ValueError(f"{path}: no samples")
    mode = sparsity.ThresholdMode(args.mode)
    groups = [[g.strip() for g in spec.split(",") if g.strip()] for spec in args.group or []]
    if mode is sparsity.ThresholdMode.GROUPED:
        if not groups:
            raise ValueError("grouped mode needs at least one --group")
        grouped = {label for g in groups for label in g}
        unknown = grouped - set(samples)
        if unknown:
            raise ValueError(f"group label(s) without samples: {', '.join(sorted(unknown))}")
        groups += [[label] for label in samples if label not in grouped]
    elif groups:
        raise ValueError("--group only applies to grouped mode")

    sections = []
    for s in _floats(args.sparsity):
        if mode is sparsity.ThresholdMode.GROUPED:
            table = sparsity.calibrate_grouped(samples, groups, s)
        else:
            table = {label: sparsity.calibrate_threshold(v, s) for label, v in samples.items()}
        sections.append((mode, s, table))
    text = sparsity.format_manifest(sections)
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    _write_outputs(
        args,
        {
            "mode": mode.value,
            "sections": [{"target_sparsity": s, "thresholds": {k: v.value for k, v in t.items()}} for _, s, t in sections],
        },
    )
    return 0


def cmd_verify(args) -> int:
    q = qformat.load(args.container)
    source = qformat.load_float_matrix(args.source, q.m, q.k)
    rep = verify(q, source, sparsity=args.sparsity, cases=args.cases, seed=args.seed, cfg=_config(args))
    print(f"{args.container}: {q.m}x{q.k} {rep.layout}, quantization RMSE vs source {rep.quant_rmse:.6g}")
    for name, err in rep.kernel_max_rel_err.items():
        print(f"  {name:<16} max rel err {err:.3e}")
    for coord in rep.mismatched_superblocks:
        print(f"  superblock {coord} differs from source quantization")
    print("PASS" if rep.passed else "FAIL: " + "; ".join(rep.failures))
    _write_outputs(args, rep.to_dict())
    return 0 if rep.passed else 1


def _load_tuned(path) -> dict:
    data = json.loads(Path(path).read_text())
    return {key: (v["n1"], v["n2"]) for key, v in data["configs"].items()}


def cmd_bench(args) -> int:
    shapes = [bench.parse_shape(s) for s in args.shape or []]
    if args.preset:
        if args.preset not in bench.PRESETS:
            raise ValueError(f"unknown preset {args.preset!r}; choose from {', '.join(bench.PRESETS)}")
        shapes += bench.PRESETS[args.preset]
    if not shapes:
        raise ValueError("give --preset or at least one --shape")
    spec = bench.BenchSpec(
        shapes=shapes,
        kernels=[k.strip() for k in args.kernels.split(",")],
        sparsity=_floats(args.sparsity),
        repeats=args.repeats,
        warmup=args.warmup,
        seed=args.seed,
        config=_config(args),
        tuned=_load_tuned(args.tuned) if args.tuned else {},
        autotune=args.autotune,
        check_correctness=not args.no_check,
    )
    report = bench.run_bench(spec, log=print)
    _write_outputs(args, report, bench.to_csv(report))
    return 0


def cmd_autotune(args) -> int:
    targets = []
    if args.container:
        q = qformat.load(args.container)
        if q.layout is not Layout.ZIGZAG:
            q = qformat.convert_layout(q, Layout.ZIGZAG)
        targets.append(((q.m, q.k), q))
    shapes = [bench.parse_shape(s) for s in args.shape or []]
    if args.preset:
        shapes += bench.PRESETS[args.preset]
    for shape in shapes:
        w, _ = bench.make_problem(shape, args.seed)
        targets.append((shape, qformat.quantize_matrix(w, Layout.ZIGZAG)))
    if not targets:
        raise ValueError("give a container, --shape or --preset")
    grid = [(a, b) for a in _ints(args.n1_grid) for b in _ints(args.n2_grid)]
    if not grid:
        raise ValueError("candidate grid is empty")

    manifest = {"mode": args.mode, "kernel": args.kernel, "grid": [list(g) for g in grid], "configs": {}, "tables": {}, "notes": {}}
    for shape, q in targets:
        th = bench.calibration_threshold(args.sparsity, args.seed).value
        res = autotune(
            q, None, grid, repeats=args.repeats, mode=args.mode, kernel=args.kernel, threshold=th,
            worker_threads=args.threads, seed=args.seed,
        )  # fmt: skip
        key = bench.shape_key(shape)
        manifest["configs"][key] = {"n1": res.best.n1, "n2": res.best.n2}
        manifest["tables"][key] = res.table
        manifest["notes"][key] = res.notes
        print(f"{key:>12}: n1={res.best.n1} n2={res.best.n2}  " + " ".join(res.notes))
    text = json.dumps(manifest, indent=2) + "\n"
    Path(args.output).write_text(text)
    if args.json_out:
        Path(args.json_out).write_text(text)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="OS worker threads")
    common.add_argument("--json-out")
    common.add_argument("--csv-out")

    kernel = argparse.ArgumentParser(add_help=False)
    kernel.add_argument("--n1", type=int, default=32, help="threadgroups per superblock-row")
    kernel.add_argument("--n2", type=int, default=2, help="simdgroups per threadgroup")

    layouts = ["row_grouped", "zigzag"]
    p = argparse.ArgumentParser(prog="sparsequant", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("quantize", parents=[common], help="quantize a raw float32 matrix")
    s.add_argument("input")
    s.add_argument("--dims", required=True, help="MxK")
    s.add_argument("--layout", choices=layouts, default="zigzag")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("convert", parents=[common], help="re-quantize a container into the other layout")
    s.add_argument("input")
    s.add_argument("--to", choices=layouts, required=True)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("calibrate", parents=[common], help="compute sparsity thresholds from magnitude samples")
    s.add_argument("--samples", nargs="+", required=True, metavar="LABEL=PATH")
    s.add_argument("--mode", choices=[m.value for m in sparsity.ThresholdMode], default="unified")
    s.add_argument("--group", action="append", metavar="A,B,...", help="labels sharing one threshold")
    s.add_argument("--sparsity", default=DEFAULT_LEVELS)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("verify", parents=[common, kernel], help="check a container against its float source")
    s.add_argument("container")
    s.add_argument("source")
    s.add_argument("--sparsity", type=float, default=0.5)
    s.add_argument("--cases", type=int, default=3)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("bench", parents=[common, kernel], help="benchmark kernels over GEMV shapes")
    s.add_argument("--preset", help=f"one of: {', '.join(bench.PRESETS)}")
    s.add_argument("--shape", action="append", metavar="MxK")
    s.add_argument("--kernels", default=",".join(bench.DEFAULT_KERNELS))
    s.add_argument("--sparsity", default="0.25,0.40,0.50")
    s.add_argument("--repeats", type=int, default=20)
    s.add_argument("--warmup", type=int, default=3)
    s.add_argument("--tuned", help="manifest written by `autotune`")
    s.add_argument("--autotune", choices=["wallclock", "virtual"])
    s.add_argument("--no-check", action="store_true", help="skip the oracle comparison")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("autotune", parents=[common], help="search (n1, n2) per shape")
    s.add_argument("container", nargs="?")
    s.add_argument("--shape", action="append", metavar="MxK")
    s.add_argument("--preset", choices=list(bench.PRESETS))
    s.add_argument("--n1-grid", default="1,2,4,8,16,32,64")
    s.add_argument("--n2-grid", default="1,2,4")
    s.add_argument("--mode", choices=["wallclock", "virtual"], default="wallclock")
    s.add_argument("--kernel", choices=["zigzag_dense", "b2_unbalanced", "b3_balanced"], default="zigzag_dense")
    s.add_argument("--sparsity", type=float, default=0.0)
    s.add_argument("--repeats", type=int, default=20)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_autotune)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
