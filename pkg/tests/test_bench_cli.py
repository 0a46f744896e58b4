import json
import subprocess
import sys
import time

import jsonschema
import numpy as np
import pytest

from sparsequant import bench, qformat as qf
from sparsequant.cli import main
from sparsequant.sparsity import parse_manifest


def write_matrix(path, w):
    qf.save_float_matrix(np.asarray(w, np.float32), path)
    return str(path)


# --- bench library ----------------------------------------------------------


def test_presets():
    assert len(bench.PRESETS["paper-grid"]) == 15
    assert (11008, 4096) in bench.PRESETS["llama-shapes"] and (4096, 11008) in bench.PRESETS["llama-shapes"]
    assert bench.parse_shape("2048x512") == (2048, 512)
    with pytest.raises(ValueError):
        bench.parse_shape("12")


def test_bench_spec_validation():
    with pytest.raises(ValueError):
        bench.BenchSpec([(256, 256)], repeats=0)
    with pytest.raises(ValueError):
        bench.BenchSpec([(256, 256)], kernels=["magic"])
    with pytest.raises(ValueError):
        bench.BenchSpec([(256, 256)], sparsity=[1.0])
    with pytest.raises(ValueError):
        bench.BenchSpec.from_preset("nope")


@pytest.fixture(scope="module")
def small_report():
    spec = bench.BenchSpec([(512, 1024), (300, 700)], kernels=bench.ALL_KERNELS, sparsity=[0.25, 0.5], repeats=2, warmup=1)
    return bench.run_bench(spec)


def test_report_schema(small_report):
    jsonschema.validate(small_report, bench.REPORT_SCHEMA)
    jsonschema.validate(json.loads(json.dumps(small_report)), bench.REPORT_SCHEMA)
    csv_text = bench.to_csv(small_report)
    header = csv_text.splitlines()[0].split(",")
    assert header[: len(bench.CSV_COLUMNS)] == bench.CSV_COLUMNS
    assert len(csv_text.splitlines()) == len(small_report["records"]) + 1


def test_report_correctness_and_counters(small_report):
    recs = small_report["records"]
    for r in recs:
        if r["max_rel_err"] is not None:
            assert r["max_rel_err"] <= 1e-4, r
    by = {(r["m"], r["k"], r["kernel"], r["sparsity"]): r for r in recs}
    b3 = by[(512, 1024, "b3_balanced", 0.5)]
    assert b3["total_superblock_macs"] == b3["n_ns"] * 2
    assert abs(b3["mac_ratio_vs_dense"] - b3["n_ns"] / 1024) == 0
    seq = by[(512, 1024, "zigzag_sequential", 0.0)]
    assert seq["latency"]["median_ns"] > 0


def test_sequential_vs_single_worker_dense():
    spec = bench.BenchSpec([(512, 300)], kernels=["zigzag_dense", "zigzag_sequential"], repeats=1, warmup=0,
                           config=bench.KernelConfig(1, 1))  # fmt: skip
    recs = bench.run_bench(spec)["records"]
    assert len({r["output_digest"] for r in recs}) == 1


def test_bench_counters_are_seed_deterministic():
    spec = bench.BenchSpec([(256, 512)], repeats=1, warmup=0)
    a, b = bench.run_bench(spec), bench.run_bench(spec)
    strip = lambda rep: [{k: v for k, v in r.items() if k != "latency"} for r in rep["records"]]  # noqa: E731
    assert strip(a) == strip(b)


# --- CLI --------------------------------------------------------------------


def test_quantize_zero_matrix(tmp_path, capsys):
    src = write_matrix(tmp_path / "z.f32", np.zeros((256, 256)))
    out = tmp_path / "z.spqt"
    assert main(["quantize", src, "--dims", "256x256", "-o", str(out), "--json-out", str(tmp_path / "r.json")]) == 0
    q = qf.load(out)
    assert not q.codes.any() and not q.d.any()
    assert json.loads((tmp_path / "r.json").read_text())["rmse"] == 0
    assert "RMSE 0" in capsys.readouterr().out


def test_quantize_is_deterministic(tmp_path, rng):
    src = write_matrix(tmp_path / "w.f32", rng.uniform(-1, 1, (300, 400)))
    for name in ("a", "b"):
        main(["quantize", src, "--dims", "300x400", "--layout", "row_grouped", "-o", str(tmp_path / name)])
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_quantize_size_mismatch(tmp_path, capsys):
    src = write_matrix(tmp_path / "w.f32", np.zeros((10, 10)))
    assert main(["quantize", src, "--dims", "10x11", "-o", str(tmp_path / "o")]) == 2
    assert "error:" in capsys.readouterr().err


@pytest.mark.parametrize("layout", ["row_grouped", "zigzag"])
def test_verify_2048(tmp_path, rng, layout):
    src = write_matrix(tmp_path / "w.f32", rng.uniform(-1, 1, (2048, 2048)))
    out = str(tmp_path / "w.spqt")
    main(["quantize", src, "--dims", "2048x2048", "--layout", layout, "-o", out])
    assert main(["verify", out, src, "--cases", "1", "--sparsity", "0.5"]) == 0


def test_verify_zero_matrix(tmp_path):
    src = write_matrix(tmp_path / "z.f32", np.zeros((256, 512)))
    out = str(tmp_path / "z.spqt")
    main(["quantize", src, "--dims", "256x512", "-o", out])
    rep = tmp_path / "v.json"
    assert main(["verify", out, src, "--json-out", str(rep)]) == 0
    data = json.loads(rep.read_text())
    assert all(v == 0 for v in data["kernel_max_rel_err"].values()) and data["quant_rmse"] == 0


def test_verify_localizes_corrupted_nibble(tmp_path, rng, capsys):
    src = write_matrix(tmp_path / "w.f32", rng.uniform(-1, 1, (512, 300)))
    out = tmp_path / "w.spqt"
    main(["quantize", src, "--dims", "512x300", "-o", str(out)])
    q = qf.load(out)
    target = q.superblock_index(1, 7)
    blob = bytearray(out.read_bytes())
    blob[36 + 148 * target + 20 + 5] ^= 0x0F  # low nibble of codes byte 5
    out.write_bytes(bytes(blob))
    assert main(["verify", str(out), src, "--json-out", str(tmp_path / "v.json")]) == 1
    data = json.loads((tmp_path / "v.json").read_text())
    assert data["mismatched_superblocks"] == [[1, 7]] and not data["passed"]
    assert "(1, 7)" in capsys.readouterr().out


def test_verify_dimension_mismatch(tmp_path, rng):
    src = write_matrix(tmp_path / "w.f32", rng.uniform(-1, 1, (256, 256)))
    out = str(tmp_path / "w.spqt")
    main(["quantize", src, "--dims", "256x256", "-o", out])
    other = write_matrix(tmp_path / "o.f32", np.zeros((256, 255)))
    assert main(["verify", out, other]) != 0


def test_convert(tmp_path, rng):
    src = write_matrix(tmp_path / "w.f32", rng.uniform(-1, 1, (256, 512)))
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    main(["quantize", src, "--dims", "256x512", "--layout", "row_grouped", "-o", a])
    assert main(["convert", a, "--to", "zigzag", "-o", b]) == 0
    assert qf.load(b).layout is qf.Layout.ZIGZAG
    assert main(["convert", b, "--to", "zigzag", "-o", a]) == 2


def test_calibrate_default_levels(tmp_path, rng):
    samples = rng.standard_normal(20001).astype("<f4")
    (tmp_path / "s.f32").write_bytes(samples.tobytes())
    out = tmp_path / "m.txt"
    assert main(["calibrate", "--samples", f"attn={tmp_path / 's.f32'}", "-o", str(out)]) == 0
    sections = parse_manifest(out.read_text())
    assert [s for _, s, _ in sections] == [0.25, 0.40, 0.50, 0.65]
    ordered = np.sort(np.abs(samples))
    half = sections[2][2]["attn"].value
    assert half == ordered[int(np.ceil(0.5 * samples.size)) - 1]
    assert abs(half - 0.674) < 0.05  # sanity anchor only


def test_calibrate_zero_and_grouped(tmp_path):
    for name, vals in (("q", [1, 2, 3]), ("k", [4, 5, 6]), ("up", [7, 8])):
        (tmp_path / name).write_bytes(np.array(vals, "<f4").tobytes())
    out = tmp_path / "m.txt"
    main(["calibrate", "--samples", f"q={tmp_path / 'q'}", "--sparsity", "0", "-o", str(out)])
    assert parse_manifest(out.read_text())[0][2]["q"].value == 0
    args = ["calibrate", "--mode", "grouped", "--group", "q,k", "--sparsity", "0.5", "-o", str(out), "--samples"]
    args += [f"{n}={tmp_path / n}" for n in ("q", "k", "up")]
    assert main(args) == 0
    table = parse_manifest(out.read_text())[0][2]
    assert table["q"].value == table["k"].value == 3 and table["up"].value == 7
    assert main(args[:-3] + [f"q={tmp_path / 'q'}"]) == 2  # group names a label with no samples


def test_autotune_and_tuned_bench(tmp_path):
    man = tmp_path / "tune.json"
    assert main(["autotune", "--shape", "256x512", "--n1-grid", "4", "--n2-grid", "2", "--mode", "virtual", "-o", str(man)]) == 0
    data = json.loads(man.read_text())
    assert data["configs"] == {"256x512": {"n1": 4, "n2": 2}}
    assert main(["autotune", "--shape", "256x512", "--n1-grid", "", "-o", str(man)]) == 2
    main(["autotune", "--shape", "256x512", "--n1-grid", "4", "--n2-grid", "2", "-o", str(man)])
    rep = tmp_path / "b.json"
    args = ["bench", "--shape", "256x512", "--kernels", "zigzag_dense", "--repeats", "1", "--tuned", str(man)]
    assert main(args + ["--json-out", str(rep)]) == 0
    rec = json.loads(rep.read_text())["records"][0]
    assert (rec["n1"], rec["n2"]) == (4, 2)


def test_bench_unknown_kernel(capsys):
    assert main(["bench", "--shape", "256x256", "--kernels", "warp"]) == 2
    assert main(["bench", "--preset", "nope"]) == 2


def test_end_to_end_pipeline(tmp_path, rng):
    t0 = time.perf_counter()
    src = write_matrix(tmp_path / "w.f32", rng.uniform(-1, 1, (512, 512)))
    (tmp_path / "s.f32").write_bytes(np.abs(rng.standard_normal(4096)).astype("<f4").tobytes())
    cont = str(tmp_path / "w.spqt")
    run = lambda *a: subprocess.run([sys.executable, "-m", "sparsequant", *a], capture_output=True, text=True)  # noqa: E731
    steps = [
        ["quantize", src, "--dims", "512x512", "-o", cont],
        ["calibrate", "--samples", f"x={tmp_path / 's.f32'}", "-o", str(tmp_path / "m.txt")],
        ["verify", cont, src],
        ["bench", "--shape", "512x512", "--repeats", "2", "--json-out", str(tmp_path / "b.json"),
         "--csv-out", str(tmp_path / "b.csv")],
    ]  # fmt: skip
    for step in steps:
        proc = run(*step)
        assert proc.returncode == 0, proc.stderr
    assert time.perf_counter() - t0 < 60
    jsonschema.validate(json.loads((tmp_path / "b.json").read_text()), bench.REPORT_SCHEMA)
    assert (tmp_path / "b.csv").read_text().startswith("m,k,kernel")
