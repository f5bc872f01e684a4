"""Acceptance gate: one test per exit criterion, each reporting a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py``; the summary lines appear under
"acceptance criteria" at the end of the pytest output.
"""
import random
import subprocess
import sys
import time

import numpy as np
import pytest

import oracle
from conftest import ACCEPTANCE_LINES, FIXTURES
from compact_attention.attention import AttentionConfig, compact_attention, pixelwise_attention
from compact_attention.bench import BenchCase, flop_estimate, make_inputs, run_sweep
from compact_attention.cli import main as cli_main
from compact_attention.refselect import EmbeddedFrame, build_map, locate, select_references
from compact_attention.tensor import FormatError, count_ops, decode_tensor, encode_tensor, random_fill, read_tensor, write_tensor


def report(name, ok, detail):
    ACCEPTANCE_LINES.append((name, bool(ok), detail))
    print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    assert ok, detail


def random_instance(rng, max_m=3, max_hw=4, max_c=8):
    m, c = rng.randint(1, max_m), rng.randint(1, max_c)
    h, w = rng.randint(1, max_hw), rng.randint(1, max_hw)
    seed = rng.randrange(2**32)
    return (
        random_fill((c, h, w), seed),
        random_fill((m, c, h, w), seed + 1),
        random_fill((m, c, h, w), seed + 2),
    )


def test_01_compact_oracle_equivalence():
    rng = random.Random(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        x_in, x_a, x_l = random_instance(rng)
        p, s, seed = rng.randint(1, 4), rng.randint(1, 3), rng.randrange(2**32)
        out = compact_attention(x_in, x_a, x_l, AttentionConfig(p=p, s=s, lam=0.9, seed=seed))
        ref = oracle.compact(x_in, x_a, x_l, p, s, 0.9, seed)[0]
        worst = max(worst, float(np.abs(out.x_basis - np.asarray(ref)).max()))
    elapsed = time.perf_counter() - t0
    report("1 compact attention vs oracle", worst <= 1e-5 and elapsed < 5, f"max abs err {worst:.2e} (<=1e-5), {elapsed:.2f}s (<5s)")


def test_02_pixelwise_oracle_equivalence():
    rng = random.Random(202)
    worst = 0.0
    for _ in range(50):
        x_in, x_a, x_l = random_instance(rng)
        worst = max(worst, float(np.abs(pixelwise_attention(x_in, x_a, x_l) - np.asarray(oracle.pixelwise(x_in, x_a, x_l))).max()))
    report("2 pixel-wise attention vs loop oracle", worst <= 1e-6, f"max abs err {worst:.2e} (<=1e-6)")


def test_03_invariant_suite():
    rng = random.Random(303)
    failures = {"row-stochastic": 0, "unit-norm": 0, "permutation": 0, "shape": 0}
    for _ in range(100):
        x_in, x_a, x_l = random_instance(rng)
        cfg = AttentionConfig(p=rng.randint(1, 8), s=rng.randint(1, 5), seed=rng.randrange(2**32))
        out = compact_attention(x_in, x_a, x_l, cfg)
        for amap in (out.a_b, out.a_in):
            sums = amap.sum(axis=1, dtype=np.float64)
            if np.abs(sums - 1).max() > 1e-6 or amap.min() < 0 or amap.max() > 1:
                failures["row-stochastic"] += 1
        for basis in (out.b_l, out.b_a):
            norms = np.linalg.norm(basis.astype(np.float64), axis=1)
            if not np.all((norms == 0) | (np.abs(norms - 1) <= 1e-5)):
                failures["unit-norm"] += 1
        perm = list(range(x_a.shape[0]))
        rng.shuffle(perm)
        permuted = compact_attention(x_in, x_a[perm], x_l[perm], cfg).x_basis
        if np.abs(permuted - out.x_basis).max() > 1e-5:
            failures["permutation"] += 1
        if out.x_basis.shape != x_in.shape:
            failures["shape"] += 1
    report("3 invariant suite (100 trials each)", not any(failures.values()), f"failures {failures}")


def test_04_stability_many_iterations():
    rng = random.Random(404)
    bad = 0
    for _ in range(20):
        x_in, x_a, x_l = random_instance(rng, max_m=3, max_hw=6, max_c=16)
        out = compact_attention(x_in, x_a, x_l, AttentionConfig(p=rng.randint(1, 8), s=50, seed=rng.randrange(2**32)))
        finite = all(np.all(np.isfinite(a)) for a in (out.b_l, out.b_a, out.a_b, out.a_in, out.x_basis))
        stochastic = all(np.abs(a.sum(axis=1, dtype=np.float64) - 1).max() <= 1e-6 for a in (out.a_b, out.a_in))
        bad += not (finite and stochastic)
    report("4 stability at s=50 (20 trials)", bad == 0, f"{bad} trials with NaN/Inf or invalid maps")


def test_05_delaunay_and_location():
    rng = random.Random(505)
    t0 = time.perf_counter()
    violations = 0
    disagreements = 0
    queries = 0
    for _ in range(200):
        n = rng.randint(3, 200)
        amap = build_map([EmbeddedFrame(i, rng.random(), rng.random()) for i in range(n)])
        pts = [f.coord for f in amap.points]
        for a, b, c in amap.triangles:
            if oracle.signed_area2(pts[a], pts[b], pts[c]) <= 0:
                violations += 1
            violations += sum(oracle.incircle(pts[a], pts[b], pts[c], p) > 1e-9 for p in pts)
        for _ in range(5):
            q = (rng.uniform(-0.25, 1.25), rng.uniform(-0.25, 1.25))
            hits = [t for t, (a, b, c) in enumerate(amap.triangles) if oracle.triangle_contains(pts[a], pts[b], pts[c], q)]
            disagreements += locate(amap, q) != (hits[0] if hits else None)
            queries += 1
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and disagreements == 0 and elapsed < 30
    report("5 Delaunay + point location", ok,
           f"{violations} empty-circle violations over 200 sets, {disagreements}/{queries} locate mismatches, {elapsed:.1f}s (<30s)")


def test_06_reference_selection():
    square = build_map([EmbeddedFrame(i, x, y) for i, (x, y) in enumerate([(0, 0), (1, 0), (1, 1), (0, 1)])])
    square_ok = select_references(square, (0.25, 0.25), 4) == [0, 1, 2, 3]

    rng = random.Random(606)
    prefix_failures = outside_failures = 0
    for _ in range(50):
        n = rng.randint(8, 60)
        amap = build_map([EmbeddedFrame(i, rng.random(), rng.random()) for i in range(n)])
        q = (rng.random(), rng.random())
        full = select_references(amap, q, 8)
        prefix_failures += any(select_references(amap, q, k) != full[:k] for k in range(3, 9))
        angle = rng.uniform(0, 2 * np.pi)
        far = (0.5 + 3 * np.cos(angle), 0.5 + 3 * np.sin(angle))
        refs = select_references(amap, far, 3)
        outside_failures += locate(amap, far) is not None or len(refs) < 3 or len(set(refs)) != len(refs)
    ok = square_ok and prefix_failures == 0 and outside_failures == 0
    report("6 reference selection", ok,
           f"square fixture {'exact' if square_ok else 'MISMATCH'}, prefix failures {prefix_failures}/50, outside-hull failures {outside_failures}/50")


@pytest.mark.slow
def test_07_efficiency_sweep():
    t0 = time.perf_counter()
    result = run_sweep(BenchCase(c=64, h=16, w=16, p=32, s=3, repeats=5), [2, 4, 8, 16])
    elapsed = time.perf_counter() - t0
    pix_ratio = result.median("pixelwise", 16) / result.median("pixelwise", 2)
    agg_ratio = result.aggregate_seconds[16] / result.aggregate_seconds[2]
    speed = result.median("compact", 16) / result.median("pixelwise", 16)
    ok = pix_ratio >= 4 and agg_ratio <= 1.5 and speed < 1 and elapsed < 120
    report("7 efficiency sweep m=2..16", ok,
           f"pixel-wise m16/m2 {pix_ratio:.2f} (>=4), aggregation m16/m2 {agg_ratio:.2f} (<=1.5), "
           f"compact/pixel-wise at m16 {speed:.2f} (<1), {elapsed:.1f}s (<120s)")


def test_08_flop_estimates_exact():
    cases = [BenchCase(m=2, c=2, h=2, w=2, p=2, s=2), BenchCase(m=3, c=3, h=1, w=2, p=1, s=3)]
    mismatches = []
    for case in cases:
        x_in, x_a, x_l = make_inputs(case)
        for method in ("compact", "pixelwise"):
            with count_ops() as counter:
                if method == "compact":
                    compact_attention(x_in, x_a, x_l, AttentionConfig(p=case.p, s=case.s))
                else:
                    pixelwise_attention(x_in, x_a, x_l)
            if counter.total != flop_estimate(method, case):
                mismatches.append((method, case.m, counter.total, flop_estimate(method, case)))
    report("8 FLOP estimates vs instrumented counts", not mismatches, f"mismatches {mismatches}")


def test_09_io_and_exit_codes(tmp_path, capsys):
    rng = np.random.default_rng(909)
    exact = 0
    for i in range(20):
        dims = tuple(int(d) for d in rng.integers(1, 6, size=rng.integers(1, 5)))
        x = (rng.standard_normal(dims) * 10 ** rng.uniform(-3, 3)).astype(np.float32)
        write_tensor(tmp_path / f"t{i}.ctf", x)
        exact += read_tensor(tmp_path / f"t{i}.ctf").tobytes() == x.tobytes()

    good = encode_tensor(np.ones((2, 3)))
    format_errors = 0
    for bad in (b"XTF1" + good[4:], good[:-3], good[:6]):
        try:
            decode_tensor(bad)
        except FormatError:
            format_errors += 1

    (tmp_path / "two.json").write_text('[[0, 0, 0], [1, 1, 1]]')
    (tmp_path / "enc.json").write_text('{"layers": 1, "channels": [2], "strides": [1], "kernel_size": 1, "in_channels": 2}')
    write_tensor(tmp_path / "xa4.ctf", random_fill((2, 4, 2, 2), 1))
    fx = {k: str(FIXTURES / f"tiny_{k}.ctf") for k in ("xin", "xa", "xl")}
    missing = str(tmp_path / "missing.ctf")
    expectations = [
        ("encode missing input", ["encode", "--config", str(tmp_path / "enc.json"), "--input", missing, "--output", str(tmp_path / "o.ctf")], 2),
        ("attend channel mismatch", ["attend", "--xin", fx["xin"], "--xa", str(tmp_path / "xa4.ctf"), "--xl", fx["xl"], "--out-basis", str(tmp_path / "o.ctf")], 2),
        ("baseline missing input", ["baseline", "--xin", missing, "--xa", fx["xa"], "--xl", fx["xl"], "--out", str(tmp_path / "o.ctf")], 2),
        ("select-refs <3 points", ["select-refs", "--points", str(tmp_path / "two.json"), "--query", "0,0"], 2),
        ("build-map <3 points", ["build-map", "--points", str(tmp_path / "two.json")], 2),
        ("bench bad flag", ["bench", "--nope"], 1),
        ("unknown subcommand", ["paint"], 1),
    ]
    wrong = []
    for label, argv, want in expectations:
        try:
            code = cli_main(argv)
        except SystemExit as exc:
            code = exc.code
        if code != want:
            wrong.append((label, code, want))
    capsys.readouterr()
    ok = exact == 20 and format_errors == 3 and not wrong
    report("9 CTF1 I/O and CLI exit codes", ok, f"{exact}/20 bit-exact round trips, {format_errors}/3 format errors raised, exit-code mismatches {wrong}")


def test_10_end_to_end_determinism(tmp_path):
    outputs = []
    for run in range(2):
        out = tmp_path / f"run{run}.ctf"
        proc = subprocess.run(
            [sys.executable, "-m", "compact_attention", "attend",
             "--xin", str(FIXTURES / "tiny_xin.ctf"), "--xa", str(FIXTURES / "tiny_xa.ctf"), "--xl", str(FIXTURES / "tiny_xl.ctf"),
             "--config", str(FIXTURES / "tiny_config.json"), "--out-basis", str(out)],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
        outputs.append(out.read_bytes())
    expected = read_tensor(FIXTURES / "tiny_xbasis_oracle.ctf")
    err = float(np.abs(decode_tensor(outputs[0]) - expected).max())
    identical = outputs[0] == outputs[1]
    report("10 end-to-end determinism on committed fixture", identical and err <= 1e-5,
           f"runs byte-identical: {identical}, max abs err vs committed oracle {err:.2e} (<=1e-5)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
