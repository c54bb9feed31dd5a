"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line to the
terminal (even under output capture) and then asserts. Run just this file
with ``pytest tests/test_acceptance.py -v``.
"""

import filecmp
import time
from statistics import NormalDist

import numpy as np
import pytest

from cgxsim import cli
from cgxsim.adaptive import AdaptiveConfig, baseline_error_E4, plan_error, plan_kmeans, plan_linear
from cgxsim.codec import QuantParams, dequantize, pack_levels, quantize, unpack_levels
from cgxsim.collectives import (
    ReduceRequest,
    SegmentCodec,
    Topology,
    allreduce,
    estimate_step_time,
    reference_sum,
    simulate_cost,
    uniform_layout,
)
from cgxsim.engine import EngineConfig
from cgxsim.model import CompressionPlan, Mode
from cgxsim.simnet import SimNetConfig
from cgxsim.synthetic import bundled_model
from cgxsim.training import bundled_task, reference_sgd, run_adaptive_training, train

pytestmark = pytest.mark.acceptance


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail, elapsed, limit):
        within = elapsed < limit
        verdict = "PASS" if ok and within else "FAIL"
        with capsys.disabled():
            print(f"\ncriterion {number}: {verdict} {detail} [{elapsed:.1f}s of {limit}s]")
        assert ok, detail
        assert within, f"took {elapsed:.1f}s, limit {limit}s"

    return emit


def test_criterion_1_codec_statistics(report):
    t0 = time.perf_counter()
    d, trials = 1024, 10_000
    x = np.random.default_rng(0).normal(size=d)
    total, total_sq = np.zeros(d), np.zeros(d)
    for seed in range(trials):
        y = dequantize(quantize(x, QuantParams(4, 128, seed)))
        total += y
        total_sq += y * y
    mean = total / trials
    se = np.sqrt((total_sq / trials - mean**2) / (trials - 1))
    z = np.abs(mean - x) / se
    beyond = int(np.sum(z >= 3))
    # 1024 components each at 3 SE: about 2.8 exceed by chance alone, so
    # judge the family with a Bonferroni bound and the sum of z^2
    bonferroni = NormalDist().inv_cdf(1 - 0.01 / (2 * d))
    chi = float(np.sum(z**2))
    unbiased = z.max() < bonferroni and abs(chi - d) < 5 * np.sqrt(2 * d)

    rng = np.random.default_rng(1)
    v = rng.normal(size=10**6) * rng.uniform(0.01, 100, size=10**6)
    c = quantize(v, QuantParams(4, 128, 42))
    norms = np.repeat(c.bucket_norms.astype(np.float64), 128)[: v.size]
    bounded = bool(np.all(np.abs(dequantize(c) - v) <= norms / 15 * (1 + 1e-6)))

    detail = (f"{beyond}/{d} components beyond 3 SE (chance expects {d * 0.0027:.1f}), max z {z.max():.2f} "
              f"< {bonferroni:.2f}, sum z^2 {chi:.0f} vs {d}; bound holds on 1e6 elements: {bounded}")
    report(1, unbiased and bounded, detail, time.perf_counter() - t0, 30)


def test_criterion_2_bit_exact_packing(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    failures = 0
    for bits in range(1, 9):
        for n in rng.integers(0, 5000, size=1000):
            levels = rng.integers(0, 1 << bits, n)
            signs = rng.integers(0, 2, n)
            data = pack_levels(levels, signs, bits)
            back_l, back_s = unpack_levels(data, int(n), bits)
            ok = len(data) == -(-int(n) * (bits + 1) // 8)
            failures += not (ok and np.array_equal(back_l, levels) and np.array_equal(back_s, signs))
    report(2, failures == 0, f"8000 roundtrips, {failures} mismatches", time.perf_counter() - t0, 10)


def _ascending(vecs):
    total = vecs[0].copy()
    for v in vecs[1:]:
        total = total + v
    return total


def test_criterion_3_lossless_collectives(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    cases = mismatches = 0
    for n in (2, 4, 8):
        for topology in Topology:
            for d in (1, 7, 1000, int(rng.integers(1, 10**5)), 10**5):
                vecs = [rng.normal(size=d).astype(np.float32) for _ in range(n)]
                results, _ = allreduce(ReduceRequest(vecs, [], topology), SimNetConfig(n))
                expected = _ascending(vecs) if topology is Topology.SRA else reference_sum(vecs, topology)
                mismatches += sum(not np.array_equal(r, expected) for r in results)
                cases += 1
    report(3, mismatches == 0, f"{cases} cases, {mismatches} node results differ", time.perf_counter() - t0, 30)


def test_criterion_4_sra_error_advantage(report):
    t0 = time.perf_counter()
    n, d = 8, 4096
    layout = uniform_layout(d, Mode.QUANTIZE, 4, 128)
    cfg = SimNetConfig(n)
    diffs = []
    errs = {Topology.SRA: [], Topology.RING: []}
    for trial in range(100):
        rng = np.random.default_rng([4, trial])
        vecs = [rng.normal(size=d).astype(np.float32) for _ in range(n)]
        exact = np.sum(np.asarray(vecs, np.float64), axis=0)
        for topology in errs:
            out, _ = allreduce(ReduceRequest(vecs, layout, topology, seed=trial), cfg)
            errs[topology].append(np.linalg.norm(out[0] - exact))
        diffs.append(errs[Topology.RING][-1] - errs[Topology.SRA][-1])
    diffs = np.array(diffs)
    t_stat = diffs.mean() / (diffs.std(ddof=1) / np.sqrt(len(diffs)))
    critical = 2.365  # one-sided 99% quantile of Student t with 99 degrees of freedom
    detail = (f"mean l2 error sra {np.mean(errs[Topology.SRA]):.3f} < ring {np.mean(errs[Topology.RING]):.3f}, "
              f"paired t {t_stat:.1f} > {critical}")
    report(4, bool(t_stat > critical), detail, time.perf_counter() - t0, 60)


def test_criterion_5_cost_model_and_ordering(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = 0.0
    for n in (2, 4, 8):
        for topology in Topology:
            for _ in range(12):
                d = int(rng.integers(1, 4_000_000))
                split = int(d * rng.random())
                layout = [SegmentCodec(0, split)] if split else []
                layout.append(SegmentCodec(split, d - split, Mode.QUANTIZE, int(rng.integers(1, 9)), 128))
                cfg = SimNetConfig(n, alpha=float(rng.uniform(1e-6, 1e-4)), beta=float(rng.uniform(1e-11, 1e-9)))
                sim = simulate_cost(d, cfg, topology, layout).elapsed
                worst = max(worst, abs(estimate_step_time(d, cfg, topology, layout) - sim) / sim)
    cfg = SimNetConfig.preset("commodity", 8)
    d = 64 * 1024 * 1024 // 4
    layout = uniform_layout(d, Mode.QUANTIZE, 4, 128)
    t = {top: simulate_cost(d, cfg, top, layout).elapsed for top in Topology}
    ordered = t[Topology.SRA] <= t[Topology.RING] <= t[Topology.TREE]
    detail = (f"worst estimate gap {worst:.2e}; 64 MiB commodity N=8: sra {t[Topology.SRA] * 1e3:.3f} ms, "
              f"ring {t[Topology.RING] * 1e3:.3f} ms, tree {t[Topology.TREE] * 1e3:.3f} ms")
    report(5, worst < 0.01 and ordered, detail, time.perf_counter() - t0, 30)


def test_criterion_6_sweep(report):
    t0 = time.perf_counter()
    layers, compute = bundled_model("transformer-like")
    rows = cli.sweep_rows(layers, compute, SimNetConfig.preset("commodity", 8), [1, 2, 4, 8, 16, 32, 64])
    check = cli.check_sweep(rows)
    detail = f"monotone {check['monotone']}, floor gap at ratio 32 is {check['floor_gap']:.2%} of baseline"
    report(6, check["ok"], detail, time.perf_counter() - t0, 30)


def test_criterion_7_convergence_parity(report):
    t0 = time.perf_counter()
    gaps, exact = [], True
    for name in ("logreg", "mlp"):
        for seed in range(3):
            task = bundled_task(name, seed=seed)
            base = train(task, EngineConfig(nodes=8, plan=CompressionPlan.lossless(), seed=seed))
            quant = train(task, EngineConfig(nodes=8, plan=CompressionPlan.uniform(4, 128), seed=seed))
            gaps.append((base.final_metric - quant.final_metric) / base.final_metric)
            if seed == 0:
                ref = reference_sgd(task, 8)
                exact &= base.losses == ref.losses and all(np.array_equal(base.params[k], ref.params[k])
                                                           for k in ref.params)
    detail = f"worst relative accuracy gap {max(gaps):.2%} over 6 runs; lossless equals single-process SGD: {exact}"
    report(7, max(gaps) < 0.01 and exact, detail, time.perf_counter() - t0, 300)


def test_criterion_8_adaptive(report):
    t0 = time.perf_counter()
    stats = cli.synthetic_stats("transformer-like", AdaptiveConfig(), seed=0)
    within = True
    for alpha in (0.5, 1.0, 2.0):
        for palette in ((2, 3, 4, 5, 6, 8), (2, 4, 8)):
            acfg = AdaptiveConfig(palette=palette, alpha=alpha)
            for planner in (plan_kmeans, plan_linear):
                plan = planner(stats, acfg)
                within &= plan_error(stats, plan) <= alpha * baseline_error_E4(stats)
    reduction = cli.adapt_rows(stats, AdaptiveConfig(), ["kmeans"])[0][0]["size_reduction"]

    task = bundled_task("embed-mlp")
    static = train(task, EngineConfig(nodes=8, plan=CompressionPlan.uniform(4, 128)))
    live = run_adaptive_training(task, EngineConfig(nodes=8), AdaptiveConfig(stats_period=100, stats_window=20))
    history_ok = all(p["meta"]["budget_satisfied"] for _, p in live.plan_history) and live.plan_history
    gap = (static.final_metric - live.final_metric) / static.final_metric
    fewer = live.total_bytes < static.total_bytes
    detail = (f"(a) plans within budget: {within and bool(history_ok)}; (b) k-means size reduction {reduction:.2f}x; "
              f"(c) bytes {live.total_bytes / 1e6:.1f} MB vs static {static.total_bytes / 1e6:.1f} MB, "
              f"accuracy gap {gap:.2%}")
    ok = within and bool(history_ok) and reduction >= 1.2 and fewer and gap < 0.01
    report(8, ok, detail, time.perf_counter() - t0, 300)


COMMANDS = [
    ["sweep"],
    ["reduce-bench", "--sizes-mib", "1,64"],
    ["train", "--task", "mlp", "--steps", "40", "--bits", "4", "1"],
    ["adapt"],
    ["allreduce-test", "--nodes", "8", "--length", "20000"],
]


def test_criterion_9_determinism(report, tmp_path):
    t0 = time.perf_counter()
    same, codes = True, []
    for i, argv in enumerate(COMMANDS):
        dirs = [tmp_path / f"{i}-{k}" for k in "ab"]
        for out in dirs:
            codes.append(cli.run(["--seed", "11", "--out", str(out), *argv]))
        files = sorted(p.name for p in dirs[0].iterdir())
        match, mismatch, errors = filecmp.cmpfiles(dirs[0], dirs[1], files, shallow=False)
        same &= not mismatch and not errors and len(match) == len(files) > 0
    detail = f"{len(COMMANDS)} commands run twice, outputs byte-identical: {same}"
    report(9, same and not any(codes), detail, time.perf_counter() - t0, 300)
