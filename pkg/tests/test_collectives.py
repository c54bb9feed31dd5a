import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgxsim.collectives import (
    ReduceOp,
    ReduceRequest,
    SegmentCodec,
    Topology,
    allreduce,
    allreduce_ring,
    allreduce_sra,
    allreduce_tree,
    chunk_bounds,
    estimate_step_time,
    layout_for_buffer,
    reference_sum,
    simulate_cost,
    uniform_layout,
)
from cgxsim.model import CompressionPlan, FilterRules, LayerKind, LayerSpec, Mode, assemble_fused_buffers
from cgxsim.simnet import ProtocolError, SimNetConfig

TOPOLOGIES = list(Topology)
Q4 = dict(mode=Mode.QUANTIZE, bits=4, bucket_size=128)


def _vectors(n, d, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=d).astype(np.float32) for _ in range(n)]


def _run(vecs, topology, layout=None, seed=0, nodes=None):
    req = ReduceRequest(vecs, layout or [], topology, seed=seed)
    return allreduce(req, SimNetConfig.preset("commodity", nodes or len(vecs)))


@pytest.mark.parametrize("topology", TOPOLOGIES)
def test_single_node_is_identity(topology):
    v = _vectors(1, 50)
    results, trace = _run(v, topology)
    assert np.array_equal(results[0], v[0])
    assert trace.total_bytes == 0 and trace.elapsed == 0


@pytest.mark.parametrize("topology", TOPOLOGIES)
def test_all_ones_sum_exactly(topology):
    results, _ = _run([np.ones(37, np.float32)] * 4, topology)
    for r in results:
        assert np.array_equal(r, np.full(37, 4.0, np.float32))


def test_sra_is_ascending_sequential_sum():
    vecs = _vectors(5, 999, seed=4)
    expected = vecs[0].copy()
    for v in vecs[1:]:
        expected = expected + v
    results, _ = _run(vecs, Topology.SRA)
    assert np.array_equal(results[3], expected)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 16), st.integers(0, 700), st.sampled_from(TOPOLOGIES), st.integers(0, 10**6))
def test_lossless_matches_fixed_order_sum(n, d, topology, seed):
    vecs = _vectors(n, d, seed)
    results, _ = _run(vecs, topology)
    expected = reference_sum(vecs, topology)
    for r in results:
        assert np.array_equal(r, expected)


def test_ring_with_two_nodes_is_plain_sum():
    vecs = _vectors(2, 100, seed=2)
    results, trace = allreduce_ring(ReduceRequest(vecs), SimNetConfig(2))
    assert np.array_equal(results[0], vecs[0] + vecs[1])
    assert trace.rounds == 2


def test_sra_bytes_per_node():
    d = 10**6
    vecs = [np.zeros(d, np.float32)] * 8
    _, trace = allreduce_sra(ReduceRequest(vecs), SimNetConfig(8))
    assert trace.bytes_sent == [2 * 7 * 4 * d // 8] * 8
    assert trace.rounds == 2


def test_tree_root_carries_more_than_ring_nodes():
    d = 10**5
    cfg = SimNetConfig(8)
    tree = simulate_cost(d, cfg, Topology.TREE)
    ring = simulate_cost(d, cfg, Topology.RING)
    assert max(tree.bytes_sent) == 3 * 4 * d
    assert max(ring.bytes_sent) == 2 * 7 * 4 * d // 8
    assert max(tree.bytes_sent) > max(ring.bytes_sent)


@pytest.mark.parametrize("n,rounds", [(2, 2), (4, 4), (8, 6), (5, 6)])
def test_tree_rounds(n, rounds):
    assert simulate_cost(64, SimNetConfig(n), Topology.TREE).rounds == rounds


def test_ring_rounds():
    assert simulate_cost(64, SimNetConfig(8), Topology.RING).rounds == 14
    assert simulate_cost(64, SimNetConfig(8), Topology.SRA).rounds == 2


def test_stage_counters():
    vecs = _vectors(8, 4096, seed=1)
    layout = uniform_layout(4096, **Q4)
    stages = {t: _run(vecs, t, layout)[1].stages for t in TOPOLOGIES}
    assert stages == {Topology.SRA: 2, Topology.RING: 8, Topology.TREE: 4}
    assert _run(vecs, Topology.RING)[1].stages == 0


@pytest.mark.parametrize("topology", TOPOLOGIES)
def test_nodes_agree_under_compression(topology):
    vecs = _vectors(6, 3000, seed=9)
    results, _ = _run(vecs, topology, uniform_layout(3000, **Q4), seed=17)
    for r in results[1:]:
        assert np.array_equal(r, results[0])


@pytest.mark.parametrize("topology", TOPOLOGIES)
def test_compression_is_seeded(topology):
    vecs = _vectors(4, 1000)
    layout = uniform_layout(1000, **Q4)
    a, _ = _run(vecs, topology, layout, seed=1)
    b, _ = _run(vecs, topology, layout, seed=1)
    c, _ = _run(vecs, topology, layout, seed=2)
    assert np.array_equal(a[0], b[0])
    assert not np.array_equal(a[0], c[0])


def test_sra_error_bound():
    s = 15
    vecs = _vectors(8, 4096, seed=3)
    results, _ = _run(vecs, Topology.SRA, uniform_layout(4096, **Q4), seed=5)
    exact = np.sum(np.asarray(vecs, np.float64), axis=0)
    bucket_norm = max(np.linalg.norm(np.asarray(v, np.float64).reshape(-1, 128), axis=1).max() for v in vecs)
    final_norm = np.linalg.norm(exact.reshape(-1, 128), axis=1).max()
    err = np.abs(results[0] - exact)
    # 7 remote contributions each off by at most one grid step, plus the final encode
    assert np.all(err <= (7 * bucket_norm + 1.01 * final_norm) / s)


def test_sra_has_less_error_than_ring():
    layout = uniform_layout(4096, **Q4)
    errs = {Topology.SRA: [], Topology.RING: []}
    for trial in range(5):
        vecs = _vectors(8, 4096, seed=100 + trial)
        exact = np.sum(np.asarray(vecs, np.float64), axis=0)
        for t in errs:
            errs[t].append(np.linalg.norm(_run(vecs, t, layout, seed=trial)[0][0] - exact))
    assert np.mean(errs[Topology.SRA]) < np.mean(errs[Topology.RING])


def test_average_op():
    vecs = [np.full(10, 2.0, np.float32), np.full(10, 4.0, np.float32)]
    results, _ = allreduce(ReduceRequest(vecs, op=ReduceOp.AVERAGE), SimNetConfig(2))
    assert np.array_equal(results[1], np.full(10, 3.0, np.float32))


def test_wrapper_sets_topology():
    req = ReduceRequest(_vectors(3, 10))
    _, trace = allreduce_tree(req, SimNetConfig(3))
    assert req.topology is Topology.TREE and trace.rounds == 4


def test_mismatched_buffers_rejected():
    with pytest.raises(ProtocolError, match="node 1"):
        ReduceRequest([np.zeros(4), np.zeros(5)])
    with pytest.raises(ProtocolError):
        ReduceRequest([np.zeros(4)], [SegmentCodec(0, 3)])
    with pytest.raises(ProtocolError, match="2 node buffers"):
        allreduce(ReduceRequest(_vectors(2, 4)), SimNetConfig(3))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3000), st.integers(1, 12), st.integers(1, 300), st.integers(0, 500))
def test_chunks_align_to_buckets(d, n, bucket, split):
    split = min(split, d)
    layout = [SegmentCodec(0, split)] if split else []
    if d - split:
        layout.append(SegmentCodec(split, d - split, Mode.QUANTIZE, 4, bucket))
    bounds = chunk_bounds(layout, d, n)
    assert len(bounds) == n and bounds[0][0] == 0 and bounds[-1][1] == d
    assert all(a[1] == b[0] for a, b in zip(bounds, bounds[1:]))
    for lo, _ in bounds[1:]:
        if lo > split:
            assert (lo - split) % bucket == 0


def test_uncompressed_segments_stay_exact_next_to_quantized_ones():
    vecs = _vectors(4, 2000, seed=6)
    layout = [SegmentCodec(0, 700), SegmentCodec(700, 1300, **Q4)]
    for t in TOPOLOGIES:
        results, _ = _run(vecs, t, layout, seed=3)
        assert np.array_equal(results[0][:700], reference_sum(vecs, t)[:700])


def test_sparse_segments_are_lossless():
    vecs = []
    rng = np.random.default_rng(0)
    for _ in range(4):
        v = np.zeros(500, np.float32)
        v[rng.choice(500, 20, replace=False)] = rng.normal(size=20)
        vecs.append(v)
    layout = [SegmentCodec(0, 500, Mode.TOPK)]
    for t in TOPOLOGIES:
        results, trace = _run(vecs, t, layout)
        assert np.array_equal(results[0], reference_sum(vecs, t))
        assert trace.total_bytes < simulate_cost(500, SimNetConfig(4), t).total_bytes


def test_layout_from_plan_and_filters():
    layers = [LayerSpec("w", 5000), LayerSpec("b", 10, LayerKind.BIAS), LayerSpec("e", 8000)]
    (buf,) = assemble_fused_buffers(layers)
    plan = CompressionPlan.uniform(4, 128)
    plan.layers["e"] = plan.defaults.__class__(Mode.QUANTIZE, 2, 256)
    layout = layout_for_buffer(buf, plan, FilterRules())
    assert [(s.start, s.length, s.mode, s.bits) for s in layout] == [
        (0, 5000, Mode.QUANTIZE, 4),
        (5000, 10, Mode.UNCOMPRESSED, 4),
        (5010, 8000, Mode.QUANTIZE, 2),
    ]


# --- cost model ---------------------------------------------------------------


def test_sra_estimate_example():
    cfg = SimNetConfig(8, alpha=10e-6, beta=1 / 15e9)
    d = 10**6
    expected = 2 * 10e-6 + 2 * (7 / 8) * 4e6 / 15e9
    assert estimate_step_time(d, cfg, Topology.SRA) == pytest.approx(expected, rel=1e-12)
    assert simulate_cost(d, cfg, Topology.SRA).elapsed == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("topology", TOPOLOGIES)
def test_beta_zero_leaves_latency_only(topology):
    cfg = SimNetConfig(8, alpha=1e-5, beta=0.0)
    trace = simulate_cost(12345, cfg, topology)
    assert estimate_step_time(12345, cfg, topology) == pytest.approx(1e-5 * trace.rounds)
    assert trace.elapsed == pytest.approx(1e-5 * trace.rounds)


def test_one_node_costs_nothing():
    assert estimate_step_time(100, SimNetConfig(1), Topology.RING) == 0.0


def test_latency_bound_tree_beats_ring():
    cfg = SimNetConfig(8, alpha=1e-5, beta=0.0)
    assert simulate_cost(1000, cfg, Topology.TREE).elapsed < simulate_cost(1000, cfg, Topology.RING).elapsed


@settings(max_examples=60, deadline=None)
@given(st.sampled_from([2, 4, 8]), st.sampled_from(TOPOLOGIES), st.integers(1, 200_000), st.integers(1, 8),
       st.sampled_from([64, 128, 512]), st.floats(0, 1), st.floats(0, 1e-4), st.floats(0, 1e-8))
def test_estimate_matches_simulation(n, topology, d, bits, bucket, frac, alpha, beta):
    split = int(d * frac)
    layout = [SegmentCodec(0, split)] if split else []
    if d - split:
        layout.append(SegmentCodec(split, d - split, Mode.QUANTIZE, bits, bucket))
    cfg = SimNetConfig(n, alpha, beta)
    sim = simulate_cost(d, cfg, topology, layout).elapsed
    est = estimate_step_time(d, cfg, topology, layout)
    assert est == pytest.approx(sim, rel=1e-9, abs=1e-15)


def test_commodity_ordering_at_64mib():
    cfg = SimNetConfig.preset("commodity", 8)
    d = 64 * 1024 * 1024 // 4
    layout = uniform_layout(d, **Q4)
    t = {top: simulate_cost(d, cfg, top, layout).elapsed for top in TOPOLOGIES}
    assert t[Topology.SRA] <= t[Topology.RING] <= t[Topology.TREE]


def test_truncation_shrinks_payloads():
    cfg = SimNetConfig(4)
    full = simulate_cost(4000, cfg, Topology.SRA)
    quarter = simulate_cost(4000, cfg, Topology.SRA, truncate=4)
    assert quarter.total_bytes == full.total_bytes // 4
    assert estimate_step_time(4000, cfg, Topology.SRA, truncate=4) == pytest.approx(quarter.elapsed)
    with pytest.raises(ValueError):
        simulate_cost(10, cfg, Topology.SRA, truncate=0.5)


def test_log2_helper_consistency():
    # rounds for the tree follow 2 * ceil(log2 N)
    for n in range(2, 17):
        assert simulate_cost(8, SimNetConfig(n), Topology.TREE).rounds == 2 * math.ceil(math.log2(n))
