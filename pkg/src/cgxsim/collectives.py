"""Compression-aware all-reduce over :mod:`cgxsim.simnet`.

Three schedules are provided. Each one reduces a flat float32 buffer whose
layout assigns a codec to every segment:

* ``sra``: scatter-reduce then allgather, two rounds;
* ``ring``: N-1 reduce hops plus N-1 gather hops around a ring;
* ``tree``: binary-tree reduce to node 0, then broadcast back down.

Summation order is fixed so results are reproducible bit for bit: SRA adds
contributions in ascending node id, the ring adds each chunk in path order
starting from the chunk's first node, and the tree adds the lower-id partial
first at every level. :func:`reference_sum` computes the same orders directly
from the inputs.

Quantized partial sums are re-encoded on every hop with a seed derived from
(step seed, hop, sender, buffer offset). Final sums are encoded once by their
owner and forwarded unchanged, so every node ends with identical values.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from cgxsim import codec
from cgxsim.model import CompressionPlan, FilterRules, FusedBuffer, Mode
from cgxsim.simnet import Phantom, ProtocolError, Recv, Send, SimNet, SimNetConfig, StepTrace


class Topology(str, enum.Enum):
    SRA = "sra"
    RING = "ring"
    TREE = "tree"


class ReduceOp(str, enum.Enum):
    SUM = "sum"
    AVERAGE = "average"


@dataclass(frozen=True)
class SegmentCodec:
    """Codec assignment for ``[start, start + length)`` of a fused buffer."""

    start: int
    length: int
    mode: Mode = Mode.UNCOMPRESSED
    bits: int = 4
    bucket_size: int = 128

    @property
    def end(self) -> int:
        return self.start + self.length


def uniform_layout(length: int, mode: Mode = Mode.UNCOMPRESSED, bits: int = 4, bucket_size: int = 128):
    return [SegmentCodec(0, length, Mode(mode), bits, bucket_size)] if length else []


def layout_for_buffer(buffer: FusedBuffer, plan: CompressionPlan, rules: FilterRules | None = None):
    """Resolve each buffer segment to a codec via the plan and layer filter."""
    layout = []
    for seg in buffer.segments:
        if rules is not None and rules.skips(seg.layer):
            layout.append(SegmentCodec(seg.buffer_offset, seg.length))
            continue
        p = plan.resolve(seg.layer.name)
        mode = p.mode
        layout.append(SegmentCodec(seg.buffer_offset, seg.length, mode, p.bits, p.bucket_size))
    return layout


@dataclass
class ReduceRequest:
    buffers: list
    layout: list = field(default_factory=list)
    topology: Topology = Topology.SRA
    op: ReduceOp = ReduceOp.SUM
    seed: int = 0

    def __post_init__(self):
        self.topology = Topology(self.topology)
        self.op = ReduceOp(self.op)
        if not self.buffers:
            raise ProtocolError("reduce request has no node buffers")
        self.buffers = [np.ascontiguousarray(b, dtype=np.float32).ravel() for b in self.buffers]
        d = self.buffers[0].size
        for i, b in enumerate(self.buffers):
            if b.size != d:
                raise ProtocolError(f"node {i} buffer has {b.size} elements, node 0 has {d}")
        if not self.layout:
            self.layout = uniform_layout(d)
        check_layout(self.layout, d)

    @property
    def length(self) -> int:
        return self.buffers[0].size


def check_layout(layout, length: int) -> None:
    pos = 0
    for seg in layout:
        if seg.start != pos or seg.length < 0:
            raise ProtocolError(f"layout segment at {seg.start} does not continue from offset {pos}")
        pos = seg.end
    if pos != length:
        raise ProtocolError(f"layout covers {pos} elements, buffer has {length}")


def chunk_bounds(layout, length: int, nodes: int) -> list[tuple[int, int]]:
    """Split ``[0, length)`` into ``nodes`` contiguous chunks.

    Interior boundaries sit at ``i * length // nodes`` moved down to the
    nearest bucket boundary of the quantized segment they fall in, so no bucket
    straddles two owners. The last chunk absorbs the remainder.
    """
    cuts = [0]
    for i in range(1, nodes):
        b = i * length // nodes
        for seg in layout:
            if seg.start <= b < seg.end:
                if seg.mode is Mode.QUANTIZE:
                    b = seg.start + (b - seg.start) // seg.bucket_size * seg.bucket_size
                break
        cuts.append(max(b, cuts[-1]))
    cuts.append(length)
    return list(zip(cuts[:-1], cuts[1:]))


class RangeCodec:
    """Encodes ranges of a fused buffer piece by piece according to a layout."""

    def __init__(self, layout, seed: int = 0, size_only: bool = False, truncate: float = 1.0):
        if truncate < 1:
            raise ValueError(f"truncation ratio must be >= 1, got {truncate}")
        if truncate != 1 and not size_only:
            raise ValueError("truncation is only modelled for size-only runs")
        self.layout = list(layout)
        self.seed = seed
        self.size_only = size_only
        self.truncate = truncate
        self.calls = 0

    def pieces(self, lo: int, hi: int):
        for seg in self.layout:
            a, b = max(lo, seg.start), min(hi, seg.end)
            if a < b:
                yield seg, a, b

    def quantized(self, lo: int, hi: int) -> bool:
        return any(seg.mode is not Mode.UNCOMPRESSED for seg, _, _ in self.pieces(lo, hi))

    def wire_size(self, lo: int, hi: int) -> int:
        total = 0
        for seg, a, b in self.pieces(lo, hi):
            if seg.mode is Mode.QUANTIZE:
                total += codec.wire_size(b - a, codec.QuantParams(seg.bits, seg.bucket_size))
            elif seg.mode is Mode.TOPK:
                raise ValueError("sparse segments have data-dependent size")
            else:
                total += 4 * math.ceil((b - a) / self.truncate)
        return total

    def encode(self, values, lo: int, hi: int, hop: int, node: int):
        if self.size_only:
            return Phantom(self.wire_size(lo, hi))
        parts = []
        for seg, a, b in self.pieces(lo, hi):
            x = values[a - lo : b - lo]
            if seg.mode is Mode.QUANTIZE:
                params = codec.QuantParams(seg.bits, seg.bucket_size, codec.derive_seed(self.seed, hop, node, a))
                parts.append(codec.encode(x, params))
                self.calls += 1
            elif seg.mode is Mode.TOPK:
                nz = np.flatnonzero(x)
                parts.append(codec.SparseChunk(nz, x[nz], b - a).to_bytes())
            else:
                parts.append(np.asarray(x, dtype="<f4").tobytes())
        return b"".join(parts)

    def decode(self, payload, lo: int, hi: int):
        if self.size_only:
            return None
        out = np.empty(hi - lo, dtype=np.float32)
        pos = 0
        for seg, a, b in self.pieces(lo, hi):
            n = b - a
            if seg.mode is Mode.QUANTIZE:
                size = codec.wire_size(n, codec.QuantParams(seg.bits, seg.bucket_size))
                out[a - lo : b - lo] = codec.decode(payload[pos : pos + size])
                self.calls += 1
            elif seg.mode is Mode.TOPK:
                _, k = codec.SPARSE_HEADER.unpack_from(payload, pos)
                size = codec.sparse_wire_size(k)
                out[a - lo : b - lo] = codec.topk_decompress(codec.SparseChunk.from_bytes(payload[pos : pos + size]))
            else:
                size = 4 * n
                out[a - lo : b - lo] = np.frombuffer(payload, dtype="<f4", count=n, offset=pos)
            pos += size
        if pos != len(payload):
            raise ProtocolError(f"payload for range [{lo}, {hi}) has {len(payload) - pos} trailing bytes")
        return out


def _add(a, b):
    return None if a is None else a + b


def _slice(vec, lo, hi):
    return None if vec is None else vec[lo:hi].copy()


def _sra_programs(vecs, bounds, rc: RangeCodec, n: int, depth: list):
    def program(i):
        lo_i, hi_i = bounds[i]
        for t in range(1, n):
            j = (i + t) % n
            lo, hi = bounds[j]
            yield Send(j, rc.encode(_slice(vecs[i], lo, hi), lo, hi, 0, i))
        parts = {i: _slice(vecs[i], lo_i, hi_i)}
        for t in range(1, n):
            src = (i - t) % n
            parts[src] = rc.decode((yield Recv(src)), lo_i, hi_i)
        total = parts[0]
        for src in range(1, n):
            total = _add(total, parts[src])
        quant = rc.quantized(lo_i, hi_i)
        payload = rc.encode(total, lo_i, hi_i, 1, i)
        depth[i] = 2 if quant else 0
        result = {i: rc.decode(payload, lo_i, hi_i)}
        for t in range(1, n):
            yield Send((i + t) % n, payload)
        for t in range(1, n):
            src = (i - t) % n
            lo, hi = bounds[src]
            result[src] = rc.decode((yield Recv(src)), lo, hi)
        return result

    return program


def _ring_programs(vecs, bounds, rc: RangeCodec, n: int, depth: list):
    def program(i):
        right, left = (i + 1) % n, (i - 1) % n
        acc = {}
        for t in range(n - 1):
            c = (i - t) % n
            lo, hi = bounds[c]
            partial = _slice(vecs[i], lo, hi) if t == 0 else acc.pop(c)
            yield Send(right, rc.encode(partial, lo, hi, t, i))
            c_in = (i - 1 - t) % n
            lo, hi = bounds[c_in]
            received = rc.decode((yield Recv(left)), lo, hi)
            acc[c_in] = _add(received, None if vecs[i] is None else vecs[i][lo:hi])
        own = (i + 1) % n
        lo, hi = bounds[own]
        payload = rc.encode(acc.pop(own), lo, hi, n - 1, i)
        depth[i] = n if rc.quantized(lo, hi) else 0
        result = {own: rc.decode(payload, lo, hi)}
        for t in range(n - 1):
            yield Send(right, payload)
            c_in = (i - t) % n
            lo, hi = bounds[c_in]
            payload = yield Recv(left)
            result[c_in] = rc.decode(payload, lo, hi)
        return result

    return program


def _tree_programs(vecs, d: int, rc: RangeCodec, n: int, depth: list):
    levels = max(0, math.ceil(math.log2(n))) if n > 1 else 0

    def program(i):
        acc = None if vecs[i] is None else vecs[i].copy()
        top = levels
        for l in range(levels):
            step = 1 << l
            if i % (2 * step) == step:
                yield Send(i - step, rc.encode(acc, 0, d, l, i))
                top = l
                break
            partner = i + step
            if partner < n:
                acc = _add(acc, rc.decode((yield Recv(partner)), 0, d))
        if i == 0:
            payload = rc.encode(acc, 0, d, levels, 0)
            depth[0] = levels + 1 if rc.quantized(0, d) else 0
        else:
            payload = yield Recv(i - (1 << top))
        result = rc.decode(payload, 0, d)
        for l in reversed(range(top)):
            child = i + (1 << l)
            if child < n:
                yield Send(child, payload)
        return {0: result}

    return program, 2 * levels


def _run(request: ReduceRequest | None, config: SimNetConfig, topology: Topology, *, d=None, layout=None, seed=0,
         truncate=1.0):
    size_only = request is None
    if request is not None:
        d, layout, seed = request.length, request.layout, request.seed
        vecs = request.buffers
        n = len(vecs)
    else:
        n = config.nodes
        vecs = [None] * n
        layout = layout or uniform_layout(d)
        check_layout(layout, d)
    if config.nodes != n:
        raise ProtocolError(f"request has {n} node buffers, network has {config.nodes} nodes")
    rc = RangeCodec(layout, seed, size_only, truncate)
    depth = [0] * n

    if n == 1:
        trace = StepTrace.zeros(1)
        trace.results = [None if size_only else vecs[0].copy()]
        return trace

    if topology is Topology.TREE:
        program, rounds = _tree_programs(vecs, d, rc, n, depth)
        bounds = [(0, d)]
    else:
        bounds = chunk_bounds(layout, d, n)
        if topology is Topology.SRA:
            program, rounds = _sra_programs(vecs, bounds, rc, n, depth), 2
        else:
            program, rounds = _ring_programs(vecs, bounds, rc, n, depth), 2 * (n - 1)

    trace = SimNet(config).run_step(program)
    trace.rounds = rounds
    trace.stages = max(depth)
    trace.codec_calls = rc.calls
    if not size_only:
        results = []
        for parts in trace.results:
            out = np.empty(d, dtype=np.float32)
            for c, values in parts.items():
                lo, hi = bounds[c]
                out[lo:hi] = values
            results.append(out)
        trace.results = results
    return trace


def allreduce(request: ReduceRequest, config: SimNetConfig) -> tuple[list[np.ndarray], StepTrace]:
    """All-reduce ``request.buffers`` across ``config.nodes`` simulated nodes."""
    trace = _run(request, config, request.topology)
    results = trace.results
    if request.op is ReduceOp.AVERAGE:
        n = np.float32(len(results))
        results = [r / n for r in results]
    return results, trace


def allreduce_sra(request: ReduceRequest, config: SimNetConfig):
    request.topology = Topology.SRA
    return allreduce(request, config)


def allreduce_ring(request: ReduceRequest, config: SimNetConfig):
    request.topology = Topology.RING
    return allreduce(request, config)


def allreduce_tree(request: ReduceRequest, config: SimNetConfig):
    request.topology = Topology.TREE
    return allreduce(request, config)


def simulate_cost(length: int, config: SimNetConfig, topology, layout=None, truncate: float = 1.0) -> StepTrace:
    """Run a schedule with size-only payloads; no vector data is touched.

    ``truncate`` models a pseudo-codec that sends only the first
    ``1/truncate`` of every uncompressed piece.
    """
    return _run(None, config, Topology(topology), d=length, layout=layout, truncate=truncate)


def estimate_step_time(length: int, config: SimNetConfig, topology, layout=None, truncate: float = 1.0) -> float:
    """Closed-form alpha-beta time of one all-reduce of ``length`` elements.

    Roughly ``alpha * rounds + beta * (bytes on the critical path)``, worked
    out from chunk sizes alone; uses the network's default link cost.
    """
    topology = Topology(topology)
    n = config.nodes
    if n == 1:
        return 0.0
    layout = layout or uniform_layout(length)
    rc = RangeCodec(layout, size_only=True, truncate=truncate)
    alpha, beta = config.alpha, config.beta
    if topology is Topology.TREE:
        levels = math.ceil(math.log2(n))
        return 2 * levels * (alpha + beta * rc.wire_size(0, length))
    sizes = [rc.wire_size(lo, hi) for lo, hi in chunk_bounds(layout, length, n)]
    if topology is Topology.SRA:
        return _sra_time(sizes, alpha, beta)
    return 2 * (n - 1) * (alpha + beta * max(sizes))


def _sra_time(sizes, alpha: float, beta: float) -> float:
    # chunk sizes differ in bytes when the layout mixes codecs, so follow each
    # node's egress queue instead of assuming the busiest node sets the pace
    n = len(sizes)
    ready = [0.0] * n
    for i in range(n):
        sent = 0
        for t in range(1, n):
            j = (i + t) % n
            sent += sizes[j]
            ready[j] = max(ready[j], beta * sent + alpha)
    total = sum(sizes)
    done = list(ready)
    for j in range(n):
        start = max(ready[j], beta * (total - sizes[j]))
        done[j] = max(done[j], start + (n - 1) * beta * sizes[j])
        for t in range(1, n):
            i = (j + t) % n
            done[i] = max(done[i], start + t * beta * sizes[j] + alpha)
    return max(done)


def reference_sum(vectors, topology, layout=None) -> np.ndarray:
    """Lossless sum of float32 ``vectors`` in the topology's fixed order.

    Computed directly from the inputs, without any messaging.
    """
    topology = Topology(topology)
    vecs = [np.asarray(v, dtype=np.float32).ravel() for v in vectors]
    n, d = len(vecs), vecs[0].size
    if topology is Topology.SRA or n == 1:
        total = vecs[0].copy()
        for v in vecs[1:]:
            total = total + v
        return total
    if topology is Topology.TREE:
        partial = [v.copy() for v in vecs]
        step = 1
        while step < n:
            for i in range(0, n, 2 * step):
                if i + step < n:
                    partial[i] = partial[i] + partial[i + step]
            step *= 2
        return partial[0]
    layout = layout or uniform_layout(d)
    out = np.empty(d, dtype=np.float32)
    for c, (lo, hi) in enumerate(chunk_bounds(layout, d, n)):
        total = vecs[c][lo:hi].copy()
        for k in range(1, n):
            total = total + vecs[(c + k) % n][lo:hi]
        out[lo:hi] = total
    return out
