"""Per-node communication engine.

Nodes submit per-layer gradients; at flush the engine groups them by cycle
time, packs each group into fused buffers of at most ``buffer_bytes``,
all-reduces every buffer over the simulated network under the active plan,
and hands each node the averaged gradients in submission order. A step
completes only when every node has flushed.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field

import numpy as np

from cgxsim import codec
from cgxsim.adaptive import AdaptiveConfig
from cgxsim.collectives import ReduceRequest, Topology, allreduce, layout_for_buffer
from cgxsim.model import (
    DEFAULT_BUFFER_BYTES,
    CompressionPlan,
    FilterRules,
    GradientTensor,
    LayerSpec,
    Mode,
    assemble_fused_buffers,
)
from cgxsim.simnet import ProtocolError, SimNetConfig, StepTrace


class OrderingError(RuntimeError):
    pass


@dataclass
class EngineConfig:
    nodes: int = 8
    topology: Topology = Topology.SRA
    plan: CompressionPlan = field(default_factory=CompressionPlan.uniform)
    filters: FilterRules = field(default_factory=FilterRules)
    buffer_bytes: int = DEFAULT_BUFFER_BYTES
    cycle_time: float = 5e-3
    simnet: SimNetConfig | None = None
    adaptive: AdaptiveConfig | None = None
    seed: int = 0

    def __post_init__(self):
        self.topology = Topology(self.topology)
        if self.nodes < 1:
            raise ValueError("need at least one node")
        if self.buffer_bytes <= 0 or self.cycle_time <= 0:
            raise ValueError("buffer_bytes and cycle_time must be positive")
        if self.simnet is None:
            self.simnet = SimNetConfig.preset("commodity", self.nodes)
        if self.simnet.nodes != self.nodes:
            raise ValueError(f"simnet has {self.simnet.nodes} nodes, engine has {self.nodes}")

    @classmethod
    def from_json(cls, d: dict) -> EngineConfig:
        nodes = int(d.get("nodes", 8))
        simnet = d.get("simnet")
        if isinstance(simnet, str):
            simnet = SimNetConfig.preset(simnet, nodes)
        elif simnet is not None:
            simnet = SimNetConfig.from_json({"nodes": nodes, **simnet})
        return cls(
            nodes=nodes,
            topology=Topology(d.get("topology", "sra")),
            plan=CompressionPlan.from_json(d["plan"]) if "plan" in d else CompressionPlan.uniform(),
            filters=FilterRules.from_json(d["filters"]) if "filters" in d else FilterRules(),
            buffer_bytes=int(d.get("buffer_bytes", DEFAULT_BUFFER_BYTES)),
            cycle_time=float(d.get("cycle_time_s", 5e-3)),
            simnet=simnet,
            adaptive=AdaptiveConfig.from_json(d["adaptive"]) if "adaptive" in d else None,
            seed=int(d.get("seed", 0)),
        )

    def to_json(self) -> dict:
        out = {
            "nodes": self.nodes,
            "topology": self.topology.value,
            "plan": self.plan.to_json(),
            "filters": self.filters.to_json(),
            "buffer_bytes": self.buffer_bytes,
            "cycle_time_s": self.cycle_time,
            "simnet": self.simnet.to_json(),
            "seed": self.seed,
        }
        if self.adaptive is not None:
            out["adaptive"] = self.adaptive.to_json()
        return out


def group_by_cycle(ready_times: list[float], cycle_time: float) -> list[list[int]]:
    """Split submission indices into groups whose span stays within ``cycle_time``."""
    groups: list[list[int]] = []
    opened = None
    for i, t in enumerate(ready_times):
        if opened is None or t - opened > cycle_time:
            groups.append([])
            opened = t
        groups[-1].append(i)
    return groups


class CommEngine:
    """Gradient aggregation and reduction for ``config.nodes`` nodes.

    Nodes may be driven from one thread with :meth:`exchange`, or from one
    thread each with :meth:`submit` and :meth:`flush`; both give identical
    results.
    """

    def __init__(self, config: EngineConfig):
        self.config = config
        self.plan = config.plan
        self.step = 0
        self.events: list[dict] = []
        self.last_trace: StepTrace = StepTrace.zeros(config.nodes)
        self.total_trace: StepTrace = StepTrace.zeros(config.nodes)
        self.feedback: dict[tuple[int, str], codec.ErrorFeedbackState] = {}
        self._lock = threading.Lock()
        self._barrier = threading.Barrier(config.nodes, action=self._complete)
        self._sync = threading.Barrier(config.nodes)
        self._reset_step()

    def _reset_step(self) -> None:
        n = self.config.nodes
        self._pending: list[dict[str, tuple[GradientTensor, float]]] = [{} for _ in range(n)]
        self._flushed = [False] * n
        self._results: list | None = None
        self._error: Exception | None = None

    def log(self, event: str, payload=None) -> None:
        self.events.append({"step": self.step, "event": event, "payload": payload if payload is not None else {}})

    def write_events(self, path) -> None:
        with open(path, "w") as fh:
            for e in self.events:
                fh.write(json.dumps(e, sort_keys=True) + "\n")

    def set_plan(self, plan: CompressionPlan) -> None:
        """Swap the active plan; only allowed between steps."""
        with self._lock:
            if any(self._pending) or any(self._flushed):
                raise OrderingError("plan can only change at a step boundary")
            self.plan = plan
        self.log("plan_swap", plan.to_json())

    def submit(self, node: int, grad: GradientTensor, ready_time: float = 0.0) -> None:
        with self._lock:
            if not 0 <= node < self.config.nodes:
                raise ProtocolError(f"node {node} out of range")
            if self._flushed[node]:
                raise OrderingError(f"node {node} submitted {grad.name!r} after flushing step {self.step}")
            if grad.name in self._pending[node]:
                raise OrderingError(f"node {node} submitted {grad.name!r} twice in step {self.step}")
            bad = np.flatnonzero(~np.isfinite(grad.values))
            if bad.size:
                raise ValueError(f"non-finite gradient in {grad.name!r} at index {bad[0]}")
            self._pending[node][grad.name] = (grad, ready_time)

    def flush(self, node: int, timeout: float | None = None) -> list[GradientTensor]:
        """Mark ``node`` done for this step and block until every node is."""
        with self._lock:
            if self._flushed[node]:
                raise OrderingError(f"node {node} flushed twice in step {self.step}")
            self._flushed[node] = True
        self._barrier.wait(timeout)
        results, error = self._results, self._error
        self._sync.wait(timeout)
        if node == 0:
            with self._lock:
                self._reset_step()
        self._sync.wait(timeout)
        if error is not None:
            raise error
        return results[node]

    def exchange(self, grads_per_node: list[list[GradientTensor]], ready_times=None) -> list[list[GradientTensor]]:
        """Submit and flush every node from the calling thread.

        ``ready_times`` optionally gives one time per gradient position,
        shared by all nodes.
        """
        if len(grads_per_node) != self.config.nodes:
            raise ProtocolError(f"expected gradients for {self.config.nodes} nodes, got {len(grads_per_node)}")
        for node, grads in enumerate(grads_per_node):
            times = ready_times if ready_times is not None else [0.0] * len(grads)
            for g, t in zip(grads, times, strict=True):
                self.submit(node, g, t)
        with self._lock:
            self._flushed = [True] * self.config.nodes
        self._complete()
        if self._error is not None:
            error = self._error
            self._reset_step()
            raise error
        results = self._results
        self._reset_step()
        return results

    def _complete(self) -> None:
        try:
            self._results = self._reduce([list(p.values()) for p in self._pending])
        except Exception as exc:  # surfaced to every flushing node
            self._results, self._error = None, exc

    def _layout_check(self, submitted) -> list[LayerSpec]:
        layers = [g.layer for g, _ in submitted[0]]
        for node, items in enumerate(submitted[1:], start=1):
            other = [g.layer for g, _ in items]
            if other != layers:
                raise ProtocolError(f"node {node} submitted a different layer layout than node 0")
        return layers

    def _prepare(self, node: int, grad: GradientTensor) -> np.ndarray:
        values = np.asarray(grad.values, dtype=np.float32)
        p = self.plan.resolve(grad.name)
        if p.mode is not Mode.TOPK or self.config.filters.skips(grad.layer):
            return values
        k = p.k if p.k is not None else codec.density_to_k(values.size, p.density)
        state = self.feedback.setdefault((node, grad.name), codec.ErrorFeedbackState.zeros(values.size, np.float32))
        return codec.topk_decompress(codec.topk_compress(values, min(k, values.size), state))

    def _reduce(self, submitted) -> list[list[GradientTensor]]:
        cfg = self.config
        n = cfg.nodes
        layers = self._layout_check(submitted)
        flat = [{g.name: self._prepare(node, g) for g, _ in items} for node, items in enumerate(submitted)]
        out = [{l.name: np.empty(l.element_count, dtype=np.float32) for l in layers} for _ in range(n)]

        trace = StepTrace.zeros(n)
        groups = group_by_cycle([t for _, t in submitted[0]], cfg.cycle_time)
        buffer_index = 0
        for group in groups:
            for buf in assemble_fused_buffers([layers[i] for i in group], cfg.buffer_bytes):
                request = ReduceRequest(
                    [buf.gather(flat[node]) for node in range(n)],
                    layout_for_buffer(buf, self.plan, cfg.filters),
                    cfg.topology,
                    seed=codec.derive_seed(cfg.seed, self.step, buffer_index),
                )
                results, t = allreduce(request, cfg.simnet)
                for node in range(n):
                    buf.scatter(results[node], out[node])
                trace = trace.then(t)
                buffer_index += 1

        scale = np.float32(n)
        reduced = [[GradientTensor(l, out[node][l.name] / scale) for l in layers] for node in range(n)]
        self.last_trace = trace
        self.total_trace = self.total_trace.then(trace)
        self.log("step", {"buffers": buffer_index, "bytes": trace.total_bytes, "elapsed_s": trace.elapsed})
        self.step += 1
        return reduced
