"""Deterministic N-node point-to-point transport with an alpha-beta clock.

Timing model: every node is a sequential process with its own virtual clock.
A send does not block the sender, but the bytes leave through the sender's
single egress port one message at a time::

    start   = max(sender clock, sender egress free)
    arrival = start + beta * size + alpha

A receive advances the receiver's clock to ``max(clock, arrival)``. Directed
links keep FIFO order. Because timing depends only on each node's own
operation order and the per-link FIFO contents, every interleaving of the node
programs produces the same trace.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Generator, Iterable


class SimNetError(RuntimeError):
    pass


class DeadlockError(SimNetError):
    pass


class ProtocolError(SimNetError):
    pass


@dataclass(frozen=True)
class LinkCost:
    alpha: float
    beta: float


@dataclass
class SimNetConfig:
    nodes: int
    alpha: float = 10e-6
    beta: float = 1 / 15e9
    links: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.nodes < 1:
            raise ValueError("need at least one node")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        for (i, j), cost in self.links.items():
            if not (0 <= i < self.nodes and 0 <= j < self.nodes) or i == j:
                raise ValueError(f"bad link override ({i}, {j})")
            if cost.alpha < 0 or cost.beta < 0:
                raise ValueError(f"negative cost on link ({i}, {j})")

    def link(self, src: int, dst: int) -> LinkCost:
        return self.links.get((src, dst)) or LinkCost(self.alpha, self.beta)

    @property
    def uniform(self) -> bool:
        return all(c == LinkCost(self.alpha, self.beta) for c in self.links.values())

    def with_nodes(self, nodes: int) -> SimNetConfig:
        return SimNetConfig(nodes, self.alpha, self.beta, dict(self.links) if nodes == self.nodes else {})

    @classmethod
    def preset(cls, name: str, nodes: int = 8) -> SimNetConfig:
        try:
            alpha, beta = PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown simnet preset {name!r}; choose from {sorted(PRESETS)}") from None
        return cls(nodes, alpha, beta)

    @classmethod
    def from_json(cls, d: dict) -> SimNetConfig:
        unknown = set(d) - {"nodes", "alpha_s", "beta_s_per_byte", "links"}
        if unknown:
            raise ValueError(f"unknown simnet keys {sorted(unknown)}")
        links = {
            (int(l["i"]), int(l["j"])): LinkCost(float(l["alpha_s"]), float(l["beta_s_per_byte"]))
            for l in d.get("links", [])
        }
        return cls(int(d["nodes"]), float(d.get("alpha_s", 10e-6)), float(d.get("beta_s_per_byte", 1 / 15e9)), links)

    def to_json(self) -> dict:
        return {
            "nodes": self.nodes,
            "alpha_s": self.alpha,
            "beta_s_per_byte": self.beta,
            "links": [
                {"i": i, "j": j, "alpha_s": c.alpha, "beta_s_per_byte": c.beta}
                for (i, j), c in sorted(self.links.items())
            ],
        }


def load_simnet_config(path) -> SimNetConfig:
    return SimNetConfig.from_json(json.loads(Path(path).read_text()))


# (alpha seconds, beta seconds per byte)
PRESETS = {
    "commodity": (10e-6, 1 / 15e9),
    "overprovisioned": (10e-6, 1 / 100e9),
    "cloud": (10e-6, 1 / 5e9),
}


class Phantom:
    """Size-only payload for cost simulations that never touch data."""

    __slots__ = ("nbytes",)

    def __init__(self, nbytes: int):
        if nbytes < 0:
            raise ValueError("negative payload size")
        self.nbytes = int(nbytes)

    def __len__(self):
        return self.nbytes

    def __eq__(self, other):
        return isinstance(other, Phantom) and other.nbytes == self.nbytes

    def __repr__(self):
        return f"Phantom({self.nbytes})"


@dataclass
class StepTrace:
    bytes_sent: list[int]
    bytes_received: list[int]
    messages: int = 0
    rounds: int = 0
    elapsed: float = 0.0
    node_times: list[float] = field(default_factory=list)
    stages: int = 0
    codec_calls: int = 0
    results: list = field(default_factory=list, compare=False, repr=False)

    @classmethod
    def zeros(cls, nodes: int) -> StepTrace:
        return cls([0] * nodes, [0] * nodes, node_times=[0.0] * nodes)

    @property
    def total_bytes(self) -> int:
        return sum(self.bytes_sent)

    def then(self, other: StepTrace) -> StepTrace:
        """Sequential composition: ``other`` starts when this trace ends."""
        n = max(len(self.bytes_sent), len(other.bytes_sent))
        pad = lambda xs, fill: list(xs) + [fill] * (n - len(xs))
        return StepTrace(
            [a + b for a, b in zip(pad(self.bytes_sent, 0), pad(other.bytes_sent, 0))],
            [a + b for a, b in zip(pad(self.bytes_received, 0), pad(other.bytes_received, 0))],
            self.messages + other.messages,
            self.rounds + other.rounds,
            self.elapsed + other.elapsed,
            [self.elapsed + t for t in pad(other.node_times, 0.0)],
            max(self.stages, other.stages),
            self.codec_calls + other.codec_calls,
        )

    def summary(self) -> dict:
        return {
            "elapsed_s": self.elapsed,
            "rounds": self.rounds,
            "messages": self.messages,
            "bytes_sent": list(self.bytes_sent),
            "bytes_received": list(self.bytes_received),
            "max_stages": self.stages,
            "codec_calls": self.codec_calls,
        }


@dataclass(frozen=True)
class Send:
    dst: int
    payload: object


@dataclass(frozen=True)
class Recv:
    src: int
    expect: int | None = None


@dataclass
class _Message:
    payload: object
    arrival: float
    depth: int


NodeProgram = Callable[[int], Generator]


class SimNet:
    """Point-to-point transport between ``config.nodes`` simulated nodes."""

    def __init__(self, config: SimNetConfig):
        self.config = config
        self.reset()

    def reset(self) -> None:
        n = self.config.nodes
        self.clock = [0.0] * n
        self.egress_free = [0.0] * n
        self.depth = [0] * n
        self.bytes_sent = [0] * n
        self.bytes_received = [0] * n
        self.messages = 0
        self._links: dict[tuple[int, int], deque] = {}

    def _check(self, a: int, b: int) -> None:
        n = self.config.nodes
        if not (0 <= a < n and 0 <= b < n):
            raise ProtocolError(f"node ids ({a}, {b}) out of range for {n} nodes")
        if a == b:
            raise ProtocolError(f"node {a} cannot message itself")

    def send(self, src: int, dst: int, payload) -> float:
        """Queue ``payload`` on link src->dst; returns its virtual arrival time."""
        self._check(src, dst)
        cost = self.config.link(src, dst)
        size = len(payload)
        start = max(self.clock[src], self.egress_free[src])
        self.egress_free[src] = start + cost.beta * size
        arrival = self.egress_free[src] + cost.alpha
        self._links.setdefault((src, dst), deque()).append(_Message(payload, arrival, self.depth[src] + 1))
        self.bytes_sent[src] += size
        self.messages += 1
        return arrival

    def pending(self, src: int, dst: int) -> int:
        return len(self._links.get((src, dst), ()))

    def recv(self, at: int, src: int, expect: int | None = None):
        self._check(src, at)
        queue = self._links.get((src, at))
        if not queue:
            raise DeadlockError(f"node {at} waits on empty link {src}->{at}")
        msg = queue.popleft()
        if expect is not None and len(msg.payload) != expect:
            raise ProtocolError(f"node {at} expected {expect} bytes from node {src}, got {len(msg.payload)}")
        self.clock[at] = max(self.clock[at], msg.arrival)
        self.depth[at] = max(self.depth[at], msg.depth)
        self.bytes_received[at] += len(msg.payload)
        return msg.payload

    def trace(self) -> StepTrace:
        node_times = [max(c, e) for c, e in zip(self.clock, self.egress_free)]
        return StepTrace(
            list(self.bytes_sent),
            list(self.bytes_received),
            self.messages,
            max(self.depth),
            max(node_times),
            node_times,
        )

    def run_step(self, programs: list[NodeProgram] | NodeProgram, order: Iterable[int] | None = None) -> StepTrace:
        """Run one generator program per node to completion and return the trace.

        Programs yield :class:`Send` and :class:`Recv` operations; a ``Recv``
        evaluates to the received payload. Nodes are resumed round-robin in
        ``order`` (default ascending); the order never changes the trace.
        Return values of the programs land in ``trace.results``.
        """
        n = self.config.nodes
        self.reset()
        if callable(programs):
            programs = [programs] * n
        if len(programs) != n:
            raise ProtocolError(f"expected {n} node programs, got {len(programs)}")
        order = list(range(n)) if order is None else list(order)
        if sorted(order) != list(range(n)):
            raise ValueError("order must be a permutation of node ids")

        gens = [programs[i](i) for i in range(n)]
        results: list = [None] * n
        waiting: dict[int, Recv] = {}
        inbox: dict[int, object] = {}
        done = [False] * n

        def advance(i: int) -> bool:
            progressed = False
            gen = gens[i]
            while not done[i]:
                op = waiting.get(i)
                if op is not None:
                    if not self.pending(op.src, i):
                        return progressed
                    inbox[i] = self.recv(i, op.src, op.expect)
                    del waiting[i]
                try:
                    op = gen.send(inbox.pop(i, None))
                except StopIteration as stop:
                    results[i] = stop.value
                    done[i] = True
                    return True
                progressed = True
                if isinstance(op, Send):
                    self.send(i, op.dst, op.payload)
                elif isinstance(op, Recv):
                    self._check(op.src, i)
                    waiting[i] = op
                else:
                    raise ProtocolError(f"node {i} yielded {op!r}; expected Send or Recv")
            return progressed

        while not all(done):
            progressed = False
            for i in order:
                if not done[i]:
                    progressed |= advance(i)
            if not progressed:
                stuck = ", ".join(f"node {i} waits on {op.src}->{i}" for i, op in sorted(waiting.items()))
                raise DeadlockError(f"deadlock: {stuck}")

        leftover = [(s, d) for (s, d), q in sorted(self._links.items()) if q]
        if leftover:
            pairs = ", ".join(f"{s}->{d}" for s, d in leftover)
            raise ProtocolError(f"unmatched sends left on links {pairs}")
        trace = self.trace()
        trace.results = results
        return trace


def run_step(config: SimNetConfig, programs, order=None) -> StepTrace:
    return SimNet(config).run_step(programs, order)
