"""Layer-wise adaptive bit-width planning.

Gradients are summed over a short window, per-layer statistics are taken
from that snapshot, and a planner assigns each layer a bit-width from a
palette. The bandwidth objective is ``sum(bits * size)``; the constraint is
that the total l2 quantization error on the snapshot stays within
``alpha * E4``, where ``E4`` is the error of quantizing every layer to 4 bits.

Two planners are available: a linear ranking by norm/size and a k-means
clustering of layers in (log size, log top-norm) space. Both repair a budget
violation by promoting every layer one palette step until the budget holds.
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cgxsim import codec
from cgxsim.model import CompressionPlan, GradientTensor, LayerPlan, Mode

log = logging.getLogger(__name__)

BUCKET_LADDER = (1024, 512, 256, 128, 128, 128)


@dataclass(frozen=True)
class AdaptiveConfig:
    palette: tuple = (2, 3, 4, 5, 6, 8)
    alpha: float = 1.0
    k: int | None = None
    stats_period: int = 1000
    stats_window: int = 50
    top_fraction: float = 0.01
    bucket_size: int = 128
    pair_buckets: bool = False
    seed: int = 0

    def __post_init__(self):
        palette = tuple(int(b) for b in self.palette)
        object.__setattr__(self, "palette", palette)
        if not palette:
            raise ValueError("palette must not be empty")
        if list(palette) != sorted(set(palette)) or palette[0] < 1 or palette[-1] > 8:
            raise ValueError(f"palette must be strictly ascending within [1, 8], got {palette}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.k is not None and not 1 <= self.k <= len(palette):
            raise ValueError(f"k must be in [1, {len(palette)}]")
        if self.stats_window < 1 or self.stats_period < self.stats_window:
            raise ValueError("need 1 <= stats_window <= stats_period")
        if not 0 < self.top_fraction <= 1:
            raise ValueError("top_fraction must be in (0, 1]")

    @property
    def clusters(self) -> int:
        return self.k or len(self.palette)

    def bucket_for(self, index: int) -> int:
        if not self.pair_buckets:
            return self.bucket_size
        return BUCKET_LADDER[min(index, len(BUCKET_LADDER) - 1)]

    @classmethod
    def from_json(cls, d: dict) -> AdaptiveConfig:
        fields = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        if "palette" in fields:
            fields["palette"] = tuple(fields["palette"])
        return cls(**fields)

    def to_json(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def top_fraction_norm(x: np.ndarray, fraction: float) -> float:
    """l2 norm of the largest ``ceil(fraction * len(x))`` magnitudes."""
    x = np.abs(np.asarray(x, dtype=np.float64).ravel())
    m = min(x.size, max(1, math.ceil(fraction * x.size)))
    top = np.partition(x, x.size - m)[x.size - m :]
    return float(np.sqrt(np.sum(top * top)))


@dataclass
class LayerStats:
    name: str
    snapshot: np.ndarray
    steps: int = 1
    top_fraction: float = 0.01
    norm: float = field(init=False)
    top_norm: float = field(init=False)

    def __post_init__(self):
        self.snapshot = np.asarray(self.snapshot, dtype=np.float64).ravel()
        if self.steps < 1:
            raise ValueError("stats window must cover at least one step")
        self.norm = float(np.linalg.norm(self.snapshot))
        self.top_norm = top_fraction_norm(self.snapshot, self.top_fraction)

    @property
    def size(self) -> int:
        return self.snapshot.size

    def digest(self) -> str:
        return f"{zlib.crc32(self.snapshot.tobytes()):08x}"


class StatsCollector:
    """Accumulates elementwise gradient sums per layer over a window."""

    def __init__(self, top_fraction: float = 0.01):
        self.top_fraction = top_fraction
        self.sums: dict[str, np.ndarray] = {}
        self.steps = 0

    def add(self, grads) -> None:
        grads = _as_mapping(grads)
        if self.steps and set(grads) != set(self.sums):
            missing = sorted(set(self.sums) ^ set(grads))
            raise ValueError(f"layer layout changed within the stats window: {missing}")
        for name, g in grads.items():
            g = np.asarray(g, dtype=np.float64).ravel()
            if name in self.sums:
                if g.size != self.sums[name].size:
                    raise ValueError(f"layer {name!r} changed size within the stats window")
                self.sums[name] = self.sums[name] + g
            else:
                self.sums[name] = g.copy()
        self.steps += 1

    def stats(self) -> dict[str, LayerStats]:
        if not self.steps:
            raise ValueError("no gradients collected")
        return {name: LayerStats(name, s, self.steps, self.top_fraction) for name, s in self.sums.items()}


def _as_mapping(grads) -> dict:
    if isinstance(grads, dict):
        return grads
    return {g.name: g.values for g in grads if isinstance(g, GradientTensor)}


def collect_stats(steps, config: AdaptiveConfig | None = None) -> dict[str, LayerStats]:
    """Sum a window of per-step gradients into per-layer statistics."""
    collector = StatsCollector((config or AdaptiveConfig()).top_fraction)
    for grads in steps:
        collector.add(grads)
    return collector.stats()


# --- error measurement ------------------------------------------------------


def _layer_seed(seed: int, name: str) -> int:
    return codec.derive_seed(seed, zlib.crc32(name.encode()))


class _ErrorTable:
    """Memoized squared quantization error per (layer, bits, bucket)."""

    def __init__(self, stats: dict[str, LayerStats], seed: int):
        self.stats = stats
        self.seed = seed
        self._cache: dict[tuple, float] = {}

    def sq_error(self, name: str, bits: int, bucket: int) -> float:
        key = (name, bits, bucket)
        if key not in self._cache:
            x = self.stats[name].snapshot
            params = codec.QuantParams(bits, bucket, _layer_seed(self.seed, name))
            diff = codec.dequantize(codec.quantize(x, params)) - x
            self._cache[key] = float(np.dot(diff, diff))
        return self._cache[key]

    def total(self, plan: CompressionPlan) -> float:
        total = 0.0
        for name in sorted(self.stats):
            p = plan.resolve(name)
            if p.mode is Mode.QUANTIZE:
                total += self.sq_error(name, p.bits, p.bucket_size)
        return math.sqrt(total)


def plan_error(stats: dict[str, LayerStats], plan: CompressionPlan, seed: int = 0) -> float:
    """Total l2 quantization error of ``plan`` on the stats snapshots."""
    return _ErrorTable(stats, seed).total(plan)


def baseline_error_E4(stats: dict[str, LayerStats], bucket: int = 128, seed: int = 0) -> float:
    return plan_error(stats, CompressionPlan.uniform(4, bucket), seed)


def weighted_size(stats: dict[str, LayerStats], plan: CompressionPlan) -> int:
    """Bandwidth objective: sum of bits times layer size (32 when uncompressed)."""
    total = 0
    for name, s in stats.items():
        p = plan.resolve(name)
        total += (p.bits if p.mode is Mode.QUANTIZE else 32) * s.size
    return total


def size_reduction(stats: dict[str, LayerStats], plan: CompressionPlan) -> float:
    """Uniform-4-bit objective over this plan's objective."""
    return weighted_size(stats, CompressionPlan.uniform(4)) / weighted_size(stats, plan)


# --- planners ---------------------------------------------------------------


def _spread(rank: int, count: int, palette_len: int) -> int:
    """Map rank in [0, count) linearly onto palette positions."""
    if count == 1:
        return (palette_len - 1) // 2
    return int(math.floor(rank * (palette_len - 1) / (count - 1) + 0.5))


def _build_plan(indices: dict[str, int], config: AdaptiveConfig) -> CompressionPlan:
    layers = {
        name: LayerPlan(Mode.QUANTIZE, config.palette[i], config.bucket_for(i)) for name, i in sorted(indices.items())
    }
    return CompressionPlan(LayerPlan(Mode.QUANTIZE, 4, config.bucket_size), layers)


def _enforce_budget(stats, indices: dict[str, int], config: AdaptiveConfig, algorithm: str) -> CompressionPlan:
    table = _ErrorTable(stats, config.seed)
    e4 = table.total(CompressionPlan.uniform(4, config.bucket_size))
    budget = config.alpha * e4
    top = len(config.palette) - 1
    promotions = 0
    plan = _build_plan(indices, config)
    error = table.total(plan)
    while error > budget and any(i < top for i in indices.values()):
        indices = {n: min(i + 1, top) for n, i in indices.items()}
        promotions += 1
        plan = _build_plan(indices, config)
        error = table.total(plan)
    satisfied = error <= budget
    if not satisfied:
        log.warning("plan error %.6g exceeds budget %.6g with every layer at %d bits", error, budget, config.palette[-1])
    plan.meta = {
        "algorithm": algorithm,
        "error": error,
        "e4": e4,
        "budget": budget,
        "budget_satisfied": satisfied,
        "promotions": promotions,
    }
    return plan


def linear_indices(stats: dict[str, LayerStats], config: AdaptiveConfig) -> dict[str, int]:
    """Palette position per layer from its rank by norm/size (ties share a rank)."""
    if not stats:
        raise ValueError("no layer statistics")
    ratio = {n: s.norm / s.size for n, s in stats.items()}
    order = sorted(stats, key=lambda n: (ratio[n], n))
    out, rank = {}, 0
    for pos, name in enumerate(order):
        if pos and ratio[name] != ratio[order[pos - 1]]:
            rank = pos
        out[name] = _spread(rank, len(order), len(config.palette))
    return out


def plan_linear(stats: dict[str, LayerStats], config: AdaptiveConfig | None = None) -> CompressionPlan:
    config = config or AdaptiveConfig()
    return _enforce_budget(stats, linear_indices(stats, config), config, "linear")


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6):
    """Lloyd's k-means with k-means++ seeding; returns (centroids, labels).

    ``k`` is capped at the number of distinct points. Empty clusters keep their
    previous centroid. Stops when every centroid moves less than
    ``tol * (1 + |centroid|)``.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    k = min(k, n, len(np.unique(points, axis=0)))
    rng = np.random.default_rng(seed)
    centers = [points[rng.integers(n)]]
    while len(centers) < k:
        d2 = np.min(((points[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        centers.append(points[rng.choice(n, p=d2 / d2.sum())])
    centroids = np.array(centers)
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dist = ((points[:, None, :] - centroids[None]) ** 2).sum(-1)
        labels = np.argmin(dist, axis=1)
        new = centroids.copy()
        for c in range(k):
            members = points[labels == c]
            if len(members):
                new[c] = members.mean(axis=0)
        shift = np.linalg.norm(new - centroids, axis=1)
        centroids = new
        if np.all(shift <= tol * (1 + np.linalg.norm(centroids, axis=1))):
            break
    labels = np.argmin(((points[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
    return centroids, labels


def layer_features(stats: dict[str, LayerStats]) -> tuple[list[str], np.ndarray]:
    """z-normalized (log2 size, log2 top-norm) per layer, names sorted."""
    names = sorted(stats)
    raw = np.array(
        [[math.log2(stats[n].size), math.log2(max(stats[n].top_norm, 1e-300))] for n in names], dtype=np.float64
    )
    mu = raw.mean(axis=0)
    sd = raw.std(axis=0)
    sd[sd == 0] = 1.0
    return names, (raw - mu) / sd


def kmeans_indices(stats: dict[str, LayerStats], config: AdaptiveConfig) -> dict[str, int]:
    """Palette position per layer from clustering, before budget repair."""
    if not stats:
        raise ValueError("no layer statistics")
    names, feats = layer_features(stats)
    centroids, labels = kmeans(feats, config.clusters, config.seed)
    used = sorted(set(labels.tolist()))
    # normalized norm minus normalized size; on ties the larger group goes lower
    order = sorted(used, key=lambda c: (round(centroids[c, 1] - centroids[c, 0], 9), -centroids[c, 0], c))
    pos = {c: _spread(r, len(order), len(config.palette)) for r, c in enumerate(order)}
    return {name: pos[int(lab)] for name, lab in zip(names, labels)}


def plan_kmeans(stats: dict[str, LayerStats], config: AdaptiveConfig | None = None) -> CompressionPlan:
    config = config or AdaptiveConfig()
    indices = kmeans_indices(stats, config)
    plan = _enforce_budget(stats, indices, config, "kmeans")
    plan.meta["groups"] = len(set(indices.values()))
    return plan


PLANNERS = {"kmeans": plan_kmeans, "linear": plan_linear}


# --- stats file -------------------------------------------------------------


def save_stats(stats: dict[str, LayerStats], path, raw_path=None) -> None:
    """Write the stats JSON and, optionally, the raw snapshots as ``.npz``."""
    doc = {
        n: {"size": s.size, "norm": s.norm, "top_norm": s.top_norm, "steps": s.steps, "snapshot_digest": s.digest()}
        for n, s in sorted(stats.items())
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if raw_path is not None:
        np.savez(raw_path, **{n: s.snapshot for n, s in stats.items()})


def load_stats(path, raw_path, top_fraction: float = 0.01) -> dict[str, LayerStats]:
    doc = json.loads(Path(path).read_text())
    raw = np.load(raw_path)
    out = {}
    for name, meta in doc.items():
        s = LayerStats(name, raw[name], int(meta.get("steps", 1)), top_fraction)
        if s.digest() != meta["snapshot_digest"]:
            raise ValueError(f"snapshot for {name!r} does not match its digest")
        out[name] = s
    return out
