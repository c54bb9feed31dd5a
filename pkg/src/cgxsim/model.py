"""Layer and gradient data model: layer specs, filters, plans, fused buffers."""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ELEMENT_BYTES = 4
DEFAULT_BUFFER_BYTES = 64 * 1024 * 1024


class LayerKind(str, enum.Enum):
    WEIGHT = "weight"
    BIAS = "bias"
    NORM = "norm"
    EMBEDDING = "embedding"
    OTHER = "other"


@dataclass(frozen=True)
class LayerSpec:
    name: str
    element_count: int
    kind: LayerKind = LayerKind.WEIGHT

    def __post_init__(self):
        if self.element_count < 1:
            raise ValueError(f"layer {self.name!r} must have at least one element")
        object.__setattr__(self, "kind", LayerKind(self.kind))


@dataclass
class GradientTensor:
    layer: LayerSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values).ravel()
        if self.values.size != self.layer.element_count:
            raise ValueError(
                f"gradient for {self.layer.name!r} has {self.values.size} values, "
                f"layer declares {self.layer.element_count}"
            )

    @property
    def name(self) -> str:
        return self.layer.name


def check_unique(layers: list[LayerSpec]) -> None:
    seen = set()
    for layer in layers:
        if layer.name in seen:
            raise ValueError(f"duplicate layer name {layer.name!r}")
        seen.add(layer.name)


def load_model_spec(path) -> list[LayerSpec]:
    """Read a JSON array of ``{name, elements, kind}`` objects."""
    return model_from_json(json.loads(Path(path).read_text()))


def model_from_json(items) -> list[LayerSpec]:
    layers = [LayerSpec(d["name"], int(d["elements"]), LayerKind(d.get("kind", "weight"))) for d in items]
    check_unique(layers)
    return layers


def model_to_json(layers: list[LayerSpec]) -> list[dict]:
    return [{"name": l.name, "elements": l.element_count, "kind": l.kind.value} for l in layers]


# --- layer filters ----------------------------------------------------------


@dataclass(frozen=True)
class FilterRules:
    """Which layers bypass compression.

    A layer is left uncompressed when its kind is excluded, when it has fewer
    than ``min_elements`` elements, or when its name matches any pattern.
    """

    exclude_kinds: frozenset = frozenset({LayerKind.BIAS, LayerKind.NORM})
    min_elements: int = 4096
    name_patterns: tuple = ()
    _compiled: tuple = field(default=(), init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "exclude_kinds", frozenset(LayerKind(k) for k in self.exclude_kinds))
        compiled = []
        for pat in self.name_patterns:
            try:
                compiled.append(re.compile(pat))
            except re.error as exc:
                raise ValueError(f"bad layer filter pattern {pat!r}: {exc}") from None
        object.__setattr__(self, "_compiled", tuple(compiled))

    @classmethod
    def none(cls) -> FilterRules:
        return cls(exclude_kinds=frozenset(), min_elements=0)

    @classmethod
    def from_json(cls, d: dict) -> FilterRules:
        return cls(
            exclude_kinds=frozenset(d.get("exclude_kinds", ["bias", "norm"])),
            min_elements=int(d.get("min_elements", 4096)),
            name_patterns=tuple(d.get("name_patterns", ())),
        )

    def to_json(self) -> dict:
        return {
            "exclude_kinds": sorted(k.value for k in self.exclude_kinds),
            "min_elements": self.min_elements,
            "name_patterns": list(self.name_patterns),
        }

    def skips(self, layer: LayerSpec) -> bool:
        if layer.kind in self.exclude_kinds or layer.element_count < self.min_elements:
            return True
        return any(p.search(layer.name) for p in self._compiled)


def filter_layers(layers: list[LayerSpec], rules: FilterRules) -> tuple[list[LayerSpec], list[LayerSpec]]:
    """Split layers into (compressed, uncompressed), preserving order."""
    compressed, uncompressed = [], []
    for layer in layers:
        (uncompressed if rules.skips(layer) else compressed).append(layer)
    return compressed, uncompressed


# --- compression plans ------------------------------------------------------


class Mode(str, enum.Enum):
    QUANTIZE = "quantize"
    TOPK = "topk"
    UNCOMPRESSED = "uncompressed"


@dataclass(frozen=True)
class LayerPlan:
    mode: Mode = Mode.QUANTIZE
    bits: int = 4
    bucket_size: int = 128
    k: int | None = None
    density: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.mode is Mode.QUANTIZE:
            if not 1 <= self.bits <= 8:
                raise ValueError(f"bits must be in [1, 8], got {self.bits}")
            if self.bucket_size < 1:
                raise ValueError("bucket_size must be positive")
        if self.mode is Mode.TOPK:
            if self.k is None and self.density is None:
                raise ValueError("topk mode needs k or density")
            if self.k is not None and self.k < 1:
                raise ValueError("topk k must be positive")
            if self.density is not None and not 0 < self.density <= 1:
                raise ValueError("topk density must be in (0, 1]")

    @classmethod
    def from_json(cls, d: dict, defaults: LayerPlan | None = None) -> LayerPlan:
        base = defaults or cls()
        return cls(
            mode=Mode(d.get("mode", base.mode.value)),
            bits=int(d.get("bits", base.bits)),
            bucket_size=int(d.get("bucket", base.bucket_size)),
            k=d.get("k", base.k),
            density=d.get("density", base.density),
        )

    def to_json(self) -> dict:
        out = {"bits": self.bits, "bucket": self.bucket_size, "mode": self.mode.value}
        if self.k is not None:
            out["k"] = self.k
        if self.density is not None:
            out["density"] = self.density
        return out


UNCOMPRESSED = LayerPlan(Mode.UNCOMPRESSED)


@dataclass
class CompressionPlan:
    defaults: LayerPlan = field(default_factory=LayerPlan)
    layers: dict[str, LayerPlan] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def resolve(self, name: str) -> LayerPlan:
        return self.layers.get(name, self.defaults)

    @classmethod
    def uniform(cls, bits: int = 4, bucket_size: int = 128) -> CompressionPlan:
        return cls(LayerPlan(Mode.QUANTIZE, bits, bucket_size))

    @classmethod
    def lossless(cls) -> CompressionPlan:
        return cls(UNCOMPRESSED)

    @classmethod
    def from_json(cls, d: dict) -> CompressionPlan:
        raw = d.get("defaults", {})
        defaults = LayerPlan.from_json(raw) if raw else LayerPlan()
        layers = {name: LayerPlan.from_json(v, defaults) for name, v in d.get("layers", {}).items()}
        return cls(defaults, layers, dict(d.get("meta", {})))

    def to_json(self) -> dict:
        out = {
            "defaults": self.defaults.to_json(),
            "layers": {name: p.to_json() for name, p in sorted(self.layers.items())},
        }
        if self.meta:
            out["meta"] = self.meta
        return out

    def bits_for(self, layers: list[LayerSpec]) -> dict[str, int]:
        return {l.name: self.resolve(l.name).bits for l in layers}


def load_plan(path) -> CompressionPlan:
    return CompressionPlan.from_json(json.loads(Path(path).read_text()))


# --- fused buffers ----------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    """A contiguous piece of one layer placed inside a fused buffer."""

    layer: LayerSpec
    layer_offset: int
    buffer_offset: int
    length: int


@dataclass
class FusedBuffer:
    capacity: int = DEFAULT_BUFFER_BYTES
    segments: list[Segment] = field(default_factory=list)

    @property
    def length(self) -> int:
        return sum(s.length for s in self.segments)

    @property
    def total_bytes(self) -> int:
        return self.length * ELEMENT_BYTES

    @property
    def free_elements(self) -> int:
        return self.capacity // ELEMENT_BYTES - self.length

    def add(self, layer: LayerSpec, layer_offset: int, length: int) -> Segment:
        seg = Segment(layer, layer_offset, self.length, length)
        self.segments.append(seg)
        return seg

    def gather(self, grads: dict[str, np.ndarray], dtype=np.float32) -> np.ndarray:
        """Concatenate the member segments of ``grads`` into one flat vector."""
        out = np.empty(self.length, dtype=dtype)
        for s in self.segments:
            out[s.buffer_offset : s.buffer_offset + s.length] = grads[s.layer.name][
                s.layer_offset : s.layer_offset + s.length
            ]
        return out

    def scatter(self, flat: np.ndarray, out: dict[str, np.ndarray]) -> None:
        for s in self.segments:
            out[s.layer.name][s.layer_offset : s.layer_offset + s.length] = flat[
                s.buffer_offset : s.buffer_offset + s.length
            ]


def assemble_fused_buffers(layers: list[LayerSpec], capacity: int = DEFAULT_BUFFER_BYTES) -> list[FusedBuffer]:
    """Greedy first-fit packing of layers, in arrival order, into fused buffers.

    Layers larger than the capacity are split into full-capacity pieces; the
    remainder piece is packed like any other layer.
    """
    cap = capacity // ELEMENT_BYTES
    if cap < 1:
        raise ValueError(f"buffer capacity {capacity} bytes holds no elements")
    buffers: list[FusedBuffer] = []
    for layer in layers:
        offset = 0
        remaining = layer.element_count
        while remaining > cap:
            buf = FusedBuffer(capacity)
            buf.add(layer, offset, cap)
            buffers.append(buf)
            offset += cap
            remaining -= cap
        for buf in buffers:
            if buf.free_elements >= remaining:
                buf.add(layer, offset, remaining)
                break
        else:
            buf = FusedBuffer(capacity)
            buf.add(layer, offset, remaining)
            buffers.append(buf)
    return buffers
