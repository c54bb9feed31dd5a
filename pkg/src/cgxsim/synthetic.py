"""Bundled synthetic layer distributions and gradient streams."""

from __future__ import annotations

import numpy as np

from cgxsim.model import LayerKind, LayerSpec


def transformer_like(vocab: int = 16384, d_model: int = 128, blocks: int = 6, ff_mult: int = 4) -> list[LayerSpec]:
    """A few huge embeddings, a stack of medium blocks and many tiny layers."""
    d, f = d_model, ff_mult * d_model
    layers = [LayerSpec("embed.weight", vocab * d, LayerKind.EMBEDDING)]
    for b in range(blocks):
        p = f"blocks.{b}"
        layers += [
            LayerSpec(f"{p}.ln1.weight", d, LayerKind.NORM),
            LayerSpec(f"{p}.ln1.bias", d, LayerKind.BIAS),
            LayerSpec(f"{p}.attn.qkv.weight", 3 * d * d),
            LayerSpec(f"{p}.attn.qkv.bias", 3 * d, LayerKind.BIAS),
            LayerSpec(f"{p}.attn.out.weight", d * d),
            LayerSpec(f"{p}.attn.out.bias", d, LayerKind.BIAS),
            LayerSpec(f"{p}.ln2.weight", d, LayerKind.NORM),
            LayerSpec(f"{p}.ln2.bias", d, LayerKind.BIAS),
            LayerSpec(f"{p}.ff1.weight", d * f),
            LayerSpec(f"{p}.ff1.bias", f, LayerKind.BIAS),
            LayerSpec(f"{p}.ff2.weight", f * d),
            LayerSpec(f"{p}.ff2.bias", d, LayerKind.BIAS),
        ]
    layers += [
        LayerSpec("final_ln.weight", d, LayerKind.NORM),
        LayerSpec("final_ln.bias", d, LayerKind.BIAS),
        LayerSpec("lm_head.weight", vocab * d, LayerKind.EMBEDDING),
    ]
    return layers


def resnet_like(stages: tuple = (64, 128, 256, 512), blocks_per_stage: int = 2, classes: int = 1000) -> list[LayerSpec]:
    """Convolution stacks whose width doubles per stage, with batch norms."""
    layers = [LayerSpec("stem.conv.weight", 3 * stages[0] * 49), LayerSpec("stem.bn.weight", stages[0], LayerKind.NORM)]
    c_in = stages[0]
    for s, c in enumerate(stages):
        for b in range(blocks_per_stage):
            p = f"layer{s + 1}.{b}"
            layers += [
                LayerSpec(f"{p}.conv1.weight", c_in * c * 9),
                LayerSpec(f"{p}.bn1.weight", c, LayerKind.NORM),
                LayerSpec(f"{p}.bn1.bias", c, LayerKind.BIAS),
                LayerSpec(f"{p}.conv2.weight", c * c * 9),
                LayerSpec(f"{p}.bn2.weight", c, LayerKind.NORM),
                LayerSpec(f"{p}.bn2.bias", c, LayerKind.BIAS),
            ]
            c_in = c
    layers += [LayerSpec("fc.weight", c_in * classes), LayerSpec("fc.bias", classes, LayerKind.BIAS)]
    return layers


# name -> (layer factory, compute-only step time in seconds)
BUNDLED_MODELS = {
    "transformer-like": (transformer_like, 0.004),
    "resnet-like": (resnet_like, 0.010),
}


def bundled_model(name: str) -> tuple[list[LayerSpec], float]:
    try:
        factory, compute = BUNDLED_MODELS[name]
    except KeyError:
        raise ValueError(f"unknown bundled model {name!r}; choose from {sorted(BUNDLED_MODELS)}") from None
    return factory(), compute


# per-element gradient scale by layer role
_SCALE = {
    "embedding": 2e-4,
    "qkv": 2e-3,
    "out": 6e-3,
    "ff1": 3e-3,
    "ff2": 4e-3,
    "weight": 3e-3,
    "norm": 1e-2,
    "bias": 1e-2,
    "other": 3e-3,
}


def _role(layer: LayerSpec) -> str:
    if layer.kind is not LayerKind.WEIGHT:
        return layer.kind.value
    for key in ("qkv", "out", "ff1", "ff2"):
        if f".{key}." in layer.name:
            return key
    return "weight"


class SyntheticGradients:
    """Gradient stream with a persistent per-layer mean plus fresh noise.

    Embedding-like layers only touch a small fraction of rows per step, so
    they are large but carry little gradient energy.
    """

    def __init__(self, layers: list[LayerSpec], seed: int = 0, noise: float = 1.0, row_width: int = 128,
                 active_rows: float = 0.05):
        self.layers = list(layers)
        self.seed = seed
        self.noise = noise
        self.row_width = row_width
        self.active_rows = active_rows
        rng = np.random.default_rng(seed)
        self._mean = {l.name: rng.normal(size=l.element_count) * _SCALE[_role(l)] for l in self.layers}

    def step(self, t: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng([self.seed, t])
        out = {}
        for layer in self.layers:
            scale = _SCALE[_role(layer)]
            g = self._mean[layer.name] + self.noise * scale * rng.normal(size=layer.element_count)
            if layer.kind is LayerKind.EMBEDDING:
                rows = -(-layer.element_count // self.row_width)
                mask = rng.random(rows) < self.active_rows
                g = g * np.repeat(mask, self.row_width)[: layer.element_count]
            out[layer.name] = g
        return out

    def window(self, start: int, steps: int):
        for t in range(start, start + steps):
            yield self.step(t)
