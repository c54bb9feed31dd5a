"""Compressed gradient communication on a simulated cluster.

Bucketed stochastic quantization and top-k codecs, compression-aware
all-reduce schedules over an alpha-beta network simulator, a fused-buffer
communication engine and a layer-wise adaptive bit-width planner.
"""

from cgxsim.codec import QuantParams, decode, dequantize, encode, quantize
from cgxsim.collectives import Topology, allreduce, estimate_step_time, simulate_cost
from cgxsim.engine import CommEngine, EngineConfig
from cgxsim.model import CompressionPlan, FilterRules, GradientTensor, LayerSpec
from cgxsim.simnet import SimNetConfig, StepTrace

__version__ = "0.1.0"

__all__ = [
    "CommEngine",
    "CompressionPlan",
    "EngineConfig",
    "FilterRules",
    "GradientTensor",
    "LayerSpec",
    "QuantParams",
    "SimNetConfig",
    "StepTrace",
    "Topology",
    "allreduce",
    "decode",
    "dequantize",
    "encode",
    "estimate_step_time",
    "quantize",
    "simulate_cost",
]
