"""Lossy gradient codecs.

Two codecs share the same encode/decode shape:

* bucketed stochastic uniform quantization (sign-magnitude levels, one fp32
  l2-norm per bucket, bit-packed payload);
* top-k magnitude sparsification with an error-feedback residual.

Wire layout of a quantized chunk (little-endian)::

    u32 element_count | u8 bits | u32 bucket_size | u64 seed
    f32 bucket_norms[ceil(element_count / bucket_size)]
    packed codes, (bits + 1) bits per element, LSB-first within each byte

Each code holds the level index in its low ``bits`` bits and the sign in the
top bit.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

HEADER = struct.Struct("<IBIQ")
SPARSE_HEADER = struct.Struct("<II")
_U64 = 0xFFFFFFFFFFFFFFFF

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_BUCKET_MULT = np.uint64(0xD1B54A32D192ED03)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


class CorruptChunkError(ValueError):
    """Raised when a serialized chunk is truncated or malformed."""


def _mix64(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; uint64 arrays wrap silently
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *keys: int) -> int:
    """Derive an independent 64-bit seed from ``seed`` and integer keys."""
    h = np.array([seed & _U64], dtype=np.uint64)
    for key in keys:
        h = _mix64(h + np.array([key & _U64], dtype=np.uint64) * _GOLDEN + _GOLDEN)
    return int(h[0])


def counter_uniforms(seed: int, bucket_size: int, count: int) -> np.ndarray:
    """Uniform [0, 1) draws keyed by (seed, bucket index, element index).

    Draw ``i`` depends only on the key, never on how many draws precede it,
    so buckets can be processed in any order.
    """
    n_buckets = -(-count // bucket_size)
    bucket = np.arange(1, n_buckets + 1, dtype=np.uint64)[:, None]
    elem = np.arange(1, bucket_size + 1, dtype=np.uint64)[None, :]
    h = _mix64(np.uint64(seed & _U64) + bucket * _BUCKET_MULT)
    h = _mix64(h + elem * _GOLDEN).ravel()[:count]
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


@dataclass(frozen=True)
class QuantParams:
    bits: int = 4
    bucket_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.bits <= 8:
            raise ValueError(f"bits must be in [1, 8], got {self.bits}")
        if self.bucket_size < 1:
            raise ValueError(f"bucket_size must be >= 1, got {self.bucket_size}")
        if not 0 <= self.seed <= _U64:
            raise ValueError("seed must fit in 64 bits")

    @property
    def levels(self) -> int:
        """Number of grid intervals s between 0 and the bucket norm."""
        return (1 << self.bits) - 1


@dataclass
class CompressedChunk:
    packed_levels: bytes
    bucket_norms: np.ndarray
    element_count: int
    params: QuantParams

    def to_bytes(self) -> bytes:
        p = self.params
        header = HEADER.pack(self.element_count, p.bits, p.bucket_size, p.seed)
        norms = np.asarray(self.bucket_norms, dtype="<f4").tobytes()
        return header + norms + self.packed_levels

    @classmethod
    def from_bytes(cls, data: bytes) -> CompressedChunk:
        if len(data) < HEADER.size:
            raise CorruptChunkError(f"chunk header needs {HEADER.size} bytes, got {len(data)}")
        count, bits, bucket_size, seed = HEADER.unpack_from(data, 0)
        try:
            params = QuantParams(bits, bucket_size, seed)
        except ValueError as exc:
            raise CorruptChunkError(f"bad chunk header: {exc}") from None
        n_buckets = -(-count // bucket_size)
        packed_len = -(-count * (bits + 1) // 8)
        expected = HEADER.size + 4 * n_buckets + packed_len
        if len(data) != expected:
            raise CorruptChunkError(f"chunk of {count} elements needs {expected} bytes, got {len(data)}")
        norms = np.frombuffer(data, dtype="<f4", count=n_buckets, offset=HEADER.size)
        packed = bytes(data[HEADER.size + 4 * n_buckets :])
        return cls(packed, norms.astype(np.float32), count, params)


def compressed_size_bytes(element_count: int, params: QuantParams) -> int:
    """Payload bytes for ``element_count`` values: packed codes plus fp32 norms."""
    if element_count == 0:
        return 0
    packed = -(-element_count * (params.bits + 1) // 8)
    return packed + 4 * (-(-element_count // params.bucket_size))


def wire_size(element_count: int, params: QuantParams) -> int:
    """Serialized size of a chunk including its header."""
    return HEADER.size + compressed_size_bytes(element_count, params)


def compression_ratio(element_count: int, params: QuantParams) -> float:
    """fp32 size over quantized payload size."""
    return 4 * element_count / compressed_size_bytes(element_count, params)


def pack_levels(levels, signs, bits: int) -> bytes:
    """Pack level indices and sign bits into (bits + 1)-bit codes, LSB-first."""
    if not 1 <= bits <= 8:
        raise ValueError(f"bits must be in [1, 8], got {bits}")
    levels = np.asarray(levels, dtype=np.int64)
    signs = np.asarray(signs, dtype=np.int64)
    if levels.shape != signs.shape:
        raise ValueError("levels and signs must have the same length")
    if levels.size == 0:
        return b""
    if levels.min() < 0 or levels.max() >= (1 << bits):
        bad = int(np.flatnonzero((levels < 0) | (levels >= (1 << bits)))[0])
        raise ValueError(f"level {levels[bad]} at index {bad} does not fit in {bits} bits")
    if signs.min() < 0 or signs.max() > 1:
        raise ValueError("signs must be 0 or 1")
    return _pack_codes(levels | (signs << bits), bits + 1)


_SHIFTS = {w: (np.arange(8, dtype=np.uint64) * np.uint64(w)) for w in range(2, 10)}


def _pack_codes(codes: np.ndarray, width: int) -> bytes:
    n = codes.size
    needed = -(-n * width // 8)
    if width > 8:
        bitmat = (codes.astype(np.uint16)[:, None] >> np.arange(width, dtype=np.uint16)) & 1
        return np.packbits(bitmat.astype(np.uint8).ravel(), bitorder="little").tobytes()
    # eight codes of `width` bits fill exactly `width` bytes of one uint64
    groups = -(-n // 8)
    padded = np.zeros(groups * 8, dtype=np.uint64)
    padded[:n] = codes
    words = np.bitwise_or.reduce(padded.reshape(groups, 8) << _SHIFTS[width], axis=1)
    raw = words.astype("<u8").view(np.uint8).reshape(groups, 8)[:, :width]
    return raw.tobytes()[:needed]


def _unpack_codes(raw: np.ndarray, count: int, width: int) -> np.ndarray:
    if width > 8:
        bitmat = np.unpackbits(raw, count=count * width, bitorder="little").reshape(count, width)
        return bitmat.astype(np.int64) @ (1 << np.arange(width, dtype=np.int64))
    groups = -(-count // 8)
    buf = np.zeros((groups, 8), dtype=np.uint8)
    flat = np.zeros(groups * width, dtype=np.uint8)
    flat[: raw.size] = raw
    buf[:, :width] = flat.reshape(groups, width)
    words = buf.view("<u8")
    codes = (words >> _SHIFTS[width]) & np.uint64((1 << width) - 1)
    return codes.ravel()[:count].astype(np.int64)


def unpack_levels(data: bytes, count: int, bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`pack_levels`; returns ``(levels, signs)``."""
    if not 1 <= bits <= 8:
        raise ValueError(f"bits must be in [1, 8], got {bits}")
    width = bits + 1
    needed = -(-count * width // 8)
    if len(data) < needed:
        raise CorruptChunkError(f"{count} codes of {width} bits need {needed} bytes, got {len(data)}")
    if count == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    codes = _unpack_codes(np.frombuffer(data, dtype=np.uint8, count=needed), count, width)
    return codes & ((1 << bits) - 1), codes >> bits


def quantize(v, params: QuantParams) -> CompressedChunk:
    """Stochastically quantize ``v`` bucket by bucket.

    Each element with normalized magnitude ``a = |v_i| / ||bucket||`` in
    ``[l/s, (l+1)/s]`` is rounded up to ``l + 1`` with probability ``a*s - l``.
    """
    v = np.asarray(v, dtype=np.float64).ravel()
    bad = np.flatnonzero(~np.isfinite(v))
    if bad.size:
        raise ValueError(f"non-finite value {v[bad[0]]} at index {bad[0]}")
    n = v.size
    if n == 0:
        return CompressedChunk(b"", np.zeros(0, dtype=np.float32), 0, params)

    bs = params.bucket_size
    s = params.levels
    n_buckets = -(-n // bs)
    padded = np.zeros(n_buckets * bs)
    padded[:n] = v
    blocks = padded.reshape(n_buckets, bs)
    norms = np.sqrt(np.einsum("ij,ij->i", blocks, blocks))

    mag = np.abs(blocks)
    safe = np.where(norms > 0, norms, 1.0)[:, None]
    scaled = np.minimum(mag / safe, 1.0) * s
    lower = np.floor(scaled)
    u = counter_uniforms(params.seed, bs, n_buckets * bs).reshape(n_buckets, bs)
    levels = lower + (u < scaled - lower)
    levels = np.minimum(levels, s).astype(np.int64).ravel()[:n]
    signs = (v < 0).astype(np.int64)
    signs[levels == 0] = 0

    packed = pack_levels(levels, signs, params.bits)
    return CompressedChunk(packed, norms.astype(np.float32), n, params)


def dequantize(chunk: CompressedChunk) -> np.ndarray:
    n = chunk.element_count
    p = chunk.params
    n_buckets = -(-n // p.bucket_size)
    if len(chunk.bucket_norms) != n_buckets:
        raise CorruptChunkError(f"expected {n_buckets} bucket norms, got {len(chunk.bucket_norms)}")
    if n == 0:
        return np.zeros(0)
    levels, signs = unpack_levels(chunk.packed_levels, n, p.bits)
    norms = np.repeat(np.asarray(chunk.bucket_norms, dtype=np.float64), p.bucket_size)[:n]
    return norms * (levels / p.levels) * (1 - 2 * signs)


def encode(v, params: QuantParams) -> bytes:
    return quantize(v, params).to_bytes()


def decode(data: bytes) -> np.ndarray:
    return dequantize(CompressedChunk.from_bytes(data))


# --- top-k sparsification -------------------------------------------------


@dataclass
class SparseChunk:
    indices: np.ndarray
    values: np.ndarray
    original_length: int

    @property
    def k(self) -> int:
        return len(self.indices)

    def to_bytes(self) -> bytes:
        header = SPARSE_HEADER.pack(self.original_length, self.k)
        return (
            header
            + np.asarray(self.indices, dtype="<u4").tobytes()
            + np.asarray(self.values, dtype="<f4").tobytes()
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> SparseChunk:
        if len(data) < SPARSE_HEADER.size:
            raise CorruptChunkError("sparse chunk header truncated")
        length, k = SPARSE_HEADER.unpack_from(data, 0)
        if len(data) != SPARSE_HEADER.size + 8 * k:
            raise CorruptChunkError(f"sparse chunk with k={k} needs {SPARSE_HEADER.size + 8 * k} bytes")
        idx = np.frombuffer(data, dtype="<u4", count=k, offset=SPARSE_HEADER.size).astype(np.int64)
        vals = np.frombuffer(data, dtype="<f4", count=k, offset=SPARSE_HEADER.size + 4 * k)
        if k and (idx[-1] >= length or np.any(np.diff(idx) <= 0)):
            raise CorruptChunkError("sparse indices must be strictly increasing and in range")
        return cls(idx, vals.astype(np.float32), length)


def sparse_wire_size(k: int) -> int:
    return SPARSE_HEADER.size + 8 * k


@dataclass
class ErrorFeedbackState:
    """Residual carried between steps for one (node, layer) pair."""

    residual: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def zeros(cls, length: int, dtype=np.float64) -> ErrorFeedbackState:
        return cls(np.zeros(length, dtype=dtype))


def topk_compress(v, k: int, state: ErrorFeedbackState | None = None) -> SparseChunk:
    """Keep the ``k`` largest-magnitude entries of ``v + residual``.

    Ties go to the lower index. When ``state`` is given its residual becomes
    whatever was not transmitted, so transmitted + residual equals the input
    plus the previous residual exactly.
    """
    v = np.asarray(v)
    if not np.issubdtype(v.dtype, np.floating):
        v = v.astype(np.float64)
    v = v.ravel()
    if not 1 <= k <= v.size:
        raise ValueError(f"k must be in [1, {v.size}], got {k}")
    if state is not None:
        if state.residual.size == 0:
            state.residual = np.zeros_like(v)
        if state.residual.shape != v.shape:
            raise ValueError(f"residual length {state.residual.size} does not match input length {v.size}")
        acc = v + state.residual
    else:
        acc = v.copy()
    order = np.argsort(-np.abs(acc), kind="stable")[:k]
    idx = np.sort(order)
    chunk = SparseChunk(idx, acc[idx].copy(), v.size)
    if state is not None:
        acc[idx] = 0
        state.residual = acc
    return chunk


def topk_decompress(chunk: SparseChunk) -> np.ndarray:
    out = np.zeros(chunk.original_length, dtype=np.asarray(chunk.values).dtype)
    out[chunk.indices] = chunk.values
    return out


def density_to_k(length: int, density: float) -> int:
    """Number of kept entries for a density fraction, clamped to [1, length]."""
    return min(length, max(1, math.ceil(density * length)))
