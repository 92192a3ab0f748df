"""Block-wise 4-bit quantisation (NF4 and a uniform baseline).

Weights are flattened row-major and cut into blocks of ``block_size`` values.
Each block is divided by its absmax and every normalised value is replaced by
the index of the nearest of 16 codebook levels.  Codes are packed two per byte,
low nibble first; scales are kept as FP32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from .errors import FormatError, QuantizationError, ShapeError
from .numerics import Tensor

DEFAULT_BLOCK_SIZE = 64
# Quantile offset of the outermost NF4 level; the midpoint between the
# 1 - 1/(2*15) and 1 - 1/(2*16) quantiles keeps the extreme level finite.
NF4_OFFSET = 0.9677083


@dataclass(frozen=True)
class Nf4Codebook:
    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.shape != (16,) or v[0] != -1.0 or v[-1] != 1.0 or np.count_nonzero(v == 0.0) != 1:
            raise ValueError("NF4 codebook must hold 16 levels from -1 to 1 with a single exact zero")
        if not np.all(np.diff(v) > 0):
            raise ValueError("NF4 codebook levels must be strictly increasing")


def build_nf4_codebook() -> Nf4Codebook:
    """16 normalised standard-normal quantiles: 7 negative, one zero, 8 positive.

    The negative half is 8 evenly spaced quantiles from ``1 - offset`` up to the
    median, the positive half 9 from the median up to ``offset``; the two
    medians coincide at zero and one is dropped.  Each half is divided by its
    extreme quantile so the endpoints land on -1 and +1.
    """
    nd = NormalDist()
    pos = [nd.inv_cdf(p) for p in np.linspace(NF4_OFFSET, 0.5, 9)[:-1]]
    neg = [-nd.inv_cdf(p) for p in np.linspace(NF4_OFFSET, 0.5, 8)[:-1]]
    pos = np.array(pos) / max(pos)
    neg = np.array(neg) / -min(neg)
    values = np.sort(np.concatenate([neg, [0.0], pos])).astype(np.float32)
    return Nf4Codebook(values)


def uniform4_levels() -> np.ndarray:
    return (-1.0 + 2.0 * np.arange(16) / 15.0).astype(np.float32)


_NF4 = build_nf4_codebook().values
_LEVELS = {"nf4": _NF4, "uniform4": uniform4_levels()}


def codebook_levels(codebook_id: str) -> np.ndarray:
    try:
        return _LEVELS[codebook_id]
    except KeyError:
        raise FormatError(f"unknown codebook {codebook_id!r}") from None


def pack_nibbles(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes).reshape(-1)
    if codes.size and (codes.min() < 0 or codes.max() > 15):
        bad = int(np.flatnonzero((codes < 0) | (codes > 15))[0])
        raise FormatError(f"code {int(codes[bad])} at index {bad} does not fit in 4 bits")
    codes = codes.astype(np.uint8)
    if codes.size % 2:
        codes = np.append(codes, np.uint8(0))
    return (codes[0::2] | (codes[1::2] << 4)).astype(np.uint8)


def unpack_nibbles(packed: np.ndarray, n: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    out = np.empty(packed.size * 2, dtype=np.uint8)
    out[0::2] = packed & 0x0F
    out[1::2] = packed >> 4
    return out[:n]


@dataclass
class QuantizedTensor:
    shape: tuple[int, ...]
    block_size: int
    codes: np.ndarray  # packed uint8, ceil(numel / 2) bytes
    scales: np.ndarray  # float32, one per block
    codebook_id: str = "nf4"

    @classmethod
    def from_codes(cls, shape, block_size: int, codes, scales, codebook_id: str = "nf4") -> QuantizedTensor:
        return cls(tuple(shape), int(block_size), pack_nibbles(codes), np.asarray(scales, dtype=np.float32), codebook_id)

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def n_blocks(self) -> int:
        return math.ceil(self.numel / self.block_size)

    def unpacked_codes(self) -> np.ndarray:
        return unpack_nibbles(self.codes, self.numel)

    def payload_nbytes(self) -> int:
        return int(self.codes.size + 4 * self.scales.size)

    def to_bytes(self) -> bytes:
        """Scales (little-endian FP32) followed by the packed codes."""
        return self.scales.astype("<f4").tobytes() + self.codes.tobytes()

    @classmethod
    def from_bytes(cls, payload: bytes, shape, block_size: int, codebook_id: str) -> QuantizedTensor:
        shape = tuple(int(s) for s in shape)
        numel = int(np.prod(shape, dtype=np.int64))
        nb = math.ceil(numel / block_size)
        expect = 4 * nb + math.ceil(numel / 2)
        if len(payload) != expect:
            raise FormatError(f"quantised payload is {len(payload)} bytes, expected {expect}")
        scales = np.frombuffer(payload, dtype="<f4", count=nb).astype(np.float32)
        codes = np.frombuffer(payload, dtype=np.uint8, offset=4 * nb).copy()
        return cls(shape, int(block_size), codes, scales, codebook_id)

    def validate(self) -> None:
        codebook_levels(self.codebook_id)
        if self.block_size < 1:
            raise FormatError(f"block size must be positive, got {self.block_size}")
        if self.codes.dtype != np.uint8 or self.codes.size != math.ceil(self.numel / 2):
            raise FormatError(f"expected {math.ceil(self.numel / 2)} packed code bytes, got {self.codes.size}")
        if self.scales.shape != (self.n_blocks,):
            raise FormatError(f"expected {self.n_blocks} scales, got {self.scales.shape}")
        if not np.all(np.isfinite(self.scales)) or np.any(self.scales < 0):
            raise FormatError("scales must be finite and non-negative")
        if self.numel % 2 and self.codes[-1] >> 4:
            raise FormatError("padding nibble of the last code byte is not zero")


def _flat_values(w) -> tuple[np.ndarray, tuple[int, ...]]:
    arr = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float32)
    arr = np.asarray(arr, dtype=np.float32)
    return arr.reshape(-1), arr.shape


def _nearest_level(normalised: np.ndarray, levels: np.ndarray) -> np.ndarray:
    # Exact float64 midpoints; a value sitting on a midpoint goes to the lower level.
    lv = levels.astype(np.float64)
    mid = (lv[:-1] + lv[1:]) / 2
    return np.searchsorted(mid, normalised.astype(np.float64), side="left").astype(np.uint8)


def quantize_blockwise(w, block_size: int = DEFAULT_BLOCK_SIZE, codebook: str = "nf4") -> QuantizedTensor:
    levels = codebook_levels(codebook)
    if int(block_size) != block_size or block_size < 1:
        raise QuantizationError(f"block size must be a positive integer, got {block_size}")
    flat, shape = _flat_values(w)
    if not np.all(np.isfinite(flat)):
        bad = int(np.flatnonzero(~np.isfinite(flat))[0])
        raise QuantizationError(f"non-finite value {flat[bad]} at flat index {bad}")
    n = flat.size
    nb = math.ceil(n / block_size)
    padded = np.zeros(nb * block_size, dtype=np.float32)
    padded[:n] = flat
    blocks = padded.reshape(nb, block_size)
    scales = np.abs(blocks).max(axis=1)
    safe = np.where(scales > 0, scales, 1.0).astype(np.float32)
    normalised = blocks / safe[:, None]
    codes = _nearest_level(normalised, levels)
    zero_code = _nearest_level(np.zeros(1), levels)[0]
    codes[scales == 0] = zero_code
    return QuantizedTensor(tuple(shape), int(block_size), pack_nibbles(codes.reshape(-1)[:n]), scales, codebook)


def quantize_uniform4(w, block_size: int = DEFAULT_BLOCK_SIZE) -> QuantizedTensor:
    return quantize_blockwise(w, block_size, codebook="uniform4")


def dequantize_array(q: QuantizedTensor) -> np.ndarray:
    q.validate()
    levels = codebook_levels(q.codebook_id)
    codes = q.unpacked_codes()
    per_value_scale = np.repeat(q.scales, q.block_size)[: q.numel]
    return (levels[codes] * per_value_scale).astype(np.float32).reshape(q.shape)


def dequantize(q: QuantizedTensor) -> Tensor:
    """``codebook[code] * block_scale`` reshaped to the original tensor."""
    return Tensor(dequantize_array(q))


@dataclass(frozen=True)
class QuantReport:
    bits_per_weight: float
    compression_ratio_vs_fp32: float
    rmse: float
    max_abs_err: float

    def as_dict(self) -> dict:
        return {
            "bits_per_weight": self.bits_per_weight,
            "compression_ratio_vs_fp32": self.compression_ratio_vs_fp32,
            "rmse": self.rmse,
            "max_abs_err": self.max_abs_err,
        }


def bits_per_weight(block_size: int) -> float:
    """4-bit code plus an amortised FP32 scale (headers excluded)."""
    return 4.0 + 32.0 / block_size


def measure(q: QuantizedTensor, original) -> QuantReport:
    flat, shape = _flat_values(original)
    if tuple(shape) != tuple(q.shape):
        raise ShapeError(f"measure: quantised shape {q.shape} vs original {tuple(shape)}")
    err = dequantize_array(q).reshape(-1).astype(np.float64) - flat.astype(np.float64)
    bpw = bits_per_weight(q.block_size)
    return QuantReport(
        bits_per_weight=bpw,
        compression_ratio_vs_fp32=32.0 / bpw,
        rmse=float(np.sqrt(np.mean(err**2))) if err.size else 0.0,
        max_abs_err=float(np.max(np.abs(err))) if err.size else 0.0,
    )
