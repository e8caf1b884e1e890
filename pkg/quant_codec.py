#!/usr/bin/env python3
"""
Variable-bound quantization of the bottleneck tensor

The clip range of the quantizer follows the spread of the tensor: symbols
are z scaled by b·σ, shifted by one half and rounded into [0, 2^b - 1].
σ travels with the frame as a 32-bit float ("side information"). The
literal receiver-side reading, where the decoder recomputes σ from the
symbols themselves, is kept as an opt-in mode.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from split_errors import CodecError
from tensor_ops import Tensor

SIDE_INFO = "side_info"
RECEIVER_RECOMPUTE = "receiver_recompute"
SIGMA_MODES = (SIDE_INFO, RECEIVER_RECOMPUTE)

DEGENERATE_SIGMA = 1e-12
MIN_BITS, MAX_BITS = 1, 8

# 384x384 input through the stride-4 encoder
FULL_SCALE_BOTTLENECK_SHAPE = (6, 96, 96)


@dataclass(frozen=True)
class QuantParams:
    bits: int
    sigma: Optional[float] = None
    sigma_mode: str = SIDE_INFO

    def __post_init__(self):
        check_bits(self.bits)
        if self.sigma is not None and not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise CodecError(f"sigma must be finite and non-negative, got {self.sigma}")
        if self.sigma_mode not in SIGMA_MODES:
            raise CodecError(f"unknown sigma mode {self.sigma_mode!r}, expected one of {SIGMA_MODES}")

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1


@dataclass
class SymbolTensor:
    shape: Tuple[int, ...]
    symbols: np.ndarray
    params: QuantParams

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        self.symbols = np.asarray(self.symbols).reshape(-1)
        if self.symbols.size != int(np.prod(self.shape)):
            raise CodecError(f"{self.symbols.size} symbols do not fill shape {self.shape}")

    @property
    def numel(self) -> int:
        return int(self.symbols.size)


def check_bits(bits: int):
    if not isinstance(bits, (int, np.integer)) or not MIN_BITS <= bits <= MAX_BITS:
        raise CodecError(f"bits per symbol must be an integer in [{MIN_BITS}, {MAX_BITS}], got {bits!r}")


def _values(z: Union[Tensor, np.ndarray, Sequence[float]]) -> np.ndarray:
    return z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)


def payload_size(numel: int, bits: int) -> int:
    """Packed payload bytes for `numel` symbols; independent of ensemble size"""
    check_bits(bits)
    return (int(numel) * bits + 7) // 8


def compute_sigma(z) -> float:
    """Population standard deviation over every element"""
    values = _values(z)
    if values.size == 0:
        raise CodecError("cannot compute sigma of an empty tensor")
    return float(values.std())


def wire_sigma(sigma: float) -> float:
    """σ as it survives the 32-bit header field"""
    return float(np.float32(sigma))


def quantize(z, bits: int, sigma: Optional[float] = None, sigma_mode: str = SIDE_INFO) -> SymbolTensor:
    """Map z to b-bit symbols.

    Args:
        z: bottleneck tensor (Tensor or array)
        bits: bits per symbol, 1..8
        sigma: override the spread; defaults to compute_sigma(z)

    Rounding is half away from zero. A (near) constant tensor gives all-zero
    symbols with sigma recorded as 0.
    """
    check_bits(bits)
    values = _values(z)
    shape = values.shape
    spread = wire_sigma(compute_sigma(values) if sigma is None else sigma)
    levels = (1 << bits) - 1

    if spread < DEGENERATE_SIGMA:
        return SymbolTensor(shape, np.zeros(values.size, dtype=np.uint8), QuantParams(bits, 0.0, sigma_mode))

    scaled = levels * (values.reshape(-1) / (bits * spread) + 0.5)
    clipped = np.clip(scaled, 0, levels)
    # clipped is non-negative, so floor(x + 0.5) is round-half-away-from-zero
    symbols = np.floor(clipped + 0.5).astype(np.uint8)
    return SymbolTensor(shape, symbols, QuantParams(bits, spread, sigma_mode))


def dequantize(zq: SymbolTensor) -> Tensor:
    """Symbols back to values: (q / (2^b - 1) - 0.5) · b · σ"""
    params = zq.params
    if params.sigma_mode == RECEIVER_RECOMPUTE:
        spread = compute_sigma(zq.symbols.astype(np.float64)) if zq.numel else 0.0
    else:
        if params.sigma is None:
            raise CodecError("sigma side information missing for side_info dequantization")
        spread = params.sigma

    levels = params.levels
    values = (zq.symbols.astype(np.float64) / levels - 0.5) * params.bits * spread
    return Tensor(values.reshape(zq.shape))


def quantize_roundtrip(z, bits: int, sigma_mode: str = SIDE_INFO) -> np.ndarray:
    """Q⁻¹(Q(z)) as a plain array, used by evaluation and straight-through training"""
    return dequantize(quantize(z, bits, sigma_mode=sigma_mode)).data


def pack_symbols(zq: SymbolTensor) -> bytes:
    """Channel-major symbols, MSB-first within each byte, zero-padded tail"""
    bits = zq.params.bits
    symbols = zq.symbols.astype(np.int64)
    if symbols.size and (symbols.min() < 0 or symbols.max() >= (1 << bits)):
        bad = int(symbols.max()) if symbols.max() >= (1 << bits) else int(symbols.min())
        raise CodecError(f"symbol {bad} does not fit in {bits} bits")

    shifts = np.arange(bits - 1, -1, -1)
    bit_matrix = ((symbols[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bit_matrix.reshape(-1)).tobytes()


def unpack_symbols(payload: bytes, shape: Sequence[int], bits: int,
                   sigma: Optional[float] = None, sigma_mode: str = SIDE_INFO) -> SymbolTensor:
    check_bits(bits)
    numel = int(np.prod(shape))
    expected = payload_size(numel, bits)
    if len(payload) != expected:
        raise CodecError(f"payload is {len(payload)} bytes, expected {expected} for {numel} symbols at {bits} bits")

    raw = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))[:numel * bits]
    weights = 1 << np.arange(bits - 1, -1, -1)
    symbols = (raw.reshape(numel, bits).astype(np.int64) @ weights).astype(np.uint8)
    return SymbolTensor(tuple(shape), symbols, QuantParams(bits, sigma, sigma_mode))
