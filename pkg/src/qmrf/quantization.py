"""Symmetric integer quantization primitives.

All integer paths in this package are built on the same scheme:

  real value  ~=  (stored_int - zero_point) * scale

with signed two's-complement ranges, per-tensor scales and zero_point = 0
for weights and activations (symmetric quantization). Rounding is
round-half-away-from-zero everywhere, fixed globally so the emulated
hardware path and the software reference agree bit for bit.

Layer accumulators hold exact integer sums at scale in_scale * w_scale and
are brought back to the next layer's 8-bit grid by `requantize`, which
multiplies by a 32-bit fixed-point mantissa and right-shifts. The mantissa
arithmetic runs on Python integers, so results are exact and identical on
every platform regardless of word size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SUPPORTED_BITS = (8, 16, 32)

# Mantissa width of the fixed-point requantization multiplier.
MANTISSA_BITS = 32
MAX_SHIFT = 63


def qmin(bits: int) -> int:
    return -(1 << (bits - 1))


def qmax(bits: int) -> int:
    return (1 << (bits - 1)) - 1


def round_half_away(x: np.ndarray | float) -> np.ndarray | float:
    """Round to nearest integer, ties away from zero (np.round would
    round ties to even, which the hardware path does not use)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantParams:
    """Per-tensor quantization parameters: bit width, scale, zero point."""

    bits: int
    scale: float
    zero_point: int = 0

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ValueError(f"bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        if not math.isfinite(self.scale) or self.scale <= 0:
            raise ValueError(f"scale must be a positive finite real, got {self.scale}")
        if not (qmin(self.bits) <= self.zero_point <= qmax(self.bits)):
            raise ValueError(
                f"zero_point {self.zero_point} not representable in {self.bits} signed bits"
            )

    @property
    def qmin(self) -> int:
        return qmin(self.bits)

    @property
    def qmax(self) -> int:
        return qmax(self.bits)


@dataclass(frozen=True)
class QTensor:
    """Integer tensor plus the parameters that map it back to real units.

    `values` is kept as int64 regardless of the declared bit width; the
    declared width constrains the value range, not the storage type.
    """

    values: np.ndarray
    qparams: QuantParams

    def __post_init__(self):
        vals = np.asarray(self.values)
        if not np.issubdtype(vals.dtype, np.integer):
            raise ValueError(f"QTensor values must be integers, got dtype {vals.dtype}")
        vals = vals.astype(np.int64)
        lo, hi = self.qparams.qmin, self.qparams.qmax
        if vals.size and (vals.min() < lo or vals.max() > hi):
            raise ValueError(
                f"values outside the {self.qparams.bits}-bit range [{lo}, {hi}]"
            )
        object.__setattr__(self, "values", vals)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


def quantize(t: np.ndarray, p: QuantParams) -> QTensor:
    """Map a real tensor onto the integer grid of `p`.

    Each value becomes clamp(round(t / scale) + zero_point, qmin, qmax)
    with round-half-away-from-zero. Non-finite inputs are rejected.
    """
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise ValueError("cannot quantize non-finite values")
    q = round_half_away(t / p.scale) + p.zero_point
    q = np.clip(q, p.qmin, p.qmax).astype(np.int64)
    return QTensor(q, p)


def dequantize(q: QTensor) -> np.ndarray:
    """Return the real-valued view (v - zero_point) * scale as float64."""
    return (q.values - q.qparams.zero_point) * q.qparams.scale


def fake_quantize(t: np.ndarray, p: QuantParams) -> np.ndarray:
    """Quantize then dequantize: the training-time simulation of the
    integer datapath. The backward contract is the straight-through
    estimator (`ste_mask`): identity inside the clamp range, zero outside.
    """
    return dequantize(quantize(t, p))


def ste_mask(t: np.ndarray, p: QuantParams) -> np.ndarray:
    """Straight-through-estimator gradient mask: 1.0 where the quantizer
    acts as rounding only, 0.0 where the value would be clamped."""
    t = np.asarray(t, dtype=np.float64)
    q = round_half_away(t / p.scale) + p.zero_point
    return ((q >= p.qmin) & (q <= p.qmax)).astype(np.float64)


def symmetric_params(t: np.ndarray, bits: int) -> QuantParams:
    """Max-abs calibration: scale = max|t| / qmax, zero_point = 0.

    An all-zero tensor gets scale 1.0 so the parameters stay valid.
    """
    max_abs = float(np.max(np.abs(t))) if np.asarray(t).size else 0.0
    scale = max_abs / qmax(bits) if max_abs > 0 else 1.0
    return QuantParams(bits=bits, scale=scale)


@dataclass(frozen=True)
class FixedPointScale:
    """A positive real ratio encoded as mantissa * 2**-shift.

    mantissa is normalized to [2**31, 2**32) so every representable ratio
    carries the full 32 bits of precision; `apply` evaluates
    round(value * ratio) exactly on Python integers.
    """

    mantissa: int
    shift: int

    @classmethod
    def from_ratio(cls, ratio: float) -> "FixedPointScale":
        if not math.isfinite(ratio) or ratio <= 0:
            raise ValueError(f"ratio must be positive and finite, got {ratio}")
        m, e = math.frexp(ratio)  # ratio = m * 2**e, m in [0.5, 1)
        mantissa = int(round_half_away(m * (1 << MANTISSA_BITS)))
        if mantissa == 1 << MANTISSA_BITS:  # rounding carried into the next octave
            mantissa >>= 1
            e += 1
        shift = MANTISSA_BITS - e
        if shift < 0 or shift > MAX_SHIFT:
            raise ValueError(
                f"ratio {ratio} not representable as a {MANTISSA_BITS}-bit "
                f"mantissa with shift in [0, {MAX_SHIFT}]"
            )
        return cls(mantissa=mantissa, shift=shift)

    def apply(self, value: int) -> int:
        """round_half_away(value * mantissa * 2**-shift), exact."""
        p = int(value) * self.mantissa
        if self.shift == 0:
            return p
        half = 1 << (self.shift - 1)
        if p >= 0:
            return (p + half) >> self.shift
        return -((-p + half) >> self.shift)


def requantize(acc: int, in_scale: float, out_p: QuantParams) -> int:
    """Convert one wide accumulator value at `in_scale` to the integer grid
    of `out_p`: clamp(round(acc * in_scale / out_scale) + zero_point)."""
    fxp = FixedPointScale.from_ratio(in_scale / out_p.scale)
    v = fxp.apply(acc) + out_p.zero_point
    return min(max(v, out_p.qmin), out_p.qmax)


def requantize_array(acc: np.ndarray, in_scale: float, out_p: QuantParams) -> np.ndarray:
    """Elementwise `requantize` sharing one fixed-point ratio per call.

    The per-element arithmetic stays on Python integers: exact for any
    accumulator magnitude, identical across platforms.
    """
    fxp = FixedPointScale.from_ratio(in_scale / out_p.scale)
    lo, hi, zp = out_p.qmin, out_p.qmax, out_p.zero_point
    flat = np.asarray(acc).reshape(-1).tolist()
    out = [min(max(fxp.apply(v) + zp, lo), hi) for v in flat]
    return np.array(out, dtype=np.int64).reshape(np.asarray(acc).shape)


def quantize_bias(b: np.ndarray, in_scale: float, w_scale: float, bits: int = 32) -> QTensor:
    """Biases live at the accumulator scale in_scale * w_scale so they add
    directly onto the integer dot product."""
    return quantize(np.asarray(b, dtype=np.float64), QuantParams(bits=bits, scale=in_scale * w_scale))
