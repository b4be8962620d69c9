"""Float and int8 tensor containers plus the quantization arithmetic.

Activations use asymmetric per-tensor parameters, weights use symmetric
per-output-channel parameters.  ``quantize`` rounds half away from zero;
``requantize`` is integer-only and rounds half to even.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

QMIN = -128
QMAX = 127
INT32_MIN = -(2 ** 31)
INT32_MAX = 2 ** 31 - 1


class UncalibratedError(ValueError):
    """Raised when a quantization range collapses to a single zero point."""


@dataclass(frozen=True)
class TensorShape:
    channels: int
    height: int
    width: int

    def __post_init__(self):
        for name in ("channels", "height", "width"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"TensorShape.{name} must be a positive integer, got {v!r}")

    @property
    def size(self) -> int:
        return self.channels * self.height * self.width

    def as_tuple(self) -> Tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    def __str__(self):
        # Same order as the layer tables: HxWxC
        return f"{self.height}x{self.width}x{self.channels}"


@dataclass(frozen=True, eq=False)
class QuantParams:
    """Affine 8-bit quantization parameters.

    ``scale`` is a float for per-tensor parameters or a 1-d array for
    per-channel parameters along ``axis``.
    """

    scale: Union[float, np.ndarray]
    zero_point: int = 0
    axis: Optional[int] = None
    bits: int = 8

    def __post_init__(self):
        if self.bits != 8:
            raise ValueError("only 8-bit quantization is supported")
        if not QMIN <= int(self.zero_point) <= QMAX:
            raise ValueError(f"zero_point {self.zero_point} outside [-128, 127]")
        s = np.asarray(self.scale, dtype=np.float64)
        if s.ndim > 1 or (s.ndim == 1 and self.axis is None):
            raise ValueError("per-channel scale needs a 1-d array and an axis")
        if not np.all(np.isfinite(s)) or np.any(s <= 0):
            raise ValueError("scale must be finite and positive")
        if s.ndim == 1:
            object.__setattr__(self, "scale", s.copy())
            self.scale.setflags(write=False)
        else:
            object.__setattr__(self, "scale", float(s))
        object.__setattr__(self, "zero_point", int(self.zero_point))

    @property
    def per_channel(self) -> bool:
        return self.axis is not None

    def __eq__(self, other):
        if not isinstance(other, QuantParams):
            return NotImplemented
        return (
            self.zero_point == other.zero_point
            and self.axis == other.axis
            and np.array_equal(np.asarray(self.scale), np.asarray(other.scale))
        )

    def __hash__(self):
        return hash((np.asarray(self.scale).tobytes(), self.zero_point, self.axis))

    def __repr__(self):
        if self.per_channel:
            return f"QuantParams(scale=<{len(self.scale)} channels>, zero_point={self.zero_point}, axis={self.axis})"
        return f"QuantParams(scale={self.scale!r}, zero_point={self.zero_point})"


def _shape_of(shape) -> TensorShape:
    if isinstance(shape, TensorShape):
        return shape
    return TensorShape(*shape)


@dataclass(frozen=True, eq=False)
class FloatTensor:
    shape: TensorShape
    data: np.ndarray

    def __post_init__(self):
        shape = _shape_of(self.shape)
        data = np.asarray(self.data, dtype=np.float64).reshape(shape.as_tuple())
        if not np.all(np.isfinite(data)):
            raise ValueError("FloatTensor data must be finite")
        data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, array) -> "FloatTensor":
        a = np.asarray(array, dtype=np.float64)
        if a.ndim != 3:
            raise ValueError(f"expected a CHW array, got {a.ndim} dimensions")
        return cls(TensorShape(*a.shape), a)


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    shape: TensorShape
    data: np.ndarray
    qparams: QuantParams

    def __post_init__(self):
        shape = _shape_of(self.shape)
        raw = np.asarray(self.data)
        if raw.size and (raw.min() < QMIN or raw.max() > QMAX):
            raise ValueError("QuantizedTensor elements must lie in [-128, 127]")
        data = raw.astype(np.int8).reshape(shape.as_tuple()).copy()
        data.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, array, qparams: QuantParams) -> "QuantizedTensor":
        a = np.asarray(array)
        return cls(TensorShape(*a.shape), a, qparams)


def compute_qparams(min_val: float, max_val: float, mode: str = "asymmetric") -> QuantParams:
    """Derive 8-bit parameters covering ``[min_val, max_val]``.

    The range is widened to include zero so that real 0 (padding, ReLU floor)
    is exactly representable.
    """
    min_val = float(min_val)
    max_val = float(max_val)
    if min_val > max_val:
        raise ValueError(f"min {min_val} > max {max_val}")
    if min_val == 0.0 and max_val == 0.0:
        raise UncalibratedError("degenerate range [0, 0]: tensor was never calibrated")
    if mode == "symmetric":
        return QuantParams(max(abs(min_val), abs(max_val)) / 127.0, 0)
    if mode != "asymmetric":
        raise ValueError(f"unknown quantization mode {mode!r}")
    lo = min(min_val, 0.0)
    hi = max(max_val, 0.0)
    scale = (hi - lo) / 255.0
    zp = round_half_away(QMIN - lo / scale)
    return QuantParams(scale, int(np.clip(zp, QMIN, QMAX)))


def round_half_away(x):
    """Round to nearest, ties away from zero (scalar or array)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return out if out.ndim else float(out)


def _broadcast_params(qp: QuantParams, ndim: int):
    if not qp.per_channel:
        return qp.scale
    shape = [1] * ndim
    shape[qp.axis] = -1
    return np.asarray(qp.scale).reshape(shape)


def quantize_array(x, qp: QuantParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    scale = _broadcast_params(qp, x.ndim)
    q = round_half_away(x / scale) + qp.zero_point
    return np.clip(q, QMIN, QMAX).astype(np.int8)


def dequantize_array(q, qp: QuantParams) -> np.ndarray:
    q = np.asarray(q, dtype=np.int64)
    scale = _broadcast_params(qp, q.ndim)
    return scale * (q - qp.zero_point).astype(np.float64)


def quantize(t: FloatTensor, qp: QuantParams) -> QuantizedTensor:
    return QuantizedTensor(t.shape, quantize_array(t.data, qp), qp)


def dequantize(q: QuantizedTensor) -> FloatTensor:
    return FloatTensor(q.shape, dequantize_array(q.data, q.qparams))


def quantize_weights(w, axis: int = 0) -> Tuple[np.ndarray, QuantParams]:
    """Symmetric per-channel int8 weights.

    All-zero channels get scale 1.0; they carry no information and would
    otherwise be rejected as uncalibrated.  Scales are rounded to float32 so
    archives store them exactly in four bytes.
    """
    w = np.asarray(w, dtype=np.float64)
    reduce_axes = tuple(i for i in range(w.ndim) if i != axis)
    absmax = np.max(np.abs(w), axis=reduce_axes) if w.size else np.zeros(w.shape[axis])
    scale = np.where(absmax > 0, absmax / 127.0, 1.0).astype(np.float32).astype(np.float64)
    qp = QuantParams(scale, 0, axis=axis)
    return quantize_array(w, qp), qp


def quantize_bias(b, input_scale: float, weight_scale) -> np.ndarray:
    """Bias as int32 at the accumulator scale ``input_scale * weight_scale``."""
    acc_scale = input_scale * np.asarray(weight_scale, dtype=np.float64)
    q = round_half_away(np.asarray(b, dtype=np.float64) / acc_scale)
    return np.clip(q, INT32_MIN, INT32_MAX).astype(np.int32)


# -- integer-only rescaling ----------------------------------------------------

def quantize_multiplier(real_multiplier) -> Tuple[np.ndarray, np.ndarray]:
    """Encode positive reals as (int32 multiplier in [2^30, 2^31), right shift).

    ``real ~= multiplier * 2**-shift``.  Works elementwise on arrays.
    """
    m = np.asarray(real_multiplier, dtype=np.float64)
    if np.any(m <= 0) or not np.all(np.isfinite(m)):
        raise ValueError("requantization multiplier must be finite and positive")
    mant, exp = np.frexp(m)
    mult = np.round(mant * (1 << 31)).astype(np.int64)
    # mantissa rounded up to 2^31: renormalise
    carry = mult == (1 << 31)
    mult = np.where(carry, mult >> 1, mult)
    exp = np.where(carry, exp + 1, exp)
    shift = 31 - exp.astype(np.int64)
    if np.any(shift < 0):
        raise ValueError("requantization multiplier >= 2^31 is not representable")
    return mult, shift


def _rounding_shift(prod: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """Arithmetic right shift with round-half-to-even, int64 in and out."""
    prod = np.asarray(prod, dtype=np.int64)
    shift = np.broadcast_to(np.asarray(shift, dtype=np.int64), prod.shape)
    big = shift > 62
    s = np.where(big, 62, shift)
    s1 = np.maximum(s, 1)
    floor = prod >> s
    rem = prod - (floor << s)
    half = np.int64(1) << (s1 - 1)
    up = (rem > half) | ((rem == half) & ((floor & 1) == 1))
    out = floor + np.where((s > 0) & up, 1, 0)
    # |prod| < 2^62, so shifts beyond 62 round to zero
    return np.where(big, 0, out)


def requantize_array(acc, multiplier, shift, zero_point: int) -> np.ndarray:
    """Vectorised ``clamp(rne(acc * multiplier >> shift) + zero_point)`` to int8."""
    acc = np.asarray(acc, dtype=np.int64)
    prod = acc * np.asarray(multiplier, dtype=np.int64)
    out = _rounding_shift(prod, shift) + zero_point
    return np.clip(out, QMIN, QMAX).astype(np.int8)


def requantize(acc: int, combined_scale: float, out_qp: QuantParams) -> int:
    """Rescale one 32-bit accumulator to int8 with integer arithmetic only."""
    acc = int(acc)
    if not INT32_MIN <= acc <= INT32_MAX:
        raise OverflowError(f"accumulator {acc} exceeds int32")
    mult, shift = quantize_multiplier(combined_scale)
    return int(requantize_array(acc, mult, shift, out_qp.zero_point))


def check_accumulator(acc: np.ndarray) -> None:
    """Debug-build guard: accumulators must fit the target's int32 datapath."""
    if __debug__ and acc.size and (acc.min() < INT32_MIN or acc.max() > INT32_MAX):
        raise OverflowError("int32 accumulator overflow")
