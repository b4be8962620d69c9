"""Layer kernels with a float reference path and an integer-only int8 path.

Every kernel dispatches on the tensor type it receives: ``FloatTensor`` runs in
float64, ``QuantizedTensor`` runs in integer arithmetic and must be given a
quantized spec (see :func:`quantize_conv` / :func:`quantize_se`).
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .qtensor import (
    FloatTensor,
    QuantizedTensor,
    QuantParams,
    TensorShape,
    _rounding_shift,
    check_accumulator,
    quantize_bias,
    quantize_multiplier,
    quantize_weights,
    requantize_array,
    round_half_away,
)

Tensor = Union[FloatTensor, QuantizedTensor]

LEAKY_SLOPE = 0.1
GATE_BITS = 8


class ShapeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ConvSpec:
    """One convolution, float or int8.

    ``weights`` has shape (out, in, k, k).  A spec is int8 when
    ``weight_qparams`` is set; then ``weights`` is int8, ``bias`` is int32 at
    the accumulator scale, and the input/output activation parameters are
    required.
    """

    kernel: int
    stride: int
    in_channels: int
    out_channels: int
    weights: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    activation: str = "leaky_relu"
    slope: float = LEAKY_SLOPE
    weight_qparams: Optional[QuantParams] = None
    input_qparams: Optional[QuantParams] = None
    output_qparams: Optional[QuantParams] = None

    def __post_init__(self):
        if self.kernel not in (1, 3):
            raise ValueError(f"kernel must be 1 or 3, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.activation not in ("linear", "leaky_relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights is not None:
            expected = (self.out_channels, self.in_channels, self.kernel, self.kernel)
            if tuple(self.weights.shape) != expected:
                raise ShapeError(f"weights shape {self.weights.shape} != {expected}")
        if self.bias is not None and len(self.bias) != self.out_channels:
            raise ShapeError(f"bias length {len(self.bias)} != {self.out_channels}")

    @property
    def padding(self) -> int:
        return self.kernel // 2

    @property
    def quantized(self) -> bool:
        return self.weight_qparams is not None

    def output_hw(self, h: int, w: int):
        return -(-h // self.stride), -(-w // self.stride)


@dataclass(frozen=True, eq=False)
class SESpec:
    """Squeeze-and-excitation block.

    fc1: (hidden, channels), fc2: (channels, hidden).  Quantized specs also
    carry the hidden/logit activation parameters and the sigmoid gate table.
    """

    channels: int
    reduction: int = 4
    fc1_weight: Optional[np.ndarray] = None
    fc1_bias: Optional[np.ndarray] = None
    fc2_weight: Optional[np.ndarray] = None
    fc2_bias: Optional[np.ndarray] = None
    fc1_qparams: Optional[QuantParams] = None
    fc2_qparams: Optional[QuantParams] = None
    input_qparams: Optional[QuantParams] = None
    hidden_qparams: Optional[QuantParams] = None
    logit_qparams: Optional[QuantParams] = None
    gate_table: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def hidden(self) -> int:
        return max(1, self.channels // self.reduction)

    @property
    def quantized(self) -> bool:
        return self.fc1_qparams is not None


def param_count(spec) -> int:
    if isinstance(spec, ConvSpec):
        k = spec.kernel
        return k * k * spec.in_channels * spec.out_channels + spec.out_channels
    if isinstance(spec, SESpec):
        c, h = spec.channels, spec.hidden
        return c * h + h + h * c + c
    raise TypeError(f"no parameters for {type(spec).__name__}")


# -- helpers ---------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int, stride: int, pad: int, out_h: int, out_w: int) -> np.ndarray:
    """(C, H, W) -> (C*k*k, out_h*out_w), zero padded on the values given."""
    c = x.shape[0]
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :out_h, :out_w]
    # win: (C, out_h, out_w, k, k) -> (C, k, k, out_h, out_w)
    return win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, out_h * out_w)


def _channel_chunks(n: int, n_jobs: Optional[int]) -> List[slice]:
    jobs = max(1, min(int(n_jobs or 1), n))
    bounds = np.linspace(0, n, jobs + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _run_chunks(fn, n: int, n_jobs: Optional[int]) -> np.ndarray:
    chunks = _channel_chunks(n, n_jobs)
    if len(chunks) == 1:
        return fn(chunks[0])
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        parts = list(pool.map(fn, chunks))
    return np.concatenate(parts, axis=0)


def _check_channels(t: Tensor, expected: int, what: str) -> None:
    if t.shape.channels != expected:
        raise ShapeError(f"{what}: input has {t.shape.channels} channels, expected {expected}")


def _require_qparams(t: QuantizedTensor, expected: Optional[QuantParams], what: str) -> None:
    if expected is None:
        raise ValueError(f"{what}: int8 input needs a quantized spec")
    if t.qparams != expected:
        raise ValueError(f"{what}: input qparams {t.qparams} do not match spec {expected}")


# -- convolution -------------------------------------------------------------------

def _conv_float(x: np.ndarray, spec: ConvSpec, n_jobs) -> np.ndarray:
    out_h, out_w = spec.output_hw(x.shape[1], x.shape[2])
    cols = _im2col(x, spec.kernel, spec.stride, spec.padding, out_h, out_w)
    w = np.asarray(spec.weights, dtype=np.float64).reshape(spec.out_channels, -1)
    b = np.zeros(spec.out_channels) if spec.bias is None else np.asarray(spec.bias, dtype=np.float64)

    def work(sl):
        y = w[sl] @ cols + b[sl, None]
        if spec.activation == "leaky_relu":
            y = np.where(y >= 0, y, spec.slope * y)
        return y

    return _run_chunks(work, spec.out_channels, n_jobs).reshape(spec.out_channels, out_h, out_w)


def conv_multipliers(spec: ConvSpec):
    """Per-channel (multiplier, shift) for non-negative and negative accumulators."""
    real = spec.input_qparams.scale * np.asarray(spec.weight_qparams.scale) / spec.output_qparams.scale
    pos = quantize_multiplier(real)
    if spec.activation == "leaky_relu":
        neg = quantize_multiplier(real * spec.slope)
    else:
        neg = pos
    return pos, neg


def conv_accumulate(x_centered: np.ndarray, spec: ConvSpec, sl=slice(None)) -> np.ndarray:
    out_h, out_w = spec.output_hw(x_centered.shape[1], x_centered.shape[2])
    cols = _im2col(x_centered, spec.kernel, spec.stride, spec.padding, out_h, out_w)
    w = np.asarray(spec.weights, dtype=np.float64).reshape(spec.out_channels, -1)[sl]
    # int8 x int8 partial sums stay far below 2**53, so the BLAS float product is exact
    acc = (w @ cols.astype(np.float64)).astype(np.int64) + np.asarray(spec.bias, dtype=np.int64)[sl, None]
    check_accumulator(acc)
    return acc


def _conv_int8(q: QuantizedTensor, spec: ConvSpec, n_jobs) -> np.ndarray:
    x = q.data.astype(np.int64) - q.qparams.zero_point
    out_h, out_w = spec.output_hw(q.shape.height, q.shape.width)
    (pm, ps), (nm, ns) = conv_multipliers(spec)
    zp = spec.output_qparams.zero_point

    def work(sl):
        acc = conv_accumulate(x, spec, sl)
        neg = acc < 0
        mult = np.where(neg, nm[sl, None], pm[sl, None])
        shift = np.where(neg, ns[sl, None], ps[sl, None])
        return requantize_array(acc, mult, shift, zp)

    return _run_chunks(work, spec.out_channels, n_jobs).reshape(spec.out_channels, out_h, out_w)


def conv2d(input: Tensor, spec: ConvSpec, n_jobs: Optional[int] = None) -> Tensor:
    """Same-padded 2-D convolution followed by the spec's activation.

    ``n_jobs`` splits output channels across threads; results are identical
    for any worker count.
    """
    _check_channels(input, spec.in_channels, "conv2d")
    if spec.weights is None:
        raise ValueError("conv2d: spec has no weights bound")
    if isinstance(input, QuantizedTensor):
        _require_qparams(input, spec.input_qparams if spec.quantized else None, "conv2d")
        data = _conv_int8(input, spec, n_jobs)
        return QuantizedTensor(TensorShape(*data.shape), data, spec.output_qparams)
    if spec.quantized:
        raise ValueError("conv2d: float input given to an int8 spec")
    return FloatTensor.from_array(_conv_float(input.data, spec, n_jobs))


def quantize_conv(spec: ConvSpec, input_qp: QuantParams, output_qp: QuantParams) -> ConvSpec:
    """Int8 twin of a float spec: per-channel symmetric weights, int32 bias."""
    wq, wqp = quantize_weights(spec.weights, axis=0)
    bias = np.zeros(spec.out_channels) if spec.bias is None else spec.bias
    bq = quantize_bias(bias, input_qp.scale, wqp.scale)
    return ConvSpec(
        spec.kernel, spec.stride, spec.in_channels, spec.out_channels,
        weights=wq, bias=bq, activation=spec.activation, slope=spec.slope,
        weight_qparams=wqp, input_qparams=input_qp, output_qparams=output_qp,
    )


# -- pooling, resampling, routing --------------------------------------------------------

def _rewrap(input: Tensor, data: np.ndarray) -> Tensor:
    if isinstance(input, QuantizedTensor):
        return QuantizedTensor(TensorShape(*data.shape), data, input.qparams)
    return FloatTensor.from_array(data)


def maxpool2x2(input: Tensor) -> Tensor:
    c, h, w = input.shape.as_tuple()
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    data = input.data.reshape(c, h // 2, 2, w // 2, 2).max(axis=(2, 4))
    return _rewrap(input, data)


def upsample_nearest2x(input: Tensor) -> Tensor:
    data = np.repeat(np.repeat(input.data, 2, axis=1), 2, axis=2)
    return _rewrap(input, data)


def _rescale_int8(q: QuantizedTensor, out_qp: QuantParams) -> np.ndarray:
    if q.qparams == out_qp:
        return q.data
    mult, shift = quantize_multiplier(q.qparams.scale / out_qp.scale)
    centered = q.data.astype(np.int64) - q.qparams.zero_point
    return requantize_array(centered, mult, shift, out_qp.zero_point)


def route_concat(inputs: Sequence[Tensor], out_qparams: Optional[QuantParams] = None) -> Tensor:
    """Channel concatenation in listed order.

    int8 inputs with differing parameters are rescaled into ``out_qparams``.
    """
    if not inputs:
        raise ValueError("route_concat needs at least one input")
    hw = {(t.shape.height, t.shape.width) for t in inputs}
    if len(hw) != 1:
        raise ShapeError(f"route_concat: spatial mismatch {sorted(hw)}")
    if len(inputs) == 1 and out_qparams is None:
        return inputs[0]
    if all(isinstance(t, FloatTensor) for t in inputs):
        return FloatTensor.from_array(np.concatenate([t.data for t in inputs], axis=0))
    if not all(isinstance(t, QuantizedTensor) for t in inputs):
        raise TypeError("route_concat: cannot mix float and int8 inputs")
    if out_qparams is None:
        out_qparams = inputs[0].qparams
        if any(t.qparams != out_qparams for t in inputs):
            raise ValueError("route_concat: int8 inputs differ in qparams; pass out_qparams")
    data = np.concatenate([_rescale_int8(t, out_qparams) for t in inputs], axis=0)
    return QuantizedTensor(TensorShape(*data.shape), data, out_qparams)


def leaky_relu(input: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    if isinstance(input, FloatTensor):
        x = input.data
        return FloatTensor.from_array(np.where(x >= 0, x, slope * x))
    zp = input.qparams.zero_point
    centered = input.data.astype(np.int64) - zp
    if slope == 0:
        return _rewrap(input, np.where(centered >= 0, input.data, np.int8(zp)).astype(np.int8))
    if slope < 0:
        raise ValueError("int8 leaky_relu needs a non-negative slope")
    mult, shift = quantize_multiplier(slope)
    neg = requantize_array(centered, mult, shift, zp)
    return _rewrap(input, np.where(centered >= 0, input.data, neg).astype(np.int8))


# -- squeeze and excitation ---------------------------------------------------------------

def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def se_internals(x: np.ndarray, spec: SESpec):
    """Float (hidden activations, gate logits) of an SE block."""
    pooled = x.mean(axis=(1, 2))
    w1 = np.asarray(spec.fc1_weight, dtype=np.float64)
    w2 = np.asarray(spec.fc2_weight, dtype=np.float64)
    hidden = np.maximum(w1 @ pooled + spec.fc1_bias, 0.0)
    return hidden, w2 @ hidden + spec.fc2_bias


def _se_float(x: np.ndarray, spec: SESpec) -> np.ndarray:
    _, logits = se_internals(x, spec)
    return x * sigmoid(logits)[:, None, None]


def se_pool_int8(centered: np.ndarray) -> np.ndarray:
    """Centered int8 channel means (input scale), rounded half to even."""
    hw = centered.shape[1] * centered.shape[2]
    total = centered.reshape(centered.shape[0], -1).sum(axis=1)
    mult, shift = quantize_multiplier(1.0 / hw)
    # centered values span up to 255 codes, so no int8 clamp here
    return _rounding_shift(total * mult, shift)


def _dense_int8(x_centered, w, bias, in_scale, w_qp, out_qp, relu: bool) -> np.ndarray:
    acc = np.asarray(w, dtype=np.int64) @ x_centered + np.asarray(bias, dtype=np.int64)
    check_accumulator(acc)
    if relu:
        acc = np.maximum(acc, 0)
    mult, shift = quantize_multiplier(in_scale * np.asarray(w_qp.scale) / out_qp.scale)
    return requantize_array(acc, mult, shift, out_qp.zero_point)


def _se_int8(q: QuantizedTensor, spec: SESpec) -> np.ndarray:
    zp = q.qparams.zero_point
    centered = q.data.astype(np.int64) - zp
    pooled = se_pool_int8(centered)
    hidden = _dense_int8(pooled, spec.fc1_weight, spec.fc1_bias, q.qparams.scale,
                         spec.fc1_qparams, spec.hidden_qparams, relu=True)
    hidden_c = hidden.astype(np.int64) - spec.hidden_qparams.zero_point
    logits = _dense_int8(hidden_c, spec.fc2_weight, spec.fc2_bias, spec.hidden_qparams.scale,
                         spec.fc2_qparams, spec.logit_qparams, relu=False)
    gate = spec.gate_table[logits.astype(np.int64) + 128]
    prod = centered * gate[:, None, None]
    out = _rounding_shift(prod, GATE_BITS) + zp
    return np.clip(out, -128, 127).astype(np.int8)


def gate_table(logit_qp: QuantParams) -> np.ndarray:
    """Sigmoid lookup over all 256 int8 logits, as Q0.8 integers in [0, 256]."""
    codes = np.arange(-128, 128)
    real = logit_qp.scale * (codes - logit_qp.zero_point)
    return round_half_away(sigmoid(real) * (1 << GATE_BITS)).astype(np.int64)


def se_block(input: Tensor, spec: SESpec) -> Tensor:
    """Global average -> FC -> ReLU -> FC -> sigmoid gate, applied per channel.

    The int8 output keeps the input's quantization parameters (the gate never
    exceeds 1).
    """
    _check_channels(input, spec.channels, "se_block")
    if spec.fc1_weight is None:
        raise ValueError("se_block: spec has no weights bound")
    if isinstance(input, QuantizedTensor):
        _require_qparams(input, spec.input_qparams if spec.quantized else None, "se_block")
        return _rewrap(input, _se_int8(input, spec))
    if spec.quantized:
        raise ValueError("se_block: float input given to an int8 spec")
    return FloatTensor.from_array(_se_float(input.data, spec))


def quantize_se(spec: SESpec, input_qp: QuantParams, hidden_qp: QuantParams,
                logit_qp: QuantParams) -> SESpec:
    w1, qp1 = quantize_weights(spec.fc1_weight, axis=0)
    w2, qp2 = quantize_weights(spec.fc2_weight, axis=0)
    b1 = quantize_bias(spec.fc1_bias, input_qp.scale, qp1.scale)
    b2 = quantize_bias(spec.fc2_bias, hidden_qp.scale, qp2.scale)
    return SESpec(
        spec.channels, spec.reduction,
        fc1_weight=w1, fc1_bias=b1, fc2_weight=w2, fc2_bias=b2,
        fc1_qparams=qp1, fc2_qparams=qp2,
        input_qparams=input_qp, hidden_qparams=hidden_qp, logit_qparams=logit_qp,
        gate_table=gate_table(logit_qp),
    )
