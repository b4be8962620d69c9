"""Post-training int8 quantization: min/max calibration over float forward passes."""
from __future__ import annotations

from dataclasses import replace
from typing import Dict, Iterable, Tuple

import numpy as np

from .graph import NetworkGraph, execute, heads_as_float
from .kernels import quantize_conv, quantize_se, sigmoid
from .modelio import INPUT_QPARAMS, bind, graph_tensors, init_random_weights, TensorRecord
from .qtensor import QuantParams, UncalibratedError, compute_qparams


class RangeObserver:
    """Running per-tensor min/max across calibration passes."""

    def __init__(self):
        self.ranges: Dict[str, Tuple[float, float]] = {}

    def __call__(self, name: str, values: np.ndarray) -> None:
        lo, hi = float(values.min()), float(values.max())
        if name in self.ranges:
            plo, phi = self.ranges[name]
            lo, hi = min(lo, plo), max(hi, phi)
        self.ranges[name] = (lo, hi)


def collect_ranges(graph: NetworkGraph, images: Iterable) -> Dict[str, Tuple[float, float]]:
    if graph.mode != "float":
        raise ValueError("calibration needs a float graph")
    obs = RangeObserver()
    n = 0
    for img in images:
        execute(graph, img, "float", observer=obs)
        n += 1
    if n == 0:
        raise ValueError("empty calibration set")
    return obs.ranges


def _strict(ranges, name: str) -> QuantParams:
    lo, hi = ranges[name]
    try:
        return compute_qparams(lo, hi, "asymmetric")
    except UncalibratedError:
        raise UncalibratedError(f"activation {name} saw only zeros during calibration") from None


def _internal(ranges, name: str) -> QuantParams:
    # SE internals that are identically zero are exact under any scale
    lo, hi = ranges[name]
    if lo == 0.0 and hi == 0.0:
        return compute_qparams(0.0, 1.0, "asymmetric")
    return compute_qparams(lo, hi, "asymmetric")


def quantize_graph(graph: NetworkGraph, images: Iterable) -> NetworkGraph:
    """Int8 copy of a float graph calibrated on ``images`` (CHW floats in [0, 1])."""
    ranges = collect_ranges(graph, images)
    return quantize_with_ranges(graph, ranges)


def quantize_with_ranges(graph: NetworkGraph, ranges: Dict[str, Tuple[float, float]]) -> NetworkGraph:
    out_qp: Dict = {}
    cur = INPUT_QPARAMS
    nodes = []
    for node in graph.nodes:
        in_qp = out_qp[node.input_refs[0]] if node.input_refs else cur
        name = node.name
        spec = node.spec
        if node.kind == "Conv":
            y_qp = _strict(ranges, name)
            spec = quantize_conv(spec, in_qp, y_qp)
        elif node.kind == "SE":
            spec = quantize_se(spec, in_qp, _internal(ranges, f"{name}.hidden"),
                               _internal(ranges, f"{name}.logit"))
            y_qp = in_qp
        elif node.kind == "Route" and len(node.input_refs) > 1:
            y_qp = _strict(ranges, name)
            spec = replace(spec, out_qparams=y_qp)
        elif node.kind == "Detect":
            stems = tuple(
                quantize_conv(stem, out_qp[ref], _strict(ranges, f"{name}.head{i}"))
                for i, (stem, ref) in enumerate(zip(spec.stems, node.input_refs))
            )
            spec = replace(spec, stems=stems)
            y_qp = None
        else:
            y_qp = in_qp
        nodes.append(replace(node, spec=spec))
        out_qp[node.id] = y_qp
        cur = y_qp
    return NetworkGraph(tuple(nodes), graph.config, "int8", INPUT_QPARAMS)


# -- calibrated random weights ------------------------------------------------------

def _output_std(graph: NetworkGraph, images, name: str) -> float:
    acc = []

    def grab(n, values):
        if n == name:
            acc.append(values.ravel())

    for img in images:
        execute(graph, img, "float", observer=grab)
    return float(np.concatenate(acc).std())


def _candidate_rate(heads, anchors_per_head: int, bias: float, conf_threshold: float) -> float:
    """Mean per-image count of anchor cells scoring >= threshold with objectness shifted by ``bias``."""
    total = 0
    for per_image in heads:
        for h in per_image:
            t = h.reshape(anchors_per_head, -1, *h.shape[1:])
            score = sigmoid(t[:, 4] + bias) * sigmoid(t[:, 5:]).max(axis=1)
            total += int((score >= conf_threshold).sum())
    return total / len(heads)


def calibrated_random_weights(graph: NetworkGraph, images: Iterable, seed: int = 0,
                              target_candidates: float = 1.0, conf_threshold: float = 0.25) -> NetworkGraph:
    """Random float weights rescaled so detections are neither absent nor everywhere.

    Plain fan-in initialisation shrinks activations layer after layer, so every
    head logit sits near zero and every score lands on the default threshold.
    Here each conv (heads included) is rescaled in execution order to unit
    output std on ``images``, then the objectness bias is set so that on
    average ``target_candidates`` anchor cells per image pass the threshold.
    """
    images = list(images)
    if not images:
        raise ValueError("need at least one image")
    g = init_random_weights(graph, seed)
    tensors, meta = graph_tensors(g)
    for name, _spec in list(g.convs()):
        key = f"{name}.conv.weight" if f"{name}.conv.weight" in tensors else f"{name}.weight"
        std = _output_std(g, images, name)
        if std > 0:
            rec = tensors[key]
            tensors[key] = TensorRecord(key, rec.dtype, (rec.array / std).astype(np.float32))
            g = bind(graph, tensors, meta)

    heads = [heads_as_float(execute(g, img, "float")) for img in images]
    a = graph.config.anchors_per_head
    lo, hi = -30.0, 30.0
    for _ in range(60):
        mid = (lo + hi) / 2
        if _candidate_rate(heads, a, mid, conf_threshold) > target_candidates:
            hi = mid
        else:
            lo = mid
    per = graph.config.head_channels // a
    for name, _spec in g.convs():
        key = f"{name}.bias"
        if key in tensors:
            b = tensors[key].array.copy()
            b[4::per] = lo
            tensors[key] = TensorRecord(key, "f32", b)
    return bind(graph, tensors, meta)
