"""Squeezed Edge YOLO network graph: construction, shape inference, op
counting, width scaling and float/int8 execution."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import kernels
from .kernels import ConvSpec, SESpec, ShapeError
from .qtensor import (
    FloatTensor,
    QuantizedTensor,
    QuantParams,
    TensorShape,
    dequantize,
    quantize,
)

NodeId = Tuple[str, int]

# Neck row 8 lists 64 filters but a 128-channel output.  "filters" trusts the
# filters column (rows 8 and 9 then carry 64 channels), "output" trusts the
# output column.
NECK8_RESOLUTION = "filters"

DEFAULT_ANCHORS = (
    ((32, 32), (64, 48), (48, 64)),  # 8x8 grid head (neck.6)
    ((8, 8), (16, 12), (12, 16)),  # 16x16 grid head (neck.16)
)

# (type, kernel, stride, filters) or (type, refs) rows, in table order.
BACKBONE_ROWS = (
    ("Conv", 3, 2, 16),
    ("Conv", 3, 2, 32),
    ("SE",),
    ("Conv", 3, 1, 16),
    ("SE",),
    ("Conv", 3, 1, 16),
    ("SE",),
    ("Route", (6, 4)),
    ("Conv", 3, 1, 32),
    ("SE",),
    ("Route", (2, 9)),
    ("SE",),
    ("MaxPool",),
)

NECK_ROWS = (
    ("Conv", 3, 1, 64),
    ("Conv", 3, 2, 128),
    ("SE",),
    ("Conv", 1, 1, 256),
    ("SE",),
    ("Conv", 1, 1, 256),
    ("Conv", 3, 1, 128),
    ("Route", (5,)),
    ("Conv", 3, 1, 64),  # output column says 128, see NECK8_RESOLUTION
    ("Upsample",),
    ("Conv", 1, 1, 64),
    ("Route", (10, 0)),
    ("Conv", 3, 1, 128),
    ("SE",),
    ("Conv", 1, 1, 128),
    ("SE",),
    ("Conv", 3, 1, 64),
    ("Detect", (6, 16)),
)


@dataclass(frozen=True)
class NetConfig:
    input_shape: TensorShape = TensorShape(3, 128, 128)
    num_classes: int = 3
    anchors_per_head: int = 3
    anchors: Tuple[Tuple[Tuple[float, float], ...], ...] = DEFAULT_ANCHORS
    se_reduction: int = 4
    param_factor: float = 1.0
    neck8_resolution: str = NECK8_RESOLUTION
    leaky_slope: float = kernels.LEAKY_SLOPE

    def __post_init__(self):
        s = self.input_shape
        if s.height != s.width or s.height % 16:
            raise ValueError(f"input must be square with side divisible by 16, got {s}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if len(self.anchors) != 2 or any(len(a) != self.anchors_per_head for a in self.anchors):
            raise ValueError("anchors must list anchors_per_head (w, h) pairs for each of two heads")
        if self.param_factor < 1:
            raise ValueError("param_factor must be >= 1")
        if self.neck8_resolution not in ("filters", "output"):
            raise ValueError("neck8_resolution must be 'filters' or 'output'")

    @property
    def head_channels(self) -> int:
        return self.anchors_per_head * (5 + self.num_classes)

    def width(self, filters: int) -> int:
        """Hidden channel width after parameter scaling."""
        if self.param_factor == 1:
            return filters
        grown = filters * math.sqrt(self.param_factor)
        return int(math.ceil(grown / 8 - 1e-9)) * 8


@dataclass(frozen=True, eq=False)
class RouteSpec:
    refs: Tuple[int, ...]
    out_qparams: Optional[QuantParams] = None


@dataclass(frozen=True, eq=False)
class DetectSpec:
    refs: Tuple[int, ...]
    stems: Tuple[ConvSpec, ...]
    anchors: Tuple[Tuple[Tuple[float, float], ...], ...]


@dataclass(frozen=True, eq=False)
class LayerNode:
    section: str
    index: int
    kind: str
    spec: object
    input_refs: Tuple[NodeId, ...]

    @property
    def id(self) -> NodeId:
        return (self.section, self.index)

    @property
    def name(self) -> str:
        return f"{self.section}.{self.index}"


@dataclass(frozen=True, eq=False)
class NetworkGraph:
    nodes: Tuple[LayerNode, ...]
    config: NetConfig
    mode: Optional[str] = None  # None until weights are bound
    input_qparams: Optional[QuantParams] = None

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        seen = set()
        detects = 0
        for node in self.nodes:
            for ref in node.input_refs:
                if ref not in seen:
                    raise ValueError(f"{node.name}: input {ref[0]}.{ref[1]} is not an earlier node")
            if node.kind == "Detect":
                detects += 1
                if node is not self.nodes[-1] or len(node.input_refs) != 2:
                    raise ValueError("Detect must be the final node with two inputs")
            seen.add(node.id)
        if detects > 1:
            raise ValueError("graph may contain at most one Detect node")

    def node(self, node_id) -> LayerNode:
        if isinstance(node_id, str):
            section, idx = node_id.split(".")
            node_id = (section, int(idx))
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    @property
    def bound(self) -> bool:
        return self.mode is not None

    def convs(self):
        """(name, ConvSpec) for every convolution, detection stems included."""
        for node in self.nodes:
            if node.kind == "Conv":
                yield node.name, node.spec
            elif node.kind == "Detect":
                for h, stem in enumerate(node.spec.stems):
                    yield f"{node.name}.head{h}", stem


def build_squeezed_edge_yolo(config: NetConfig = NetConfig()) -> NetworkGraph:
    """Unbound graph reproducing the backbone and neck tables row by row."""
    nodes: List[LayerNode] = []
    channels: Dict[NodeId, int] = {}
    prev_channels = config.input_shape.channels
    prev: Optional[NodeId] = None

    for section, rows in (("backbone", BACKBONE_ROWS), ("neck", NECK_ROWS)):
        for idx, row in enumerate(rows):
            kind = row[0]
            refs: Tuple[NodeId, ...] = (prev,) if prev is not None else ()
            if kind == "Conv":
                _, k, stride, filters = row
                if section == "neck" and idx == 8 and config.neck8_resolution == "output":
                    filters = 128
                out = config.width(filters)
                spec = ConvSpec(k, stride, prev_channels, out, slope=config.leaky_slope)
            elif kind == "SE":
                out = prev_channels
                spec = SESpec(out, config.se_reduction)
            elif kind in ("MaxPool", "Upsample"):
                out = prev_channels
                spec = None
            elif kind == "Route":
                refs = tuple((section, r) for r in row[1])
                out = sum(channels[r] for r in refs)
                spec = RouteSpec(row[1])
            elif kind == "Detect":
                refs = tuple((section, r) for r in row[1])
                stems = tuple(
                    ConvSpec(1, 1, channels[r], config.head_channels, activation="linear")
                    for r in refs
                )
                out = 0
                spec = DetectSpec(row[1], stems, config.anchors)
            else:  # pragma: no cover - table constant
                raise ValueError(kind)
            node = LayerNode(section, idx, kind, spec, refs)
            nodes.append(node)
            channels[node.id] = out
            prev, prev_channels = node.id, out
    return NetworkGraph(tuple(nodes), config)


def infer_shapes(graph: NetworkGraph) -> Dict[NodeId, TensorShape]:
    """Propagate shapes from the configured input.

    The Detect node has no single output; its entry is omitted and its stem
    outputs are reported under ``(section, index, head)`` keys.
    """
    shapes: Dict = {}
    cur = graph.config.input_shape
    for node in graph.nodes:
        ins = [shapes[r] for r in node.input_refs] if node.input_refs else [cur]
        x = ins[0]
        if node.kind == "Conv":
            spec: ConvSpec = node.spec
            if x.channels != spec.in_channels:
                raise ShapeError(f"{node.name}: input has {x.channels} channels, conv expects {spec.in_channels}")
            h, w = spec.output_hw(x.height, x.width)
            out = TensorShape(spec.out_channels, h, w)
        elif node.kind == "SE":
            if x.channels != node.spec.channels:
                raise ShapeError(f"{node.name}: input has {x.channels} channels, SE expects {node.spec.channels}")
            out = x
        elif node.kind == "MaxPool":
            if x.height % 2 or x.width % 2:
                raise ShapeError(f"{node.name}: odd spatial dims {x.height}x{x.width}")
            out = TensorShape(x.channels, x.height // 2, x.width // 2)
        elif node.kind == "Upsample":
            out = TensorShape(x.channels, x.height * 2, x.width * 2)
        elif node.kind == "Route":
            if len({(s.height, s.width) for s in ins}) != 1:
                raise ShapeError(f"{node.name}: route inputs disagree spatially: {[str(s) for s in ins]}")
            out = TensorShape(sum(s.channels for s in ins), x.height, x.width)
        elif node.kind == "Detect":
            for h, (s, stem) in enumerate(zip(ins, node.spec.stems)):
                if s.channels != stem.in_channels:
                    raise ShapeError(f"{node.name}: head {h} input has {s.channels} channels, stem expects {stem.in_channels}")
                shapes[node.id + (h,)] = TensorShape(stem.out_channels, s.height, s.width)
            continue
        else:
            raise ValueError(f"{node.name}: unknown kind {node.kind}")
        shapes[node.id] = out
        cur = out
    return shapes


def count_params(graph: NetworkGraph) -> int:
    total = 0
    for node in graph.nodes:
        if node.kind in ("Conv", "SE"):
            total += kernels.param_count(node.spec)
        elif node.kind == "Detect":
            total += sum(kernels.param_count(s) for s in node.spec.stems)
    return total


def node_ops(node: LayerNode, shapes) -> int:
    """Operations for one node (1 MAC = 2 ops)."""
    if node.kind == "Conv":
        s = node.spec
        out = shapes[node.id]
        return 2 * s.kernel * s.kernel * s.in_channels * out.height * out.width * s.out_channels
    if node.kind == "SE":
        out = shapes[node.id]
        c, h = node.spec.channels, node.spec.hidden
        # pooling adds, two dense layers, gate multiplies
        return out.size + 2 * (c * h + h * c) + out.size
    if node.kind == "MaxPool":
        return 3 * shapes[node.id].size
    if node.kind == "Detect":
        total = 0
        for h, stem in enumerate(node.spec.stems):
            out = shapes[node.id + (h,)]
            total += 2 * stem.in_channels * out.height * out.width * stem.out_channels
        return total
    return 0


def count_ops(graph: NetworkGraph) -> int:
    if not graph.nodes:
        return 0
    shapes = infer_shapes(graph)
    return sum(node_ops(n, shapes) for n in graph.nodes)


def scale_model(graph: NetworkGraph, param_factor: float) -> NetworkGraph:
    """Unbound copy with hidden widths grown by sqrt(param_factor)."""
    if param_factor < 1:
        raise ValueError("param_factor must be >= 1")
    if param_factor == 1:
        return graph
    cfg = replace(graph.config, param_factor=graph.config.param_factor * param_factor)
    return build_squeezed_edge_yolo(cfg)


# -- execution -------------------------------------------------------------------

Observer = Callable[[str, np.ndarray], None]


def last_consumers(graph: NetworkGraph) -> Dict[NodeId, int]:
    """Index of the last node reading each node's output."""
    last: Dict[NodeId, int] = {}
    for i, node in enumerate(graph.nodes):
        for ref in node.input_refs:
            last[ref] = i
    return last


def _as_float(t) -> np.ndarray:
    return dequantize(t).data if isinstance(t, QuantizedTensor) else t.data


def execute(
    graph: NetworkGraph,
    image,
    mode: Optional[str] = None,
    n_jobs: Optional[int] = None,
    observer: Optional[Observer] = None,
):
    """Run the network and return the two detection-stem outputs.

    ``image`` is a CHW float tensor/array in [0, 1].  In int8 mode it is
    quantized with the graph's input parameters and the heads come back as
    ``QuantizedTensor``.  ``observer(name, values)`` sees every float
    activation, SE internals included; calibration uses it.
    """
    if not graph.bound:
        raise ValueError("graph has no weights bound")
    mode = mode or graph.mode
    if mode != graph.mode:
        raise ValueError(f"graph is bound for {graph.mode} execution, not {mode}")
    if not isinstance(image, (FloatTensor, QuantizedTensor)):
        image = FloatTensor.from_array(image)
    if image.shape != graph.config.input_shape:
        raise ShapeError(f"image shape {image.shape} != configured input {graph.config.input_shape}")
    x = image
    if mode == "int8" and isinstance(x, FloatTensor):
        x = quantize(x, graph.input_qparams)

    last = last_consumers(graph)
    live: Dict[NodeId, object] = {}
    heads = None
    for i, node in enumerate(graph.nodes):
        if node.input_refs:
            try:
                ins = [live[r] for r in node.input_refs]
            except KeyError as exc:
                raise RuntimeError(f"{node.name}: input {exc.args[0]} was released early") from None
        else:
            ins = [x]
        y = _run_node(node, ins, n_jobs, observer)
        for ref in set(node.input_refs):
            if last[ref] == i:
                del live[ref]
        if node.kind == "Detect":
            heads = y
            continue
        if node.id in live:
            raise RuntimeError(f"{node.name}: activation written twice")
        if observer is not None:
            observer(node.name, _as_float(y))
        if node.id in last:
            live[node.id] = y
    return heads


def _run_node(node: LayerNode, ins, n_jobs, observer):
    x = ins[0]
    if node.kind == "Conv":
        return kernels.conv2d(x, node.spec, n_jobs)
    if node.kind == "SE":
        if observer is not None and isinstance(x, FloatTensor):
            hidden, logits = kernels.se_internals(x.data, node.spec)
            observer(f"{node.name}.hidden", hidden)
            observer(f"{node.name}.logit", logits)
        return kernels.se_block(x, node.spec)
    if node.kind == "MaxPool":
        return kernels.maxpool2x2(x)
    if node.kind == "Upsample":
        return kernels.upsample_nearest2x(x)
    if node.kind == "Route":
        if isinstance(x, QuantizedTensor):
            return kernels.route_concat(ins, node.spec.out_qparams)
        return kernels.route_concat(ins)
    if node.kind == "Detect":
        outs = tuple(kernels.conv2d(t, stem, n_jobs) for t, stem in zip(ins, node.spec.stems))
        if observer is not None:
            for h, t in enumerate(outs):
                observer(f"{node.name}.head{h}", _as_float(t))
        return outs
    raise ValueError(node.kind)


def heads_as_float(heads) -> Tuple[np.ndarray, ...]:
    return tuple(_as_float(h) for h in heads)
