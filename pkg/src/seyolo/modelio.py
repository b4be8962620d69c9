"""SEYW weight archives and weight binding.

Byte layout (all little-endian, every field 4-byte aligned)::

    "SEYW"            4 bytes magic
    u32 version       = 1
    u32 meta_len      UTF-8 JSON (config, mode, activation qparams), zero padded to 4
    u32 n_records
    n_records x record:
        u32 name_len, name bytes (zero padded to 4)
        u8 dtype (0 f32, 1 i8, 2 i32), u8 ndim, u16 reserved (0)
        u32 dims[ndim]
        i8 only: i32 axis (-1 per tensor), u32 n_scales, f32 scales[n], i32 zero_point
        u32 payload_len, payload (zero padded to 4)
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, replace
from pathlib import Path
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from .graph import NetConfig, NetworkGraph, build_squeezed_edge_yolo
from .kernels import gate_table
from .qtensor import QuantParams, TensorShape, compute_qparams

MAGIC = b"SEYW"
VERSION = 1
DTYPES = {"f32": (0, np.dtype("<f4")), "i8": (1, np.dtype("i1")), "i32": (2, np.dtype("<i4"))}
DTYPE_BY_CODE = {code: (name, dt) for name, (code, dt) in DTYPES.items()}
INPUT_QPARAMS = compute_qparams(0.0, 1.0, "asymmetric")


class ArchiveError(ValueError):
    pass


class CorruptArchiveError(ArchiveError):
    pass


class MissingTensorError(ArchiveError):
    pass


class TensorShapeError(ArchiveError):
    pass


class TensorRecord:
    __slots__ = ("name", "dtype", "array", "qparams")

    def __init__(self, name: str, dtype: str, array: np.ndarray, qparams: Optional[QuantParams] = None):
        if dtype not in DTYPES:
            raise ValueError(f"unknown dtype {dtype!r}")
        if (dtype == "i8") != (qparams is not None):
            raise ValueError(f"{name}: qparams must be present iff dtype is i8")
        self.name = name
        self.dtype = dtype
        self.array = np.ascontiguousarray(array, dtype=DTYPES[dtype][1])
        self.qparams = qparams

    def __repr__(self):
        return f"TensorRecord({self.name!r}, {self.dtype}, shape={self.array.shape})"


# -- canonical parameter layout ---------------------------------------------------

def param_layout(graph: NetworkGraph) -> Iterator[Tuple[str, Tuple[int, ...], int]]:
    """(name, shape, fan_in) for every parameter tensor, in canonical order."""
    for node in graph.nodes:
        if node.kind == "Conv":
            s = node.spec
            yield f"{node.name}.conv.weight", (s.out_channels, s.in_channels, s.kernel, s.kernel), s.in_channels * s.kernel ** 2
            yield f"{node.name}.conv.bias", (s.out_channels,), 0
        elif node.kind == "SE":
            c, h = node.spec.channels, node.spec.hidden
            yield f"{node.name}.se.fc1.weight", (h, c), c
            yield f"{node.name}.se.fc1.bias", (h,), 0
            yield f"{node.name}.se.fc2.weight", (c, h), h
            yield f"{node.name}.se.fc2.bias", (c,), 0
        elif node.kind == "Detect":
            for i, s in enumerate(node.spec.stems):
                yield f"{node.name}.head{i}.weight", (s.out_channels, s.in_channels, 1, 1), s.in_channels
                yield f"{node.name}.head{i}.bias", (s.out_channels,), 0


def init_random_weights(graph: NetworkGraph, seed: int = 0) -> NetworkGraph:
    """Float graph with weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, fan_in in param_layout(graph):
        if name.endswith("bias"):
            arr = np.zeros(shape, dtype=np.float32)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        tensors[name] = TensorRecord(name, "f32", arr)
    return bind(graph, tensors, {"mode": "float"})


def zero_weights(graph: NetworkGraph) -> NetworkGraph:
    tensors = {name: TensorRecord(name, "f32", np.zeros(shape, np.float32))
               for name, shape, _ in param_layout(graph)}
    return bind(graph, tensors, {"mode": "float"})


# -- binding ---------------------------------------------------------------------

def _check_tensors(graph: NetworkGraph, tensors: Dict[str, TensorRecord], dtype_for) -> None:
    expected = {name: shape for name, shape, _ in param_layout(graph)}
    for name, shape in expected.items():
        if name not in tensors:
            raise MissingTensorError(f"missing tensor {name}")
        rec = tensors[name]
        if rec.array.shape != shape:
            raise TensorShapeError(f"tensor {name} has shape {rec.array.shape}, expected {shape}")
        want = dtype_for(name)
        if rec.dtype != want:
            raise ArchiveError(f"tensor {name} has dtype {rec.dtype}, expected {want}")
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise ArchiveError(f"unexpected tensors in archive: {', '.join(extra)}")


def _qp_from_json(v) -> QuantParams:
    return QuantParams(float(v[0]), int(v[1]))


def _qp_to_json(qp: QuantParams):
    return [qp.scale, qp.zero_point]


def bind(graph: NetworkGraph, tensors: Dict[str, TensorRecord], meta: dict) -> NetworkGraph:
    """Return a copy of ``graph`` with every parameter bound; all or nothing."""
    mode = meta.get("mode", "float")
    if mode == "float":
        _check_tensors(graph, tensors, lambda n: "f32")
        return _bind_float(graph, tensors)
    if mode == "int8":
        _check_tensors(graph, tensors, lambda n: "i32" if n.endswith("bias") else "i8")
        acts = {k: _qp_from_json(v) for k, v in meta.get("activations", {}).items()}
        return _bind_int8(graph, tensors, acts)
    raise ArchiveError(f"unknown mode {mode!r}")


def _bind_float(graph: NetworkGraph, t: Dict[str, TensorRecord]) -> NetworkGraph:
    def a(name):
        return t[name].array.copy()

    nodes = []
    for node in graph.nodes:
        p = node.name
        if node.kind == "Conv":
            node = replace(node, spec=replace(node.spec, weights=a(f"{p}.conv.weight"), bias=a(f"{p}.conv.bias")))
        elif node.kind == "SE":
            node = replace(node, spec=replace(
                node.spec,
                fc1_weight=a(f"{p}.se.fc1.weight"), fc1_bias=a(f"{p}.se.fc1.bias"),
                fc2_weight=a(f"{p}.se.fc2.weight"), fc2_bias=a(f"{p}.se.fc2.bias")))
        elif node.kind == "Detect":
            stems = tuple(replace(s, weights=a(f"{p}.head{i}.weight"), bias=a(f"{p}.head{i}.bias"))
                          for i, s in enumerate(node.spec.stems))
            node = replace(node, spec=replace(node.spec, stems=stems))
        nodes.append(node)
    return NetworkGraph(tuple(nodes), graph.config, "float", None)


def _act(acts: Dict[str, QuantParams], name: str) -> QuantParams:
    try:
        return acts[name]
    except KeyError:
        raise MissingTensorError(f"missing activation qparams {name}") from None


def _bind_int8(graph: NetworkGraph, t: Dict[str, TensorRecord], acts: Dict[str, QuantParams]) -> NetworkGraph:
    """Attach int8 weights, propagating activation parameters along the graph."""
    input_qp = _act(acts, "input")
    out_qp: Dict = {}
    cur = input_qp
    nodes = []
    for node in graph.nodes:
        p = node.name
        in_qp = out_qp[node.input_refs[0]] if node.input_refs else cur
        if node.kind == "Conv":
            w = t[f"{p}.conv.weight"]
            y_qp = _act(acts, f"{p}.out")
            spec = replace(node.spec, weights=w.array.copy(), bias=t[f"{p}.conv.bias"].array.copy(),
                           weight_qparams=w.qparams, input_qparams=in_qp, output_qparams=y_qp)
        elif node.kind == "SE":
            w1, w2 = t[f"{p}.se.fc1.weight"], t[f"{p}.se.fc2.weight"]
            logit_qp = _act(acts, f"{p}.logit")
            spec = replace(
                node.spec,
                fc1_weight=w1.array.copy(), fc1_bias=t[f"{p}.se.fc1.bias"].array.copy(),
                fc2_weight=w2.array.copy(), fc2_bias=t[f"{p}.se.fc2.bias"].array.copy(),
                fc1_qparams=w1.qparams, fc2_qparams=w2.qparams, input_qparams=in_qp,
                hidden_qparams=_act(acts, f"{p}.hidden"), logit_qparams=logit_qp,
                gate_table=gate_table(logit_qp))
            y_qp = in_qp
        elif node.kind == "Route":
            if len(node.input_refs) > 1:
                y_qp = _act(acts, f"{p}.out")
                spec = replace(node.spec, out_qparams=y_qp)
            else:
                y_qp, spec = in_qp, node.spec
        elif node.kind == "Detect":
            stems = []
            for i, (s, ref) in enumerate(zip(node.spec.stems, node.input_refs)):
                w = t[f"{p}.head{i}.weight"]
                stems.append(replace(s, weights=w.array.copy(), bias=t[f"{p}.head{i}.bias"].array.copy(),
                                     weight_qparams=w.qparams, input_qparams=out_qp[ref],
                                     output_qparams=_act(acts, f"{p}.head{i}.out")))
            spec = replace(node.spec, stems=tuple(stems))
            y_qp = None
        else:
            spec, y_qp = node.spec, in_qp
        nodes.append(replace(node, spec=spec))
        out_qp[node.id] = y_qp
        cur = y_qp
    return NetworkGraph(tuple(nodes), graph.config, "int8", input_qp)


def graph_tensors(graph: NetworkGraph) -> Tuple[Dict[str, TensorRecord], dict]:
    """Inverse of :func:`bind`: (tensor records, metadata) of a bound graph."""
    if not graph.bound:
        raise ValueError("graph has no weights bound")
    int8 = graph.mode == "int8"
    tensors: Dict[str, TensorRecord] = {}
    acts: Dict[str, list] = {}

    def put(name, arr, qp=None, bias=False):
        if int8:
            tensors[name] = TensorRecord(name, "i32" if bias else "i8", arr, None if bias else qp)
        else:
            tensors[name] = TensorRecord(name, "f32", arr)

    for node in graph.nodes:
        p, s = node.name, node.spec
        if node.kind == "Conv":
            put(f"{p}.conv.weight", s.weights, s.weight_qparams)
            put(f"{p}.conv.bias", s.bias, bias=True)
            if int8:
                acts[f"{p}.out"] = _qp_to_json(s.output_qparams)
        elif node.kind == "SE":
            put(f"{p}.se.fc1.weight", s.fc1_weight, s.fc1_qparams)
            put(f"{p}.se.fc1.bias", s.fc1_bias, bias=True)
            put(f"{p}.se.fc2.weight", s.fc2_weight, s.fc2_qparams)
            put(f"{p}.se.fc2.bias", s.fc2_bias, bias=True)
            if int8:
                acts[f"{p}.hidden"] = _qp_to_json(s.hidden_qparams)
                acts[f"{p}.logit"] = _qp_to_json(s.logit_qparams)
        elif node.kind == "Route" and int8 and s.out_qparams is not None:
            acts[f"{p}.out"] = _qp_to_json(s.out_qparams)
        elif node.kind == "Detect":
            for i, stem in enumerate(s.stems):
                put(f"{p}.head{i}.weight", stem.weights, stem.weight_qparams)
                put(f"{p}.head{i}.bias", stem.bias, bias=True)
                if int8:
                    acts[f"{p}.head{i}.out"] = _qp_to_json(stem.output_qparams)
    meta = {"mode": graph.mode, "config": config_to_json(graph.config)}
    if int8:
        acts["input"] = _qp_to_json(graph.input_qparams)
        meta["activations"] = acts
    return tensors, meta


def config_to_json(cfg: NetConfig) -> dict:
    d = asdict(cfg)
    d["input_shape"] = list(cfg.input_shape.as_tuple())
    d["anchors"] = [[list(a) for a in head] for head in cfg.anchors]
    return d


def config_from_json(d: dict) -> NetConfig:
    d = dict(d)
    d["input_shape"] = TensorShape(*d["input_shape"])
    d["anchors"] = tuple(tuple(tuple(a) for a in head) for head in d["anchors"])
    return NetConfig(**d)


# -- archive encoding -------------------------------------------------------------

def _pad4(n: int) -> bytes:
    return b"\0" * (-n % 4)


def encode_archive(tensors: Dict[str, TensorRecord], meta: Optional[dict] = None) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode()
    out.write(struct.pack("<I", len(meta_bytes)) + meta_bytes + _pad4(len(meta_bytes)))
    out.write(struct.pack("<I", len(tensors)))
    for name, rec in tensors.items():
        if name != rec.name:
            raise ValueError(f"record {rec.name!r} stored under {name!r}")
        nb = name.encode()
        out.write(struct.pack("<I", len(nb)) + nb + _pad4(len(nb)))
        code = DTYPES[rec.dtype][0]
        out.write(struct.pack("<BBH", code, rec.array.ndim, 0))
        out.write(struct.pack(f"<{rec.array.ndim}I", *rec.array.shape))
        if rec.dtype == "i8":
            qp = rec.qparams
            scales = np.atleast_1d(np.asarray(qp.scale, dtype="<f4"))
            if not np.array_equal(scales.astype(np.float64), np.atleast_1d(qp.scale)):
                raise ValueError(f"{name}: weight scales must be float32-representable")
            axis = -1 if qp.axis is None else qp.axis
            out.write(struct.pack("<iI", axis, len(scales)) + scales.tobytes() + struct.pack("<i", qp.zero_point))
        payload = rec.array.tobytes()
        out.write(struct.pack("<I", len(payload)) + payload + _pad4(len(payload)))
    return out.getvalue()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CorruptArchiveError(f"archive truncated at byte {self.pos} (wanted {n} more)")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def align(self):
        self.take(-self.pos % 4)


def decode_archive(buf: bytes) -> Tuple[Dict[str, TensorRecord], dict]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CorruptArchiveError("bad magic, not an SEYW archive")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CorruptArchiveError(f"unsupported SEYW version {version}")
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptArchiveError(f"unreadable metadata: {exc}") from None
    r.align()
    (count,) = r.unpack("<I")
    tensors: Dict[str, TensorRecord] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode(errors="replace")
        r.align()
        code, ndim, _ = r.unpack("<BBH")
        if code not in DTYPE_BY_CODE:
            raise CorruptArchiveError(f"{name}: unknown dtype code {code}")
        dtype, dt = DTYPE_BY_CODE[code]
        shape = r.unpack(f"<{ndim}I")
        qp = None
        if dtype == "i8":
            axis, n = r.unpack("<iI")
            scales = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float64)
            (zp,) = r.unpack("<i")
            try:
                qp = QuantParams(scales.copy() if axis >= 0 else float(scales[0]), zp, axis if axis >= 0 else None)
            except (ValueError, IndexError) as exc:
                raise CorruptArchiveError(f"{name}: bad qparams: {exc}") from None
        (plen,) = r.unpack("<I")
        if plen != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise CorruptArchiveError(f"{name}: payload length {plen} does not match shape {shape}")
        arr = np.frombuffer(r.take(plen), dtype=dt).reshape(shape)
        r.align()
        if name in tensors:
            raise CorruptArchiveError(f"duplicate tensor {name}")
        tensors[name] = TensorRecord(name, dtype, arr.copy(), qp)
    if r.pos != len(buf):
        raise CorruptArchiveError(f"{len(buf) - r.pos} trailing bytes after last record")
    return tensors, meta


def save_weights(graph_or_tensors, path) -> None:
    """Write a bound graph (or a name -> TensorRecord dict) as an SEYW archive."""
    if isinstance(graph_or_tensors, NetworkGraph):
        tensors, meta = graph_tensors(graph_or_tensors)
    else:
        tensors, meta = dict(graph_or_tensors), {}
    Path(path).write_bytes(encode_archive(tensors, meta))


def read_archive(path) -> Tuple[Dict[str, TensorRecord], dict]:
    return decode_archive(Path(path).read_bytes())


def load_weights(path, graph: NetworkGraph, mode: Optional[str] = None) -> NetworkGraph:
    """Bind the archive at ``path`` onto an unbound copy of ``graph``."""
    tensors, meta = read_archive(path)
    archive_mode = meta.get("mode", "float")
    if mode is not None and mode != archive_mode:
        raise ArchiveError(f"archive holds {archive_mode} weights, {mode} execution requested")
    return bind(graph, tensors, meta)


def load_model(path, mode: Optional[str] = None) -> NetworkGraph:
    """Rebuild the graph from the archive's stored configuration and bind it."""
    tensors, meta = read_archive(path)
    if "config" not in meta:
        raise ArchiveError("archive carries no network configuration")
    try:
        cfg = config_from_json(meta["config"])
    except (TypeError, ValueError, KeyError) as exc:
        raise ArchiveError(f"bad network configuration: {exc}") from None
    archive_mode = meta.get("mode", "float")
    if mode is not None and mode != archive_mode:
        raise ArchiveError(f"archive holds {archive_mode} weights, {mode} execution requested")
    return bind(build_squeezed_edge_yolo(cfg), tensors, meta)
