"""Three-level memory hierarchy model, tiling planner, analytic cost model and
occupancy trace for an 8-core cluster with software-managed L1/L2/L3.

Cost model, per planned layer::

    compute = ceil(macs / (cores * effective_macs_per_core_cycle))
    cdma    = n_l2_transfers * setup + ceil(l2_bytes / l2_dma_bytes_per_cycle)
    mdma    = n_l3_transfers * setup + ceil(l3_bytes / l3_dma_bytes_per_cycle)
    cycles  = max(compute, cdma + mdma)   if double buffered
              compute + cdma + mdma       otherwise

Weights live in L2 when they fit the residency budget (earliest layers first),
otherwise every weight tile is fetched L3 -> L2 (MDMA) before L2 -> L1 (CDMA).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .graph import NetworkGraph, infer_shapes, last_consumers, node_ops

LEVELS = ("L1", "L2", "L3")
LOOP_ORDERS = ("channel_outer", "spatial_outer")


class PlanningError(RuntimeError):
    """A layer cannot be tiled into L1, or the cost model cannot be calibrated."""


class HardwareConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HardwareModel:
    """Target parameters.  Sizes and clocks follow the GAP8 datasheet figures;
    DMA setup/bandwidth and the MAC rate are modelling knobs.  The access
    latencies are carried for configuration completeness; the per-layer cost
    model folds them into the MAC rate."""

    l1_bytes: int = 65_536
    l2_bytes: int = 524_288
    l3_bytes: int = 8 * 1024 * 1024
    cluster_cores: int = 8
    cluster_hz: float = 175e6
    fabric_hz: float = 250e6
    l1_access_cycles: int = 1
    l2_access_cycles: int = 4
    dma_setup_cycles: int = 100
    l3_dma_bytes_per_cycle: float = 4
    l2_dma_bytes_per_cycle: float = 8
    effective_macs_per_core_cycle: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise HardwareConfigError(f"{f.name} must be positive")
        if not self.l1_bytes < self.l2_bytes < self.l3_bytes:
            raise HardwareConfigError("memory levels must satisfy l1 < l2 < l3")

    @property
    def l2_staging_bytes(self) -> int:
        """L2 landing zone for streamed weight tiles (double-buffered L1 tile)."""
        return 2 * self.l1_bytes

    @classmethod
    def from_text(cls, text: str) -> "HardwareModel":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise HardwareConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise HardwareConfigError(f"line {lineno}: unknown key {key!r}")
            try:
                num = float(value)
                values[key] = int(num) if types[key] in (int, "int") else num
            except ValueError:
                raise HardwareConfigError(f"line {lineno}: {key} has non-numeric value {value!r}") from None
            if types[key] in (int, "int") and num != int(num):
                raise HardwareConfigError(f"line {lineno}: {key} must be an integer")
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "HardwareModel":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n" for f in fields(self))


# -- layer work items -------------------------------------------------------------

@dataclass(frozen=True)
class LayerWork:
    """One planned unit: a conv, SE block, pool, upsample or concatenating route."""

    name: str
    kind: str  # conv | se | pool | upsample | concat
    in_shape: Tuple[int, int, int]  # C, H, W
    out_shape: Tuple[int, int, int]
    kernel: int = 1
    stride: int = 1
    weight_bytes: int = 0
    macs: float = 0.0


def layer_works(graph: NetworkGraph) -> List[LayerWork]:
    """Execution-ordered work items; single-input routes are aliases and vanish."""
    if not graph.nodes:
        return []
    shapes = infer_shapes(graph)
    cur = graph.config.input_shape
    works = []
    from . import kernels

    for node in graph.nodes:
        ins = [shapes[r] for r in node.input_refs] if node.input_refs else [cur]
        x = ins[0]
        out = shapes.get(node.id)
        half_ops = node_ops(node, shapes) / 2
        if node.kind == "Conv":
            s = node.spec
            works.append(LayerWork(node.name, "conv", x.as_tuple(), out.as_tuple(), s.kernel, s.stride,
                                   kernels.param_count(s), half_ops))
        elif node.kind == "SE":
            works.append(LayerWork(node.name, "se", x.as_tuple(), out.as_tuple(),
                                   weight_bytes=kernels.param_count(node.spec), macs=half_ops))
        elif node.kind == "MaxPool":
            works.append(LayerWork(node.name, "pool", x.as_tuple(), out.as_tuple(), 2, 2, macs=half_ops))
        elif node.kind == "Upsample":
            works.append(LayerWork(node.name, "upsample", x.as_tuple(), out.as_tuple(), macs=half_ops))
        elif node.kind == "Route" and len(node.input_refs) > 1:
            works.append(LayerWork(node.name, "concat", out.as_tuple(), out.as_tuple(), macs=half_ops))
        elif node.kind == "Detect":
            for h, (s, stem) in enumerate(zip(ins, node.spec.stems)):
                o = shapes[node.id + (h,)]
                works.append(LayerWork(f"{node.name}.head{h}", "conv", s.as_tuple(), o.as_tuple(), 1, 1,
                                       kernels.param_count(stem),
                                       stem.in_channels * o.height * o.width * stem.out_channels))
        if out is not None:
            cur = out
    return works


def footprint(graph: NetworkGraph) -> Tuple[int, int]:
    """(weight bytes at one byte per parameter, peak live int8 activation bytes).

    Liveness follows node order: an output stays live until its last
    consumer has run; single-input routes alias their source.
    """
    input_bytes = graph.config.input_shape.size
    if not graph.nodes:
        return 0, input_bytes
    shapes = infer_shapes(graph)
    last = last_consumers(graph)
    weights = sum(w.weight_bytes for w in layer_works(graph))

    def size(node) -> int:
        if node.kind == "Detect":
            return sum(shapes[node.id + (h,)].size for h in range(len(node.spec.stems)))
        if node.kind == "Route" and len(node.input_refs) == 1:
            return 0
        return shapes[node.id].size

    # an alias keeps its source alive as long as the alias is needed
    owner = {}
    for node in graph.nodes:
        if node.kind == "Route" and len(node.input_refs) == 1:
            owner[node.id] = owner.get(node.input_refs[0], node.input_refs[0])
    release: Dict = {}
    for nid, idx in last.items():
        o = owner.get(nid, nid)
        release[o] = max(release.get(o, -1), idx)

    live: Dict = {"input": input_bytes}
    peak = input_bytes
    for i, node in enumerate(graph.nodes):
        live[node.id] = size(node)
        peak = max(peak, sum(live.values()))
        if i == 0:
            del live["input"]
        # never-consumed outputs (the heads) stay live to the end
        for nid in [k for k in live if release.get(k, i + 1) <= i]:
            del live[nid]
    return weights, peak


# -- tile candidates --------------------------------------------------------------

def tile_candidates(dim: int) -> List[int]:
    """Powers of two up to ``dim`` and the exact divisors of ``dim``."""
    c = {d for d in range(1, dim + 1) if dim % d == 0}
    p = 1
    while p <= dim:
        c.add(p)
        p *= 2
    return sorted(c)


def _extent(out_len: int, tile: int, in_len: int, kind: str, k: int, s: int):
    """(n_tiles, summed input extent, max input extent) along one spatial axis."""
    pad = k // 2
    n = -(-out_len // tile)
    total = mx = 0
    for t in range(n):
        o0, o1 = t * tile, min(out_len, (t + 1) * tile)
        if kind == "conv":
            lo, hi = max(0, o0 * s - pad), min(in_len, (o1 - 1) * s - pad + k)
        elif kind == "pool":
            lo, hi = 2 * o0, min(in_len, 2 * o1)
        elif kind == "upsample":
            lo, hi = o0 // 2, (o1 - 1) // 2 + 1
        else:
            lo, hi = o0, o1
        total += hi - lo
        mx = max(mx, hi - lo)
    return n, total, mx


def _se_weight_slice(weight_bytes: int, tc: int, channels: int) -> int:
    """Bytes of one fc1 (or fc2) slice covering ``tc`` channels."""
    return -(-weight_bytes * tc // (2 * channels))


def _se_slices(weight_bytes: int, chans: Sequence[int], channels: int) -> List[int]:
    """fc1 slices then fc2 slices; they sum to ``weight_bytes`` exactly."""
    half = [weight_bytes // 2, weight_bytes - weight_bytes // 2]
    out = []
    for total in half:
        bounds = [total * sum(chans[:i]) // channels for i in range(len(chans) + 1)]
        out.append([b - a for a, b in zip(bounds[:-1], bounds[1:])])
    return out[0] + out[1]


@dataclass
class CandidateTable:
    """Column arrays over every (tile_h, tile_w, tile_c, loop order) candidate."""

    th: np.ndarray
    tw: np.ndarray
    tc: np.ndarray
    order: np.ndarray  # index into LOOP_ORDERS
    working_set: np.ndarray
    n_in: np.ndarray
    in_bytes: np.ndarray
    n_w: np.ndarray
    w_bytes: np.ndarray
    n_out: np.ndarray
    out_bytes: np.ndarray


def candidate_table(work: LayerWork) -> CandidateTable:
    cin, hin, win = work.in_shape
    cout, hout, wout = work.out_shape
    kind = work.kind
    rows = [(t,) + _extent(hout, t, hin, kind, work.kernel, work.stride) for t in tile_candidates(hout)]
    cols = [(t,) + _extent(wout, t, win, kind, work.kernel, work.stride) for t in tile_candidates(wout)]
    chans = tile_candidates(cout)
    recs = []
    for th, nh, sum_r, max_r in rows:
        for tw, nw, sum_c, max_c in cols:
            ns = nh * nw
            for tc in chans:
                nc = -(-cout // tc)
                out_tile = th * tw * tc
                out_total = cout * hout * wout
                if kind == "conv":
                    per_out = work.weight_bytes // cout  # k*k*cin + 1 (bias)
                    in_tile = max_r * max_c * cin
                    in_pass = sum_r * sum_c * cin
                    w_tile = per_out * tc
                    for oi, order in enumerate(LOOP_ORDERS):
                        if order == "channel_outer":
                            in_reloads = nc if ns > 1 else 1
                            recs.append((th, tw, tc, oi, in_tile + w_tile + out_tile,
                                         in_reloads * ns, in_reloads * in_pass,
                                         nc, work.weight_bytes, ns * nc, out_total))
                        else:
                            w_reloads = ns if nc > 1 else 1
                            recs.append((th, tw, tc, oi, in_tile + w_tile + out_tile,
                                         ns, in_pass,
                                         w_reloads * nc, w_reloads * work.weight_bytes, ns * nc, out_total))
                    continue
                # channel-wise layers: input channels follow the output tile
                in_tile = max_r * max_c * tc
                in_pass = sum_r * sum_c * cout
                nt = ns * nc
                if kind == "se":
                    # squeeze pass streams fc1 column slices, excite pass fc2 row slices;
                    # per-channel sums stay in L1 as int32
                    ws = in_tile + out_tile + _se_weight_slice(work.weight_bytes, tc, cout) + 4 * cout
                    recs.append((th, tw, tc, 0, ws, 2 * nt, 2 * in_pass, 2 * nc, work.weight_bytes, nt, out_total))
                else:
                    recs.append((th, tw, tc, 0, in_tile + out_tile, nt, in_pass, 0, 0, nt, out_total))
    a = np.array(recs, dtype=np.int64)
    return CandidateTable(*(a[:, i] for i in range(a.shape[1])))


# -- plan ------------------------------------------------------------------------------

@dataclass(frozen=True)
class Transfer:
    src: str
    dst: str
    nbytes: int
    what: str  # input | weights | output


@dataclass(frozen=True)
class LayerPlan:
    name: str
    kind: str
    tile: Tuple[int, int, int]  # tile_h, tile_w, tile_c over the output
    loop_order: str
    placement: Dict[str, str]  # input / weights / output -> level
    double_buffered: bool
    working_set: int
    macs: float
    n_l2_transfers: int
    l2_bytes: int
    n_l3_transfers: int
    l3_bytes: int
    compute_cycles: int
    cdma_cycles: int
    mdma_cycles: int
    cycles: int


@dataclass(frozen=True)
class TilePlan:
    layers: Tuple[LayerPlan, ...]
    hw: HardwareModel
    weight_placement: Dict[str, str]
    activation_level: str
    peak_l1_bytes: int
    peak_l2_bytes: int
    weight_bytes: int
    peak_activation_bytes: int
    works: Tuple[LayerWork, ...] = field(default=(), repr=False)

    @property
    def l3_traffic_bytes(self) -> int:
        return sum(l.l3_bytes for l in self.layers)

    @property
    def l2_traffic_bytes(self) -> int:
        return sum(l.l2_bytes for l in self.layers)

    @property
    def total_cycles(self) -> int:
        return sum(l.cycles for l in self.layers)

    def transfers(self, layer: LayerPlan) -> List[Transfer]:
        """Materialised per-tile transfer list for one layer, in issue order."""
        work = next(w for w in self.works if w.name == layer.name)
        return list(_materialise(work, layer))


def _choose(work: LayerWork, table: CandidateTable, hw: HardwareModel, weights_l3: bool, acts_l3: bool):
    feasible = table.working_set <= hw.l1_bytes
    if not feasible.any():
        raise PlanningError(f"layer {work.name} cannot fit a single tile in {hw.l1_bytes} bytes of L1")
    setup = hw.dma_setup_cycles
    n2 = table.n_in + table.n_w + table.n_out
    b2 = table.in_bytes + table.w_bytes + table.out_bytes
    cdma = n2 * setup + np.ceil(b2 / hw.l2_dma_bytes_per_cycle).astype(np.int64)
    n3 = np.zeros_like(n2)
    b3 = np.zeros_like(b2)
    if weights_l3:
        n3 = n3 + table.n_w
        b3 = b3 + table.w_bytes
    if acts_l3:
        n3 = n3 + table.n_in + table.n_out
        b3 = b3 + table.in_bytes + table.out_bytes
    mdma = n3 * setup + np.ceil(b3 / hw.l3_dma_bytes_per_cycle).astype(np.int64)
    compute = compute_cycles(work.macs, hw)
    db = 2 * table.working_set <= hw.l1_bytes
    cycles = np.where(db, np.maximum(compute, cdma + mdma), compute + cdma + mdma)
    big = np.iinfo(np.int64).max
    keys = (table.order, table.tc, table.tw, table.th, n2 + n3, np.where(feasible, cycles, big))
    i = int(np.lexsort(keys)[0])
    return LayerPlan(
        work.name, work.kind,
        (int(table.th[i]), int(table.tw[i]), int(table.tc[i])), LOOP_ORDERS[int(table.order[i])],
        {"input": "L3" if acts_l3 else "L2",
         "weights": ("L3" if weights_l3 else "L2") if work.weight_bytes else "-",
         "output": "L3" if acts_l3 else "L2"},
        bool(db[i]), int(table.working_set[i]), float(work.macs),
        int(n2[i]), int(b2[i]), int(n3[i]), int(b3[i]),
        compute, int(cdma[i]), int(mdma[i]), int(cycles[i]),
    )


def compute_cycles(macs: float, hw: HardwareModel) -> int:
    return int(math.ceil(macs / (hw.cluster_cores * hw.effective_macs_per_core_cycle) - 1e-9))


class Planner:
    """Plans a fixed graph repeatedly under varying MAC rates (calibration)."""

    def __init__(self, graph: NetworkGraph, hw: HardwareModel):
        self.hw = hw
        self.works = tuple(layer_works(graph))
        self.weight_bytes, self.peak_act = footprint(graph)
        self.tables = [candidate_table(w) for w in self.works]
        self.acts_l3 = self.peak_act + hw.l2_staging_bytes > hw.l2_bytes
        budget = hw.l2_bytes - hw.l2_staging_bytes - (0 if self.acts_l3 else self.peak_act)
        self.placement: Dict[str, str] = {}
        self.resident = 0
        for w in self.works:
            if not w.weight_bytes:
                continue
            if self.resident + w.weight_bytes <= budget:
                self.resident += w.weight_bytes
                self.placement[w.name] = "L2"
            else:
                self.placement[w.name] = "L3"

    def plan(self, effective_macs_per_core_cycle: Optional[float] = None) -> TilePlan:
        hw = self.hw
        if effective_macs_per_core_cycle is not None:
            hw = replace(hw, effective_macs_per_core_cycle=effective_macs_per_core_cycle)
        layers = tuple(
            _choose(w, t, hw, self.placement.get(w.name) == "L3", self.acts_l3)
            for w, t in zip(self.works, self.tables)
        )
        peak_l1 = max((l.working_set * (2 if l.double_buffered else 1) for l in layers), default=0)
        peak_l2 = self.resident + hw.l2_staging_bytes * any(v == "L3" for v in self.placement.values())
        if not self.acts_l3:
            peak_l2 += self.peak_act
        return TilePlan(layers, hw, dict(self.placement), "L3" if self.acts_l3 else "L2",
                        peak_l1, peak_l2, self.weight_bytes, self.peak_act, self.works)


def plan_tiles(graph: NetworkGraph, hw: HardwareModel = HardwareModel()) -> TilePlan:
    return Planner(graph, hw).plan()


def _materialise(work: LayerWork, layer: LayerPlan):
    """Yield the per-tile transfers implied by a layer plan."""
    cin, hin, win = work.in_shape
    cout, hout, wout = work.out_shape
    th, tw, tc = layer.tile
    pl = layer.placement
    src_in = pl["input"]
    w_src = pl["weights"]
    per_out = work.weight_bytes // cout if work.kind == "conv" else 0

    def extents(out_len, tile, in_len):
        pad = work.kernel // 2
        for t in range(-(-out_len // tile)):
            o0, o1 = t * tile, min(out_len, (t + 1) * tile)
            if work.kind == "conv":
                yield o1 - o0, min(in_len, (o1 - 1) * work.stride - pad + work.kernel) - max(0, o0 * work.stride - pad)
            elif work.kind == "pool":
                yield o1 - o0, min(in_len, 2 * o1) - 2 * o0
            elif work.kind == "upsample":
                yield o1 - o0, (o1 - 1) // 2 + 1 - o0 // 2
            else:
                yield o1 - o0, o1 - o0

    rows = list(extents(hout, th, hin))
    cols = list(extents(wout, tw, win))
    chans = [min(tc, cout - c0) for c0 in range(0, cout, tc)]
    spatial = [(r, c) for r in rows for c in cols]

    def load(nbytes, what, src):
        if src == "L3":
            yield Transfer("L3", "L2", nbytes, what)
        yield Transfer("L2", "L1", nbytes, what)

    def store(nbytes):
        yield Transfer("L1", "L2", nbytes, "output")
        if pl["output"] == "L3":
            yield Transfer("L2", "L3", nbytes, "output")

    if work.kind == "conv":
        # a tile already resident in L1 is not reloaded
        if layer.loop_order == "channel_outer":
            for ic, c in enumerate(chans):
                yield from load(per_out * c, "weights", w_src)
                for (ro, ri), (co, ci) in spatial:
                    if len(spatial) > 1 or ic == 0:
                        yield from load(ri * ci * cin, "input", src_in)
                    yield from store(ro * co * c)
        else:
            for isp, ((ro, ri), (co, ci)) in enumerate(spatial):
                yield from load(ri * ci * cin, "input", src_in)
                for c in chans:
                    if len(chans) > 1 or isp == 0:
                        yield from load(per_out * c, "weights", w_src)
                    yield from store(ro * co * c)
        return
    if work.kind == "se":
        slices = _se_slices(work.weight_bytes, chans, cout)
        for excite in (0, 1):
            for ic, c in enumerate(chans):
                yield from load(slices[excite * len(chans) + ic], "weights", w_src)
                for (ro, ri), (co, ci) in spatial:
                    yield from load(ri * ci * c, "input", src_in)
                    if excite:
                        yield from store(ro * co * c)
        return
    for c in chans:
        for (ro, ri), (co, ci) in spatial:
            yield from load(ri * ci * c, "input", src_in)
            yield from store(ro * co * c)


# -- latency, calibration, traces -------------------------------------------------------

@dataclass(frozen=True)
class LatencyReport:
    cycles: int
    ms: float
    per_layer: Tuple[Tuple[str, int], ...]

    @property
    def inferences_per_second(self) -> float:
        return 1000.0 / self.ms if self.ms > 0 else float("inf")


def layer_cycles(layer: LayerPlan, hw: HardwareModel) -> Tuple[int, int, int, int]:
    """(compute, cdma, mdma, total) cycles of a planned layer under ``hw``."""
    setup = hw.dma_setup_cycles
    compute = compute_cycles(layer.macs, hw)
    cdma = layer.n_l2_transfers * setup + int(math.ceil(layer.l2_bytes / hw.l2_dma_bytes_per_cycle))
    mdma = layer.n_l3_transfers * setup + int(math.ceil(layer.l3_bytes / hw.l3_dma_bytes_per_cycle))
    if layer.double_buffered:
        total = max(compute, cdma + mdma)
    else:
        total = compute + cdma + mdma
    return compute, cdma, mdma, total


def predict_latency(plan: TilePlan, hw: Optional[HardwareModel] = None) -> LatencyReport:
    hw = hw or plan.hw
    per = tuple((l.name, layer_cycles(l, hw)[3]) for l in plan.layers)
    cycles = sum(c for _, c in per)
    return LatencyReport(cycles, cycles / hw.cluster_hz * 1000.0, per)


def calibrate(hw: HardwareModel, graph: NetworkGraph, measured_ms: float,
              rel_tol: float = 1e-3) -> HardwareModel:
    """Fit ``effective_macs_per_core_cycle`` so the planned latency hits ``measured_ms``.

    Returns ``hw`` unchanged when the current prediction is already within 1%.
    """
    if not measured_ms > 0:
        raise ValueError("measured_ms must be positive")
    planner = Planner(graph, hw)

    def latency(rate):
        plan = planner.plan(rate)
        return predict_latency(plan).ms

    current = latency(hw.effective_macs_per_core_cycle)
    if abs(current - measured_ms) <= 0.01 * measured_ms:
        return hw
    # latency is non-increasing in the MAC rate: bracket, then bisect in log space
    lo = hi = hw.effective_macs_per_core_cycle
    if current > measured_ms:
        for _ in range(60):
            hi *= 2
            if latency(hi) <= measured_ms:
                break
        else:
            raise PlanningError(f"cannot reach {measured_ms} ms: transfer time alone exceeds it")
    else:
        for _ in range(60):
            lo /= 2
            if latency(lo) >= measured_ms:
                break
        else:
            raise PlanningError(f"cannot slow the model to {measured_ms} ms")
    for _ in range(100):
        mid = math.sqrt(lo * hi)
        ms = latency(mid)
        if abs(ms - measured_ms) <= rel_tol * measured_ms:
            return replace(hw, effective_macs_per_core_cycle=mid)
        if ms > measured_ms:
            lo = mid
        else:
            hi = mid
    rate = math.sqrt(lo * hi)
    if abs(latency(rate) - measured_ms) > 0.01 * measured_ms:
        raise PlanningError(f"calibration to {measured_ms} ms did not converge")
    return replace(hw, effective_macs_per_core_cycle=rate)


@dataclass(frozen=True)
class TraceEvent:
    start_cycle: int
    end_cycle: int
    unit: str
    label: str


@dataclass(frozen=True)
class TraceSummary:
    total_cycles: int
    busy_fraction: Dict[str, float]

    @property
    def mdma_share(self) -> float:
        return self.busy_fraction.get("MDMA", 0.0)


def emit_trace(plan: TilePlan, hw: Optional[HardwareModel] = None) -> Tuple[List[TraceEvent], TraceSummary]:
    """One event per layer per busy unit.

    Non-double-buffered layers run MDMA, then CDMA, then compute; double
    buffered layers start compute and MDMA together with CDMA after MDMA.
    """
    hw = hw or plan.hw
    units = [f"core{i}" for i in range(hw.cluster_cores)] + ["CDMA", "MDMA"]
    events: List[TraceEvent] = []
    busy = {u: 0 for u in units}
    t0 = 0
    for layer in plan.layers:
        compute, cdma, mdma, total = layer_cycles(layer, hw)
        if layer.double_buffered:
            spans = [("MDMA", t0, t0 + mdma), ("CDMA", t0 + mdma, t0 + mdma + cdma)]
            core_span = (t0, t0 + compute)
        else:
            spans = [("MDMA", t0, t0 + mdma), ("CDMA", t0 + mdma, t0 + mdma + cdma)]
            core_span = (t0 + mdma + cdma, t0 + mdma + cdma + compute)
        spans += [(f"core{i}",) + core_span for i in range(hw.cluster_cores)]
        activity = {"MDMA": "l3-transfer", "CDMA": "l2-transfer"}
        for unit, s, e in spans:
            if e > s:
                events.append(TraceEvent(s, e, unit, f"{layer.name} {activity.get(unit, 'compute')}"))
                busy[unit] += e - s
        t0 += total
    events.sort(key=lambda ev: (ev.start_cycle, units.index(ev.unit)))
    frac = {u: (busy[u] / t0 if t0 else 0.0) for u in units}
    return events, TraceSummary(t0, frac)


TRACE_HEADER = ("start_cycle", "end_cycle", "unit", "label")


def write_trace_csv(events: Sequence[TraceEvent], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for ev in events:
            w.writerow((ev.start_cycle, ev.end_cycle, ev.unit, ev.label))


def read_trace_csv(path) -> List[TraceEvent]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != TRACE_HEADER:
        raise ValueError(f"{path}: missing trace header")
    return [TraceEvent(int(a), int(b), u, l) for a, b, u, l in rows[1:]]
