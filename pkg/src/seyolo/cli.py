"""``seyolo`` command line: model-info, init-weights, infer, eval, plan,
bench-report, quantize, synth-data.

Exit codes: 0 ok, 2 usage, 3 bad input data, 4 model/weights problem,
5 planning failure.  ``SEYOLO_THREADS`` caps the worker count.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .bench import BenchInputs, bench_report, compare
from .detect import DEFAULT_CONF_THRESHOLD, DEFAULT_IOU_THRESHOLD, Detection, decode_heads, nms
from .evalkit import LabelFormatError, generate_shapes_dataset, load_dataset, map_eval
from .graph import (
    NECK8_RESOLUTION,
    NetConfig,
    build_squeezed_edge_yolo,
    count_ops,
    count_params,
    execute,
    heads_as_float,
    infer_shapes,
    node_ops,
)
from .kernels import ShapeError, param_count
from .memplan import (
    HardwareConfigError,
    HardwareModel,
    Planner,
    PlanningError,
    calibrate,
    emit_trace,
    footprint,
    predict_latency,
    write_trace_csv,
)
from .modelio import ArchiveError, init_random_weights, load_model, save_weights, zero_weights
from .ppm import PPMError, draw_boxes, read_ppm, resize_nearest, to_chw_float, write_ppm
from .ptq import calibrated_random_weights, quantize_graph
from .qtensor import UncalibratedError

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_MODEL, EXIT_PLAN = 0, 2, 3, 4, 5


class InputError(Exception):
    pass


class ModelError(Exception):
    pass


def worker_count() -> int:
    n = os.cpu_count() or 1
    cap = os.environ.get("SEYOLO_THREADS")
    if cap:
        try:
            cap_n = int(cap)
        except ValueError:
            raise ValueError(f"SEYOLO_THREADS must be a positive integer, got {cap!r}") from None
        if cap_n < 1:
            raise ValueError(f"SEYOLO_THREADS must be a positive integer, got {cap!r}")
        n = min(n, cap_n)
    return n


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def _config(args) -> NetConfig:
    return NetConfig(num_classes=args.classes, param_factor=args.scale, neck8_resolution=args.neck8)


def _load(path, mode: Optional[str] = None):
    if not Path(path).is_file():
        raise InputError(f"weights file {path} not found")
    graph = load_model(path)
    if mode is not None and graph.mode != mode:
        raise ModelError(f"{path} holds {graph.mode} weights; run with --mode {graph.mode} or quantize first")
    return graph


def _read_image(path, size: int) -> np.ndarray:
    """HxWx3 uint8 image resized to the network input."""
    if not Path(path).is_file():
        raise InputError(f"image {path} not found")
    return resize_nearest(read_ppm(path), size)


def _image_paths(root) -> List[Path]:
    root = Path(root)
    if (root / "manifest.txt").is_file():
        return [item.image_path for item in load_dataset(root)]
    if root.is_dir():
        return sorted(root.glob("*.ppm"))
    raise InputError(f"{root} is not a directory")


def _detect(graph, img_chw, conf: float, iou: float, n_jobs: int) -> List[Detection]:
    heads = heads_as_float(execute(graph, img_chw, n_jobs=n_jobs))
    return nms(decode_heads(heads, graph.config, conf), iou)


# -- commands ------------------------------------------------------------------------

def cmd_model_info(args) -> int:
    graph = build_squeezed_edge_yolo(_config(args))
    shapes = infer_shapes(graph)
    rows = []
    for node in graph.nodes:
        if node.kind == "Detect":
            for h, stem in enumerate(node.spec.stems):
                rows.append({"name": f"{node.name}.head{h}", "kind": "Detect", "output": str(shapes[node.id + (h,)]),
                             "params": param_count(stem)})
            continue
        params = param_count(node.spec) if node.kind in ("Conv", "SE") else 0
        rows.append({"name": node.name, "kind": node.kind, "output": str(shapes[node.id]), "params": params,
                     "ops": node_ops(node, shapes)})
    params = count_params(graph)
    weights, peak = footprint(graph)
    summary = {
        "params": params,
        "size_mbit_8bit": params * 8 / 1e6,
        "gop_per_inference": count_ops(graph) / 1e9,
        "input_bytes": graph.config.input_shape.size,
        "weight_bytes": weights,
        "peak_activation_bytes": peak,
        "scale": args.scale,
        "classes": args.classes,
        "layers": rows,
    }
    if args.json:
        print(_dumps(summary))
        return EXIT_OK
    for r in rows:
        print(f"{r['name']:<16} {r['kind']:<9} {r['output']:>12} {r['params']:>9}")
    print(f"params {params}  size {summary['size_mbit_8bit']:.3f} Mbit (8-bit)  "
          f"GOP {summary['gop_per_inference']:.4f}")
    print(f"footprint: input {summary['input_bytes']} B, weights {weights} B, peak activations {peak} B")
    return EXIT_OK


def cmd_init_weights(args) -> int:
    graph = build_squeezed_edge_yolo(_config(args))
    if args.zero:
        bound = zero_weights(graph)
        how = "zero"
    elif args.calibrate_on:
        paths = _image_paths(args.calibrate_on)[: args.limit]
        if not paths:
            raise InputError(f"no images in {args.calibrate_on}")
        size = graph.config.input_shape.height
        images = [to_chw_float(_read_image(p, size)) for p in paths]
        bound = calibrated_random_weights(graph, images, args.seed)
        how = "calibrated-random"
    else:
        bound = init_random_weights(graph, args.seed)
        how = "random"
    save_weights(bound, args.out)
    info = {"out": str(args.out), "init": how, "seed": args.seed, "params": count_params(graph)}
    print(_dumps(info) if args.json else f"wrote {how} float weights ({info['params']} params) to {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    graph = _load(args.weights, args.mode)
    img = _read_image(args.image, graph.config.input_shape.height)
    dets = _detect(graph, to_chw_float(img), args.conf, args.iou, worker_count())
    if args.annotate:
        write_ppm(args.annotate, draw_boxes(img, dets))
    for d in dets:
        if args.json:
            print(_dumps(d.to_json()))
        else:
            cx, cy, w, h = d.box
            print(f"class {d.class_id} score {d.score:.4f} box {cx:.4f} {cy:.4f} {w:.4f} {h:.4f}")
    if not args.json:
        print(f"{len(dets)} detection(s)")
    return EXIT_OK


def _read_detections(path, keys: Sequence[str]) -> Dict[str, List[Detection]]:
    if not Path(path).is_file():
        raise InputError(f"detections file {path} not found")
    out: Dict[str, List[Detection]] = {k: [] for k in keys}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            det = Detection(int(d["class"]), float(d["score"]),
                            (float(d["cx"]), float(d["cy"]), float(d["w"]), float(d["h"])))
            key = str(d["image"])
        except (ValueError, KeyError, TypeError) as exc:
            raise InputError(f"{path}:{lineno}: bad detection record ({exc})") from None
        out.setdefault(key, []).append(det)
    return out


def cmd_eval(args) -> int:
    if not Path(args.dataset).is_dir():
        raise InputError(f"dataset directory {args.dataset} not found")
    items = load_dataset(args.dataset)
    keys = [it.key for it in items]
    gts = {it.key: list(it.ground_truths) for it in items}
    if args.detections:
        preds = _read_detections(args.detections, keys)
        unknown = sorted(set(preds) - set(keys))
        if unknown:
            raise InputError(f"detections reference unknown images: {', '.join(unknown[:5])}")
        num_classes = args.classes
    else:
        if not args.weights:
            raise InputError("eval needs --weights or --detections")
        graph = _load(args.weights, args.mode)
        num_classes = graph.config.num_classes
        size = graph.config.input_shape.height

        def run(item):
            img = to_chw_float(_read_image(item.image_path, size))
            return _detect(graph, img, args.conf, args.iou, 1)

        with ThreadPoolExecutor(max_workers=worker_count()) as pool:
            preds = dict(zip(keys, pool.map(run, items)))
    try:
        report = map_eval(preds, gts, num_classes, args.map_iou)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    out = report.to_json()
    out["images"] = len(items)
    if args.json:
        print(_dumps(out))
        return EXIT_OK
    for c, row in out["classes"].items():
        ap = "n/a" if row["ap"] is None else f"{row['ap']:.4f}"
        print(f"class {c}: AP {ap}  TP {row['tp']}  FP {row['fp']}  FN {row['fn']}")
    m = "n/a" if out["mAP"] is None else f"{out['mAP']:.4f}"
    print(f"mAP@{args.map_iou:g} {m} over {len(items)} image(s)")
    return EXIT_OK


def cmd_plan(args) -> int:
    hw = HardwareModel.from_file(args.hw) if args.hw else HardwareModel()
    base_cfg = NetConfig(num_classes=args.classes, neck8_resolution=args.neck8)
    if args.calibrate_ms is not None:
        hw = calibrate(hw, build_squeezed_edge_yolo(base_cfg), args.calibrate_ms)
    graph = build_squeezed_edge_yolo(replace(base_cfg, param_factor=args.scale))
    plan = Planner(graph, hw).plan()
    lat = predict_latency(plan)
    events, summary = emit_trace(plan)
    if args.trace:
        write_trace_csv(events, args.trace)
    if args.save_hw:
        Path(args.save_hw).write_text(hw.to_text())
    out = {
        "scale": args.scale,
        "params": count_params(graph),
        "effective_macs_per_core_cycle": hw.effective_macs_per_core_cycle,
        "peak_l1_bytes": plan.peak_l1_bytes,
        "peak_l2_bytes": plan.peak_l2_bytes,
        "l3_traffic_bytes": plan.l3_traffic_bytes,
        "l2_traffic_bytes": plan.l2_traffic_bytes,
        "l3_weight_layers": sorted(k for k, v in plan.weight_placement.items() if v == "L3"),
        "activation_level": plan.activation_level,
        "cycles": lat.cycles,
        "ms": lat.ms,
        "inferences_per_second": lat.inferences_per_second,
        "busy_fraction": {u: summary.busy_fraction[u] for u in ("CDMA", "MDMA")},
        "core_busy_fraction": summary.busy_fraction.get("core0", 0.0),
        "mdma_share": summary.mdma_share,
        "trace_events": len(events),
    }
    if args.json:
        out["layers"] = [
            {"name": l.name, "kind": l.kind, "tile": list(l.tile), "loop_order": l.loop_order,
             "placement": l.placement, "double_buffered": l.double_buffered, "working_set": l.working_set,
             "cycles": l.cycles, "l3_bytes": l.l3_bytes}
            for l in plan.layers
        ]
        print(_dumps(out))
        return EXIT_OK
    print(f"scale {args.scale:g}x  params {out['params']}  MAC rate {hw.effective_macs_per_core_cycle:.4f}/core/cycle")
    print(f"peak L1 {plan.peak_l1_bytes} B  peak L2 {plan.peak_l2_bytes} B  activations in {plan.activation_level}")
    print(f"L3 traffic {plan.l3_traffic_bytes} B  L2 traffic {plan.l2_traffic_bytes} B")
    print(f"predicted {lat.cycles} cycles = {lat.ms:.2f} ms ({lat.inferences_per_second:.2f} inf/s)")
    print(f"busy: cores {out['core_busy_fraction']:.3f}  CDMA {out['busy_fraction']['CDMA']:.4f}  "
          f"MDMA {out['busy_fraction']['MDMA']:.4f}")
    if args.trace:
        print(f"trace: {len(events)} events -> {args.trace}")
    return EXIT_OK


def _bench_inputs(args, side: str, default_gop: float) -> BenchInputs:
    g = lambda name: getattr(args, f"{side}_{name}")
    gop, gops = g("gop"), g("gops")
    if gop is None and gops is None:
        gop = default_gop
    try:
        return BenchInputs(side, g("latency"), g("cpu_mw"), g("gpu_mw"), gop, gops, g("reported_efficiency"))
    except ValueError as exc:
        raise InputError(f"{side}: {exc}") from None


def cmd_bench_report(args) -> int:
    default_gop = count_ops(build_squeezed_edge_yolo(_config(args))) / 1e9
    base = bench_report(_bench_inputs(args, "baseline", default_gop))
    cand = bench_report(_bench_inputs(args, "candidate", default_gop))
    cmp_ = compare(base, cand)
    out = {"baseline": base.to_json(), "candidate": cand.to_json(), "comparison": cmp_.to_json()}
    if args.json:
        print(_dumps(out))
        return EXIT_OK
    for r in (base, cand):
        eff = "n/a" if r.energy_efficiency_gops_per_j is None else f"{r.energy_efficiency_gops_per_j:.1f}"
        gops = "n/a" if r.performance_gops is None else f"{r.performance_gops:.2f}"
        print(f"{r.label:<9} {r.throughput:7.2f} inf/s  {r.energy_per_inference_mj:8.1f} mJ/inf  "
              f"{gops} GOPS ({r.gops_source})  {eff} GOPS/J")
        if r.efficiency_consistent is False:
            print(f"  warning: reported efficiency {r.reported_efficiency:g} GOPS/J is inconsistent "
                  f"with this row (computed {r.energy_efficiency_gops_per_j:.1f})")
    print(f"speedup {cmp_.speedup:.2f}x  energy improvement {cmp_.energy_improvement_pct:.1f}%")
    return EXIT_OK


def cmd_quantize(args) -> int:
    graph = _load(args.weights, "float")
    paths = _image_paths(args.calib)[: args.limit]
    if not paths:
        raise InputError(f"empty calibration set: no images in {args.calib}")
    size = graph.config.input_shape.height
    images = [to_chw_float(_read_image(p, size)) for p in paths]
    try:
        q = quantize_graph(graph, images)
    except UncalibratedError as exc:
        raise InputError(str(exc)) from None
    save_weights(q, args.out)
    info = {"out": str(args.out), "calibration_images": len(images), "mode": "int8"}
    print(_dumps(info) if args.json else f"wrote int8 archive calibrated on {len(images)} image(s) to {args.out}")
    return EXIT_OK


def cmd_synth_data(args) -> int:
    items = generate_shapes_dataset(args.n, args.seed, args.size, args.out)
    counts = [0, 0, 0]
    for it in items:
        for g in it.ground_truths:
            counts[g.class_id] += 1
    info = {"out": str(args.out), "images": len(items), "objects_per_class": counts, "seed": args.seed}
    print(_dumps(info) if args.json else f"wrote {len(items)} images ({sum(counts)} objects) to {args.out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------

def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _nonneg_float(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {text}")
    return v


def _scale(text: str) -> float:
    v = float(text)
    if not v >= 1:
        raise argparse.ArgumentTypeError(f"scale must be >= 1, got {text}")
    return v


def _probability(text: str) -> float:
    v = float(text)
    if not 0 <= v <= 1:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {text}")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _model_flags(p, scale=True):
    if scale:
        p.add_argument("--scale", type=_scale, default=1.0, help="parameter growth factor (default 1)")
    p.add_argument("--classes", type=_positive_int, default=3, help="number of object classes (default 3)")
    p.add_argument("--neck8", choices=("filters", "output"), default=NECK8_RESOLUTION,
                   help="which column to trust for neck row 8 (default %(default)s)")


def _threshold_flags(p):
    p.add_argument("--mode", choices=("float", "int8"), help="required execution mode (default: archive's)")
    p.add_argument("--conf", type=_probability, default=DEFAULT_CONF_THRESHOLD, help="confidence threshold")
    p.add_argument("--iou", type=_probability, default=DEFAULT_IOU_THRESHOLD, help="NMS IoU threshold")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seyolo", description="Int8 Squeezed Edge YOLO engine and planner")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--json", action="store_true", help="machine-readable output")
        p.set_defaults(func=fn)
        return p

    p = add("model-info", cmd_model_info, "layer table, parameter count, GOP and memory footprint")
    _model_flags(p)

    p = add("init-weights", cmd_init_weights, "write a float weight archive (random, calibrated random or zero)")
    _model_flags(p)
    p.add_argument("--out", required=True, help="output .seyw path")
    p.add_argument("--seed", type=int, default=0)
    init = p.add_mutually_exclusive_group()
    init.add_argument("--zero", action="store_true", help="all-zero weights")
    init.add_argument("--calibrate-on", metavar="DIR", help="rescale random weights on these images")
    p.add_argument("--limit", type=_positive_int, default=16, help="images used by --calibrate-on (default 16)")

    p = add("infer", cmd_infer, "detect objects in one PPM image")
    p.add_argument("image")
    p.add_argument("--weights", required=True)
    _threshold_flags(p)
    p.add_argument("--annotate", metavar="OUT.ppm", help="write a copy of the image with boxes drawn")

    p = add("eval", cmd_eval, "per-class AP and mAP over a labelled dataset")
    p.add_argument("dataset")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--weights")
    src.add_argument("--detections", metavar="FILE.jsonl", help="score precomputed detections instead of a model")
    _threshold_flags(p)
    p.add_argument("--classes", type=_positive_int, default=3, help="class count for --detections (default 3)")
    p.add_argument("--map-iou", type=_probability, default=0.5, help="IoU for a true positive (default 0.5)")

    p = add("plan", cmd_plan, "tile the network for the memory hierarchy and predict latency")
    _model_flags(p)
    p.add_argument("--hw", metavar="CONFIG", help="key = value hardware file")
    p.add_argument("--calibrate-ms", type=_positive_float, help="fit the MAC rate so the 1x model takes this long")
    p.add_argument("--trace", metavar="OUT.csv", help="write the occupancy trace")
    p.add_argument("--save-hw", metavar="OUT", help="write the (calibrated) hardware config")

    p = add("bench-report", cmd_bench_report, "throughput / energy / efficiency arithmetic for two models")
    _model_flags(p)
    for side in ("baseline", "candidate"):
        p.add_argument(f"--{side}-latency", type=_positive_float, required=True, help="ms per inference")
        p.add_argument(f"--{side}-cpu-mw", type=_nonneg_float, required=True)
        p.add_argument(f"--{side}-gpu-mw", type=_nonneg_float, default=0.0)
        p.add_argument(f"--{side}-gop", type=_positive_float, help="GOP per inference (default: this graph's)")
        p.add_argument(f"--{side}-gops", type=_positive_float, help="measured GOPS; overrides --gop")
        p.add_argument(f"--{side}-reported-efficiency", type=_positive_float,
                       help="published GOPS/J to check against the arithmetic")

    p = add("quantize", cmd_quantize, "calibrate a float archive on images and write an int8 archive")
    p.add_argument("--weights", required=True, help="float .seyw archive")
    p.add_argument("--calib", required=True, help="dataset directory or directory of .ppm images")
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=_positive_int, help="use at most this many images")

    p = add("synth-data", cmd_synth_data, "render a labelled synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=_positive_int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_positive_int, default=128)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (InputError, PPMError, LabelFormatError, HardwareConfigError, OSError) as exc:
        return _fail(exc, EXIT_INPUT)
    except (ModelError, ArchiveError, ShapeError) as exc:
        return _fail(exc, EXIT_MODEL)
    except PlanningError as exc:
        return _fail(exc, EXIT_PLAN)
    except ValueError as exc:  # configuration values rejected by constructors
        return _fail(exc, EXIT_USAGE)


def _fail(exc: Exception, code: int) -> int:
    print(f"seyolo: error: {exc}", file=sys.stderr)
    return code

if __name__ == "__main__":
    sys.exit(main())
