"""Int8 Squeezed Edge YOLO inference engine, memory-hierarchy tiling planner,
mAP evaluation harness and benchmark arithmetic."""

__version__ = "0.1.0"

from .bench import BenchInputs, BenchReport, bench_report, compare
from .detect import Detection, GroundTruthBox, decode, iou, nms
from .estimator import SqueezedEdgeYOLO, check_ground_truths, check_images
from .evalkit import EvalReport, average_precision, generate_shapes_dataset, map_eval
from .graph import NetConfig, NetworkGraph, build_squeezed_edge_yolo, count_ops, count_params, execute, infer_shapes
from .memplan import HardwareModel, TilePlan, calibrate, emit_trace, footprint, plan_tiles, predict_latency
from .modelio import init_random_weights, load_model, load_weights, save_weights
from .ptq import calibrated_random_weights, quantize_graph
from .qtensor import FloatTensor, QuantizedTensor, QuantParams, TensorShape, compute_qparams, dequantize, quantize, requantize

__all__ = [
    "BenchInputs", "BenchReport", "bench_report", "compare",
    "Detection", "GroundTruthBox", "decode", "iou", "nms",
    "SqueezedEdgeYOLO", "check_ground_truths", "check_images",
    "EvalReport", "average_precision", "generate_shapes_dataset", "map_eval",
    "NetConfig", "NetworkGraph", "build_squeezed_edge_yolo", "count_ops", "count_params", "execute", "infer_shapes",
    "HardwareModel", "TilePlan", "calibrate", "emit_trace", "footprint", "plan_tiles", "predict_latency",
    "init_random_weights", "load_model", "load_weights", "save_weights",
    "calibrated_random_weights", "quantize_graph",
    "FloatTensor", "QuantizedTensor", "QuantParams", "TensorShape", "compute_qparams", "dequantize", "quantize",
    "requantize",
]
