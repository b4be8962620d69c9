"""scikit-learn style wrapper: fit binds and calibrates weights, predict detects,
score reports mAP."""
from __future__ import annotations

from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .detect import DEFAULT_CONF_THRESHOLD, DEFAULT_IOU_THRESHOLD, Detection, GroundTruthBox, decode_heads, nms
from .evalkit import map_eval
from .graph import NECK8_RESOLUTION, NetConfig, NetworkGraph, build_squeezed_edge_yolo, execute, heads_as_float
from .modelio import load_model
from .ppm import resize_nearest, to_chw_float
from .ptq import calibrated_random_weights, quantize_graph


def check_images(X, size: int) -> List[np.ndarray]:
    """Normalise a batch to a list of CHW float arrays in [0, 1].

    Accepts uint8 HxWx3 images (resized nearest-neighbour to ``size``) or
    float CHW arrays already at ``size``.
    """
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = [X]
    out = []
    for k, img in enumerate(X):
        img = np.asarray(img)
        if img.dtype == np.uint8:
            if img.ndim != 3 or img.shape[2] != 3:
                raise ValueError(f"image {k}: expected HxWx3 uint8, got shape {img.shape}")
            out.append(to_chw_float(resize_nearest(img, size)))
        else:
            if img.shape != (3, size, size):
                raise ValueError(f"image {k}: expected float shape (3, {size}, {size}), got {img.shape}")
            img = img.astype(np.float64)
            if not np.isfinite(img).all() or img.min() < 0 or img.max() > 1:
                raise ValueError(f"image {k}: float pixels must be finite and in [0, 1]")
            out.append(img)
    if not out:
        raise ValueError("empty image batch")
    return out


def check_ground_truths(y, n_images: int, num_classes: int) -> List[List[GroundTruthBox]]:
    if len(y) != n_images:
        raise ValueError(f"got {len(y)} label lists for {n_images} images")
    out = []
    for k, gts in enumerate(y):
        row = []
        for g in gts:
            if not isinstance(g, GroundTruthBox):
                g = GroundTruthBox(int(g[0]), tuple(float(v) for v in g[1:5]))
            if not 0 <= g.class_id < num_classes:
                raise ValueError(f"image {k}: class id {g.class_id} out of range")
            row.append(g)
        out.append(row)
    return out


class SqueezedEdgeYOLO(BaseEstimator):
    """Int8 (or float) Squeezed Edge YOLO detector.

    ``fit`` needs no labels.  With ``weights`` it loads an archive (a float
    archive is quantized on ``X`` in int8 mode); without, it draws calibrated
    random weights on ``X``.
    """

    def __init__(self, weights: Optional[str] = None, mode: str = "int8", num_classes: int = 3,
                 param_factor: float = 1.0, neck8_resolution: str = NECK8_RESOLUTION, seed: int = 0,
                 conf_threshold: float = DEFAULT_CONF_THRESHOLD, iou_threshold: float = DEFAULT_IOU_THRESHOLD,
                 n_jobs: Optional[int] = None):
        self.weights = weights
        self.mode = mode
        self.num_classes = num_classes
        self.param_factor = param_factor
        self.neck8_resolution = neck8_resolution
        self.seed = seed
        self.conf_threshold = conf_threshold
        self.iou_threshold = iou_threshold
        self.n_jobs = n_jobs

    def _config(self) -> NetConfig:
        return NetConfig(num_classes=self.num_classes, param_factor=self.param_factor,
                         neck8_resolution=self.neck8_resolution)

    def fit(self, X, y=None):
        if self.mode not in ("float", "int8"):
            raise ValueError(f"mode must be 'float' or 'int8', got {self.mode!r}")
        if self.weights is not None:
            graph = load_model(self.weights)
        else:
            cfg = self._config()
            images = check_images(X, cfg.input_shape.height)
            graph = calibrated_random_weights(build_squeezed_edge_yolo(cfg), images, self.seed,
                                              conf_threshold=self.conf_threshold)
        size = graph.config.input_shape.height
        if graph.mode == "float" and self.mode == "int8":
            graph = quantize_graph(graph, check_images(X, size))
        elif graph.mode != self.mode:
            raise ValueError(f"archive holds {graph.mode} weights, cannot run in {self.mode} mode")
        self.graph_: NetworkGraph = graph
        self.config_: NetConfig = graph.config
        return self

    def predict(self, X) -> List[List[Detection]]:
        check_is_fitted(self, "graph_")
        out = []
        for img in check_images(X, self.config_.input_shape.height):
            heads = heads_as_float(execute(self.graph_, img, n_jobs=self.n_jobs))
            out.append(nms(decode_heads(heads, self.config_, self.conf_threshold), self.iou_threshold))
        return out

    def score(self, X, y, iou_threshold: float = 0.5) -> float:
        """mAP at ``iou_threshold`` over classes that have ground truth."""
        preds = self.predict(X)
        gts = check_ground_truths(y, len(preds), self.config_.num_classes)
        keys = [f"{k:05d}" for k in range(len(preds))]
        report = map_eval(dict(zip(keys, preds)), dict(zip(keys, gts)), self.config_.num_classes, iou_threshold)
        return report.map
