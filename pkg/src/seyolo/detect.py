"""Head decoding and per-class non-maximum suppression."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

Box = Tuple[float, float, float, float]  # cx, cy, w, h (normalized)

DEFAULT_CONF_THRESHOLD = 0.25
DEFAULT_IOU_THRESHOLD = 0.45


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: Box

    def to_json(self) -> dict:
        cx, cy, w, h = self.box
        return {"class": self.class_id, "score": self.score, "cx": cx, "cy": cy, "w": w, "h": h}


@dataclass(frozen=True)
class GroundTruthBox:
    class_id: int
    box: Box


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def decode(head, anchors: Sequence[Tuple[float, float]], grid: int,
           conf_threshold: float = DEFAULT_CONF_THRESHOLD, image_size: int = 128) -> List[Detection]:
    """Turn one head's (A*(5+C), G, G) logits into detections.

    Channel layout per anchor: tx, ty, tw, th, objectness, class logits.
    Detections come out in (row, column, anchor) order.
    """
    head = np.asarray(head, dtype=np.float64)
    n_anchor = len(anchors)
    if head.ndim != 3 or head.shape[1] != grid or head.shape[2] != grid:
        raise ValueError(f"head shape {head.shape} does not match a {grid}x{grid} grid")
    per = head.shape[0] // n_anchor if n_anchor else 0
    if n_anchor == 0 or per < 6 or per * n_anchor != head.shape[0]:
        raise ValueError(f"head has {head.shape[0]} channels, not a multiple of {n_anchor} anchors x (5 + classes)")
    t = head.reshape(n_anchor, per, grid, grid)
    jj, ii = np.meshgrid(np.arange(grid), np.arange(grid))
    aw = np.array([a[0] for a in anchors], dtype=np.float64)[:, None, None]
    ah = np.array([a[1] for a in anchors], dtype=np.float64)[:, None, None]
    cx = (_sigmoid(t[:, 0]) + jj) / grid
    cy = (_sigmoid(t[:, 1]) + ii) / grid
    w = aw * np.exp(t[:, 2]) / image_size
    h = ah * np.exp(t[:, 3]) / image_size
    cls_prob = _sigmoid(t[:, 5:])
    best = np.argmax(cls_prob, axis=1)
    score = _sigmoid(t[:, 4]) * np.max(cls_prob, axis=1)

    dets = []
    # (anchor, row, col) -> emit in row, col, anchor order
    for i, j, a in zip(*np.nonzero((score >= conf_threshold).transpose(1, 2, 0))):
        dets.append(Detection(
            int(best[a, i, j]), float(score[a, i, j]),
            (float(cx[a, i, j]), float(cy[a, i, j]), float(w[a, i, j]), float(h[a, i, j])),
        ))
    return dets


def decode_heads(heads, config, conf_threshold: float = DEFAULT_CONF_THRESHOLD) -> List[Detection]:
    """Decode both heads of the network with the config's anchors."""
    size = config.input_shape.height
    out: List[Detection] = []
    for head, anchors in zip(heads, config.anchors):
        head = np.asarray(head)
        out.extend(decode(head, anchors, head.shape[1], conf_threshold, size))
    return out


def to_corners(box: Box):
    cx, cy, w, h = box
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def iou(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = to_corners(a)
    bx0, by0, bx1, by1 = to_corners(b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from the same corners as the intersection, so iou(a, a) is exactly 1
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return float(min(1.0, max(0.0, inter / union)))


def nms(dets: Sequence[Detection], iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> List[Detection]:
    """Greedy same-class suppression.

    Candidates are visited by score descending, ties broken by lower class id
    then input order; the output keeps that order.
    """
    order = sorted(range(len(dets)), key=lambda k: (-dets[k].score, dets[k].class_id, k))
    kept: List[Detection] = []
    by_class = {}
    for k in order:
        d = dets[k]
        same = by_class.setdefault(d.class_id, [])
        if all(iou(d.box, o.box) < iou_threshold for o in same):
            same.append(d)
            kept.append(d)
    return kept
