"""Synthetic shapes dataset, YOLO-style label I/O and VOC-style AP / mAP."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .detect import Detection, GroundTruthBox, iou
from .ppm import read_ppm, write_ppm

SHAPE_CLASSES = ("circle", "square", "triangle")


class LabelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledImage:
    image_path: Path
    ground_truths: Tuple[GroundTruthBox, ...]

    @property
    def key(self) -> str:
        return self.image_path.stem


# -- labels ------------------------------------------------------------------------

def format_label(gts: Sequence[GroundTruthBox]) -> str:
    return "".join(f"{g.class_id} {g.box[0]:.6f} {g.box[1]:.6f} {g.box[2]:.6f} {g.box[3]:.6f}\n" for g in gts)


def parse_label_file(path) -> List[GroundTruthBox]:
    path = Path(path)
    gts = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        try:
            if len(parts) != 5:
                raise ValueError(f"expected 5 fields, got {len(parts)}")
            cls = int(parts[0])
            box = tuple(float(p) for p in parts[1:])
            if cls < 0:
                raise ValueError("negative class id")
            if not all(0.0 <= v <= 1.0 for v in box) or box[2] <= 0 or box[3] <= 0:
                raise ValueError("box outside [0, 1] or with zero extent")
        except ValueError as exc:
            raise LabelFormatError(f"{path}:{lineno}: {exc}") from None
        gts.append(GroundTruthBox(cls, box))
    return gts


def load_dataset(root) -> List[LabeledImage]:
    """Read ``manifest.txt`` (``images/NNNNN.ppm labels/NNNNN.txt`` per line)."""
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.is_file():
        raise FileNotFoundError(f"{manifest} not found")
    items = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise LabelFormatError(f"{manifest}: malformed line {line!r}")
        items.append(LabeledImage(root / parts[0], tuple(parse_label_file(root / parts[1]))))
    return items


# -- synthetic data ---------------------------------------------------------------

def _shape_mask(cls: int, x0: int, y0: int, side: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    px, py = xx + 0.5, yy + 0.5
    if cls == 0:
        r = side / 2
        return (px - (x0 + r)) ** 2 + (py - (y0 + r)) ** 2 <= r * r
    inside = (px >= x0) & (px < x0 + side) & (py >= y0) & (py < y0 + side)
    if cls == 1:
        return inside
    # upward isosceles triangle: apex at top centre
    rel = (py - y0) / side
    half = rel * side / 2
    cx = x0 + side / 2
    return inside & (np.abs(px - cx) <= half)


def _mask_box(mask: np.ndarray, size: int) -> Tuple[float, float, float, float]:
    ys, xs = np.nonzero(mask)
    x0, x1, y0, y1 = xs.min(), xs.max() + 1, ys.min(), ys.max() + 1
    return ((x0 + x1) / 2 / size, (y0 + y1) / 2 / size, (x1 - x0) / size, (y1 - y0) / size)


def render_shapes_image(rng: np.random.Generator, size: int):
    """One noisy image with 1-4 non-overlapping shapes and their exact boxes."""
    bg = rng.integers(20, 110, size=3)
    img = bg[None, None, :] + rng.normal(0, 10, size=(size, size, 3))
    gts: List[GroundTruthBox] = []
    taken: List[Tuple[int, int, int]] = []
    for _ in range(int(rng.integers(1, 5))):
        for _attempt in range(50):
            side = int(rng.integers(max(4, size // 10), max(5, size // 3) + 1))
            x0 = int(rng.integers(0, size - side + 1))
            y0 = int(rng.integers(0, size - side + 1))
            if all(x0 + side + 1 <= tx or tx + ts + 1 <= x0 or y0 + side + 1 <= ty or ty + ts + 1 <= y0
                   for tx, ty, ts in taken):
                break
        else:
            continue
        cls = int(rng.integers(0, len(SHAPE_CLASSES)))
        mask = _shape_mask(cls, x0, y0, side, size)
        if not mask.any():
            continue
        color = rng.integers(150, 256, size=3)
        img[mask] = color
        taken.append((x0, y0, side))
        gts.append(GroundTruthBox(cls, _mask_box(mask, size)))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), gts


def generate_shapes_dataset(n: int, seed: int, image_size: int, out_dir) -> List[LabeledImage]:
    """Write ``n`` PPM images plus label files and a manifest; deterministic per seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines, items = [], []
    for k in range(n):
        img, gts = render_shapes_image(rng, image_size)
        img_rel, lab_rel = f"images/{k:05d}.ppm", f"labels/{k:05d}.txt"
        write_ppm(out / img_rel, img)
        (out / lab_rel).write_text(format_label(gts))
        lines.append(f"{img_rel} {lab_rel}\n")
        items.append(LabeledImage(out / img_rel, tuple(gts)))
    (out / "manifest.txt").write_text("".join(lines))
    return items


# -- metrics ------------------------------------------------------------------------

ScoredBox = Tuple[str, float, Tuple[float, float, float, float]]  # image key, score, box
KeyedBox = Tuple[str, Tuple[float, float, float, float]]


def match_detections(dets: Sequence[ScoredBox], gts: Sequence[KeyedBox],
                     iou_threshold: float = 0.5) -> Tuple[List[int], np.ndarray]:
    """Greedy matching in score order; returns (visit order, TP flag per visit)."""
    order = sorted(range(len(dets)), key=lambda k: (-dets[k][1], dets[k][0], k))
    by_image: Dict[str, List[int]] = {}
    for g, (key, _) in enumerate(gts):
        by_image.setdefault(key, []).append(g)
    used = set()
    tp = np.zeros(len(order), dtype=bool)
    for rank, k in enumerate(order):
        key, _, box = dets[k]
        best, best_iou = None, iou_threshold
        for g in by_image.get(key, ()):
            if g in used:
                continue
            v = iou(box, gts[g][1])
            if v >= best_iou and (best is None or v > best_iou):
                best, best_iou = g, v
        if best is not None:
            used.add(best)
            tp[rank] = True
    return order, tp


def ap_from_flags(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated area under the precision envelope."""
    if n_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(dets: Sequence[ScoredBox], gts: Sequence[KeyedBox], iou_threshold: float = 0.5) -> float:
    """Single-class AP; NaN when there are no ground truths."""
    _, tp = match_detections(dets, gts, iou_threshold)
    return ap_from_flags(tp, len(gts))


@dataclass
class EvalReport:
    ap: Dict[int, float]
    map: float
    tp: Dict[int, int]
    fp: Dict[int, int]
    fn: Dict[int, int]
    iou_threshold: float = 0.5

    def to_json(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v
        return {
            "iou_threshold": self.iou_threshold,
            "mAP": clean(self.map),
            "classes": {
                str(c): {"ap": clean(self.ap[c]), "tp": self.tp[c], "fp": self.fp[c], "fn": self.fn[c]}
                for c in sorted(self.ap)
            },
        }


def map_eval(predictions: Mapping[str, Sequence[Detection]],
             ground_truths: Mapping[str, Sequence[GroundTruthBox]],
             num_classes: int, iou_threshold: float = 0.5) -> EvalReport:
    """Per-class AP and their mean over classes that have ground truth."""
    keys = sorted(set(ground_truths) | set(predictions))
    for k in keys:
        for item in list(predictions.get(k, ())) + list(ground_truths.get(k, ())):
            if not 0 <= item.class_id < num_classes:
                raise ValueError(f"class id {item.class_id} out of range for image {k}")
    ap, tps, fps, fns = {}, {}, {}, {}
    for c in range(num_classes):
        dets = [(k, d.score, d.box) for k in keys for d in predictions.get(k, ()) if d.class_id == c]
        gts = [(k, g.box) for k in keys for g in ground_truths.get(k, ()) if g.class_id == c]
        _, tp = match_detections(dets, gts, iou_threshold)
        ap[c] = ap_from_flags(tp, len(gts))
        tps[c] = int(tp.sum())
        fps[c] = int(len(tp) - tp.sum())
        fns[c] = len(gts) - tps[c]
    valid = [v for v in ap.values() if not math.isnan(v)]
    m = float(np.mean(valid)) if valid else float("nan")
    return EvalReport(ap, m, tps, fps, fns, iou_threshold)
