"""Binary PPM (P6) reading/writing and box-outline rendering."""
from __future__ import annotations

from pathlib import Path

import numpy as np

# class-indexed outline colours
PALETTE = np.array([
    [255, 0, 0],
    [0, 255, 0],
    [0, 96, 255],
    [255, 255, 0],
    [255, 0, 255],
    [0, 255, 255],
], dtype=np.uint8)


class PPMError(ValueError):
    pass


def _tokens(buf: bytes, count: int):
    """First ``count`` whitespace-separated header tokens, skipping comments."""
    toks, pos = [], 0
    while len(toks) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PPMError("truncated PPM header")
        toks.append(buf[start:pos])
    # exactly one whitespace byte separates header from raster
    return toks, pos + 1


def decode_ppm(buf: bytes) -> np.ndarray:
    toks, offset = _tokens(buf, 4)
    if toks[0] != b"P6":
        raise PPMError(f"not a binary PPM (magic {toks[0]!r})")
    try:
        width, height, maxval = (int(t) for t in toks[1:])
    except ValueError:
        raise PPMError("non-numeric PPM header field") from None
    if width < 1 or height < 1 or maxval != 255:
        raise PPMError(f"unsupported PPM geometry {width}x{height} maxval {maxval}")
    n = width * height * 3
    raster = buf[offset:offset + n]
    if len(raster) != n:
        raise PPMError(f"PPM raster truncated: {len(raster)} of {n} bytes")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3).copy()


def read_ppm(path) -> np.ndarray:
    """HxWx3 uint8 array."""
    return decode_ppm(Path(path).read_bytes())


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise PPMError("expected an HxWx3 uint8 image")
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes()


def write_ppm(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(img))


def resize_nearest(img: np.ndarray, size: int) -> np.ndarray:
    h, w, _ = img.shape
    if (h, w) == (size, size):
        return img
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return img[rows][:, cols]


def to_chw_float(img: np.ndarray) -> np.ndarray:
    """uint8 HxWx3 -> float CHW in [0, 1]."""
    return img.transpose(2, 0, 1).astype(np.float64) / 255.0


def draw_boxes(img: np.ndarray, detections) -> np.ndarray:
    """Copy of ``img`` with 1-pixel outlines of each detection's box."""
    out = np.array(img, dtype=np.uint8, copy=True)
    h, w, _ = out.shape
    for det in detections:
        cx, cy, bw, bh = det.box
        x0 = int(np.clip(np.floor((cx - bw / 2) * w), 0, w - 1))
        x1 = int(np.clip(np.ceil((cx + bw / 2) * w) - 1, 0, w - 1))
        y0 = int(np.clip(np.floor((cy - bh / 2) * h), 0, h - 1))
        y1 = int(np.clip(np.ceil((cy + bh / 2) * h) - 1, 0, h - 1))
        color = PALETTE[det.class_id % len(PALETTE)]
        out[y0, x0:x1 + 1] = color
        out[y1, x0:x1 + 1] = color
        out[y0:y1 + 1, x0] = color
        out[y0:y1 + 1, x1] = color
    return out
