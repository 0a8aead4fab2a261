"""Flow-file I/O, color-wheel rendering, and evaluation metrics.

Flow fields travel as (2, H, W) float32 arrays (u horizontal, v vertical).
The .flo container is the community-standard one: float32 magic 202021.25,
int32 width, int32 height, then interleaved (u, v) float32 pairs in row-major
order, everything little-endian: 12 + 8*W*H bytes total.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import (
    DataError,
    FloBadDimsError,
    FloBadMagicError,
    FloTruncatedError,
    MaskEmptyError,
    ShapeError,
)

FLO_MAGIC = 202021.25


def write_flo(flow: np.ndarray, path):
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ShapeError(f"write_flo expects (2, H, W), got {flow.shape}")
    _, h, w = flow.shape
    interleaved = np.empty((h, w, 2), dtype="<f4")
    interleaved[:, :, 0] = flow[0]
    interleaved[:, :, 1] = flow[1]
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", w, h))
        f.write(interleaved.tobytes())


def read_flo(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12:
        raise FloTruncatedError(f"{path}: only {len(raw)} bytes, header needs 12")
    (magic,) = struct.unpack_from("<f", raw, 0)
    if magic != np.float32(FLO_MAGIC):
        raise FloBadMagicError(f"{path}: magic {magic!r}, expected {FLO_MAGIC}")
    w, h = struct.unpack_from("<ii", raw, 4)
    if w <= 0 or h <= 0:
        raise FloBadDimsError(f"{path}: bad dimensions {w}x{h}")
    need = 12 + 8 * w * h
    if len(raw) != need:
        raise FloTruncatedError(f"{path}: {len(raw)} bytes, expected {need} for {w}x{h}")
    data = np.frombuffer(raw, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2)
    return np.stack([data[:, :, 0], data[:, :, 1]], axis=0).astype(np.float32)


def flow_to_color(flow: np.ndarray, max_magnitude: float | None = None) -> np.ndarray:
    """Render a flow field on the usual color wheel, (H, W, 3) uint8.

    Hue encodes direction (atan2(v, u)), saturation scales with magnitude
    relative to `max_magnitude` (the 99th-percentile magnitude when unset).
    Zero flow renders white.
    """
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ShapeError(f"flow_to_color expects (2, H, W), got {flow.shape}")
    u, v = flow[0], flow[1]
    mag = np.sqrt(u * u + v * v)
    if max_magnitude is None:
        max_magnitude = float(np.percentile(mag, 99.0))
    if max_magnitude <= 0:
        max_magnitude = 1.0
    hue = (np.arctan2(v, u) / (2 * np.pi)) % 1.0
    sat = np.clip(mag / max_magnitude, 0.0, 1.0)
    val = np.ones_like(sat)
    return _hsv_to_rgb_u8(hue, sat, val)


def _hsv_to_rgb_u8(h, s, v):
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - f * s)
    t = v * (1.0 - (1.0 - f) * s)
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    rgb = np.stack([r, g, b], axis=-1)
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------- #
# metrics


def endpoint_error(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[0] != 2:
        raise ShapeError(f"flow shapes differ or malformed: {pred.shape} vs {gt.shape}")
    d = pred - gt
    return np.sqrt(d[0] * d[0] + d[1] * d[1])


def aee(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Average endpoint error in pixels, optionally over a {0,1} mask."""
    err = endpoint_error(pred, gt)
    if mask is None:
        return float(err.mean())
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != err.shape:
        raise ShapeError(f"aee mask shape {mask.shape} does not match {err.shape}")
    total = mask.sum()
    if total <= 0:
        raise MaskEmptyError("aee mask selects no pixels")
    return float((err * mask).sum() / total)


def f1_all(pred: np.ndarray, gt: np.ndarray) -> float:
    """Fraction of pixels with endpoint error > 3 px and > 5% of |gt|."""
    err = endpoint_error(pred, gt)
    gt = np.asarray(gt, dtype=np.float64)
    gt_mag = np.sqrt(gt[0] * gt[0] + gt[1] * gt[1])
    bad = (err > 3.0) & (err > 0.05 * gt_mag)
    return float(bad.mean())


def occlusion_iou(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Intersection over union of two binary masks; 1.0 when both empty."""
    a = np.asarray(pred_mask) > 0.5
    b = np.asarray(gt_mask) > 0.5
    if a.shape != b.shape:
        raise ShapeError(f"occlusion_iou shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


# --------------------------------------------------------------------------- #
# image containers


def write_ppm(image: np.ndarray, path):
    """8-bit binary PPM (P6). Accepts (H, W, 3) uint8 or float in [0, 1]."""
    arr = _as_u8(image, channels=3)
    h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def write_pgm(image: np.ndarray, path):
    """8-bit binary PGM (P5). Accepts (H, W) uint8 or float in [0, 1]."""
    arr = _as_u8(image, channels=1)[:, :, 0]
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def _as_u8(image, channels):
    arr = np.asarray(image)
    if channels == 3:
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ShapeError(f"expected (H, W, 3) image, got {arr.shape}")
    else:
        if arr.ndim == 3 and arr.shape[2] == 1:
            arr = arr[:, :, 0]
        if arr.ndim != 2:
            raise ShapeError(f"expected (H, W) image, got {arr.shape}")
        arr = arr[:, :, None]
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    return arr


def _read_pnm_header(raw: bytes, path, magic: bytes):
    if raw[:2] != magic:
        raise DataError(f"{path}: not a {magic.decode()} file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    return fields, pos


def read_ppm(path) -> np.ndarray:
    """Binary PPM to (H, W, 3) float32 in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    (w, h, maxval), pos = _read_pnm_header(raw, path, b"P6")
    need = w * h * 3
    data = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos)
    if data.size < need:
        raise DataError(f"{path}: truncated PPM payload")
    return (data.reshape(h, w, 3).astype(np.float32) / maxval).astype(np.float32)


def read_pgm(path) -> np.ndarray:
    """Binary PGM to (H, W) float32 in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    (w, h, maxval), pos = _read_pnm_header(raw, path, b"P5")
    need = w * h
    data = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos)
    if data.size < need:
        raise DataError(f"{path}: truncated PGM payload")
    return (data.reshape(h, w).astype(np.float32) / maxval).astype(np.float32)


def write_png(image: np.ndarray, path):
    """Minimal 8-bit RGB PNG writer (zlib-deflated, no interlace)."""
    arr = _as_u8(image, channels=3)
    h, w, _ = arr.shape

    def chunk(tag: bytes, payload: bytes) -> bytes:
        return (
            struct.pack(">I", len(payload))
            + tag
            + payload
            + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)
        )

    header = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    scanlines = b"".join(b"\x00" + arr[y].tobytes() for y in range(h))
    with open(path, "wb") as f:
        f.write(b"\x89PNG\r\n\x1a\n")
        f.write(chunk(b"IHDR", header))
        f.write(chunk(b"IDAT", zlib.compress(scanlines, 6)))
        f.write(chunk(b"IEND", b""))
