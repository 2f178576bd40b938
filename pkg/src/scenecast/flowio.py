"""Bit-exact file I/O for flow fields, segmentations, and images.

Formats:
  * ``.flo``  -- Middlebury flow: float32 magic 202021.25, int32 width,
    int32 height, then interleaved (u,v) float32 row-major; all little-endian.
    File length is exactly 12 + 8*width*height bytes.
  * ``.segm`` -- score/label container: 16-byte header ``magic "SEGM",
    version u16, height u16, width u16, channels u16, dtype u16, reserved
    u16`` followed by the raw payload, channel-major [C,H,W] row-major.
    dtype 0 = float32 (score maps), 1 = uint8 (label maps, validity masks).
  * ``.ppm`` / images -- binary PPM (P6), max value 255.  PPM is used instead
    of PNG to stay codec-free while remaining bit-exact and trivially parsed.

Flow visualization uses the Middlebury color wheel (hue = direction,
saturation = magnitude / max; zero flow is white).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DimensionError, DomainError, FormatError
from .fields import FlowField, SegMap

FLO_MAGIC = 202021.25

SEGM_MAGIC = b"SEGM"
SEGM_VERSION = 1
SEGM_DTYPE_FLOAT32 = 0
SEGM_DTYPE_UINT8 = 1


# -- Middlebury .flo ------------------------------------------------------------


def write_flo(flow: FlowField, path) -> None:
    if not (np.isfinite(flow.u).all() and np.isfinite(flow.v).all()):
        raise FormatError("refusing to write non-finite flow values")
    h, w = flow.shape
    payload = np.empty((h, w, 2), dtype="<f4")
    payload[..., 0] = flow.u
    payload[..., 1] = flow.v
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        f.write(payload.tobytes())


def read_flo(path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated .flo header ({len(raw)} bytes)")
    magic, w, h = struct.unpack("<fii", raw[:12])
    if magic != FLO_MAGIC:
        raise FormatError(f"{path}: bad .flo magic {magic!r}")
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: nonpositive dimensions {w}x{h}")
    expected = 12 + 8 * w * h
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    payload = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2)
    return FlowField(payload[..., 0].copy(), payload[..., 1].copy())


# -- flow color coding -----------------------------------------------------------

# Canonical 55-entry Middlebury color wheel (segment sizes 15/6/4/11/13/6).
COLOR_WHEEL = np.array(
    [
        (255, 0, 0), (255, 17, 0), (255, 34, 0), (255, 51, 0), (255, 68, 0),
        (255, 85, 0), (255, 102, 0), (255, 119, 0), (255, 136, 0), (255, 153, 0),
        (255, 170, 0), (255, 187, 0), (255, 204, 0), (255, 221, 0), (255, 238, 0),
        (255, 255, 0), (213, 255, 0), (170, 255, 0), (128, 255, 0), (85, 255, 0),
        (43, 255, 0), (0, 255, 0), (0, 255, 63), (0, 255, 127), (0, 255, 191),
        (0, 255, 255), (0, 232, 255), (0, 209, 255), (0, 186, 255), (0, 163, 255),
        (0, 140, 255), (0, 116, 255), (0, 93, 255), (0, 70, 255), (0, 47, 255),
        (0, 24, 255), (0, 0, 255), (19, 0, 255), (39, 0, 255), (58, 0, 255),
        (78, 0, 255), (98, 0, 255), (117, 0, 255), (137, 0, 255), (156, 0, 255),
        (176, 0, 255), (196, 0, 255), (215, 0, 255), (235, 0, 255), (255, 0, 255),
        (255, 0, 213), (255, 0, 170), (255, 0, 128), (255, 0, 85), (255, 0, 43),
    ],
    dtype=np.float64,
)


def flow_to_color(flow: FlowField, max_magnitude: float | None = None) -> np.ndarray:
    """Render a flow as an [H,W,3] uint8 image via the Middlebury color wheel.

    ``max_magnitude=None`` normalizes by the 99th-percentile magnitude, so
    the image depends only on flow/max (scale-invariant).
    """
    mag = flow.magnitude()
    if max_magnitude is None:
        max_magnitude = float(np.percentile(mag, 99.0))
    elif max_magnitude <= 0:
        raise DomainError(f"max_magnitude must be positive, got {max_magnitude}")
    scale = max(max_magnitude, 1e-8)
    u = flow.u.astype(np.float64) / scale
    v = flow.v.astype(np.float64) / scale

    ncols = COLOR_WHEEL.shape[0]
    rad = np.sqrt(u * u + v * v)
    angle = np.arctan2(-v, -u) / np.pi  # [-1, 1]
    fk = (angle + 1.0) / 2.0 * (ncols - 1)
    k0 = np.floor(fk).astype(np.int64)
    k1 = (k0 + 1) % ncols
    frac = (fk - k0)[..., None]
    col = (1.0 - frac) * COLOR_WHEEL[k0] / 255.0 + frac * COLOR_WHEEL[k1] / 255.0
    in_range = (rad <= 1.0)[..., None]
    radc = rad[..., None]
    col = np.where(in_range, 1.0 - radc * (1.0 - col), col * 0.75)
    return np.floor(255.0 * col).astype(np.uint8)


# -- PPM (P6) --------------------------------------------------------------------


def write_ppm(image: np.ndarray, path) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise DimensionError(f"PPM wants [H,W,3] uint8, got {image.shape} {image.dtype}")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(image.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise FormatError(f"{path}: not a P6 PPM")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":  # comment to end of line
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(x) for x in fields)
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    data = raw[pos : pos + 3 * w * h]
    if len(data) != 3 * w * h:
        raise FormatError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def write_label_image(labels: np.ndarray, palette: np.ndarray, path) -> None:
    """Render an HxW label map through a fixed class palette into a P6 PPM."""
    labels = np.asarray(labels)
    palette = np.asarray(palette, dtype=np.uint8)
    if labels.size and labels.max() >= palette.shape[0]:
        raise DomainError(
            f"label id {labels.max()} has no palette entry (palette size {palette.shape[0]})"
        )
    write_ppm(palette[labels], path)


def labels_from_image(image: np.ndarray, palette: np.ndarray) -> np.ndarray:
    """Invert :func:`write_label_image` for roundtrip checks."""
    palette = np.asarray(palette, dtype=np.uint8)
    match = (image[:, :, None, :] == palette[None, None, :, :]).all(axis=3)
    if not match.any(axis=2).all():
        raise DomainError("image contains colors outside the palette")
    return match.argmax(axis=2).astype(np.uint8)


# -- SEGM container --------------------------------------------------------------


def _segm_header(height: int, width: int, channels: int, dtype_tag: int) -> bytes:
    return struct.pack(
        "<4sHHHHHH", SEGM_MAGIC, SEGM_VERSION, height, width, channels, dtype_tag, 0
    )


def write_segm(array: np.ndarray, path) -> None:
    """Write [C,H,W] float32 scores or [H,W] uint8 labels/masks."""
    array = np.asarray(array)
    if array.ndim == 2:
        array = array[None]
    if array.ndim != 3:
        raise DimensionError(f"SEGM wants [C,H,W] or [H,W], got {array.shape}")
    c, h, w = array.shape
    if array.dtype == np.float32:
        tag = SEGM_DTYPE_FLOAT32
        payload = array.astype("<f4", copy=False)
    elif array.dtype == np.uint8:
        tag = SEGM_DTYPE_UINT8
        payload = array
    else:
        raise FormatError(f"SEGM supports float32/uint8, got {array.dtype}")
    with open(path, "wb") as f:
        f.write(_segm_header(h, w, c, tag))
        f.write(payload.tobytes())


def read_segm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated SEGM header")
    magic, version, h, w, c, tag, _ = struct.unpack("<4sHHHHHH", raw[:16])
    if magic != SEGM_MAGIC:
        raise FormatError(f"{path}: bad SEGM magic {magic!r}")
    if version != SEGM_VERSION:
        raise FormatError(f"{path}: unsupported SEGM version {version}")
    if tag == SEGM_DTYPE_FLOAT32:
        dtype, itemsize = np.dtype("<f4"), 4
    elif tag == SEGM_DTYPE_UINT8:
        dtype, itemsize = np.dtype(np.uint8), 1
    else:
        raise FormatError(f"{path}: unknown SEGM dtype tag {tag}")
    expected = 16 + itemsize * c * h * w
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype=dtype, offset=16).reshape(c, h, w).copy()
    return arr[0] if c == 1 and tag == SEGM_DTYPE_UINT8 else arr


def write_seg_scores(seg: SegMap, path) -> None:
    write_segm(seg.scores, path)


def read_seg_scores(path) -> SegMap:
    arr = read_segm(path)
    if arr.dtype != np.float32:
        raise FormatError(f"{path}: expected float32 score map")
    return SegMap(arr)
