"""Binary PPM (P6) reading/writing and box-outline overlays."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError

# Outline colours per class id; index 0 is unused (background).
CLASS_COLORS = np.array(
    [
        [255, 255, 255],
        [255, 0, 255],
        [0, 255, 255],
        [255, 128, 0],
        [0, 255, 0],
        [255, 255, 0],
    ],
    dtype=np.uint8,
)


def encode_ppm(pixels: np.ndarray) -> bytes:
    """``pixels`` is ``uint8[H, W, 3]``."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise FormatError(f"PPM pixels must be uint8[H, W, 3], got {pixels.dtype}{list(pixels.shape)}")
    h, w, _ = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels).tobytes()


def write_ppm(path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(pixels))


def decode_ppm(buf: bytes, source="<bytes>") -> np.ndarray:
    """Parse a P6 image with maxval 255 into ``uint8[H, W, 3]``."""
    if not buf.startswith(b"P6"):
        raise FormatError(f"{source}: not a binary PPM (P6) image")
    fields: list[int] = []
    pos = 2
    n = len(buf)
    while len(fields) < 3:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"{source}: malformed PPM header")
        fields.append(int(buf[start:pos]))
    if pos >= n or not buf[pos : pos + 1].isspace():
        raise FormatError(f"{source}: malformed PPM header")
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{source}: only maxval 255 is supported, got {maxval}")
    need = w * h * 3
    if n - pos < need:
        raise FormatError(f"{source}: expected {need} pixel bytes, found {n - pos}")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3).copy()


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes(), path)


def to_pixels(image: np.ndarray) -> np.ndarray:
    """``[3, H, W]`` floats in [0, 1] to ``uint8[H, W, 3]``."""
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0).copy()


def from_pixels(pixels: np.ndarray) -> np.ndarray:
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def draw_box(pixels: np.ndarray, box, color, thickness: int = 2) -> None:
    """Draw a rectangle outline in place, clipped to the image."""
    h, w, _ = pixels.shape
    x1, y1, x2, y2 = (int(round(v)) for v in box)
    x1, x2 = max(min(x1, x2), 0), min(max(x1, x2), w)
    y1, y2 = max(min(y1, y2), 0), min(max(y1, y2), h)
    if x2 <= x1 or y2 <= y1:
        return
    t = thickness
    pixels[y1 : min(y1 + t, y2), x1:x2] = color
    pixels[max(y2 - t, y1) : y2, x1:x2] = color
    pixels[y1:y2, x1 : min(x1 + t, x2)] = color
    pixels[y1:y2, max(x2 - t, x1) : x2] = color
