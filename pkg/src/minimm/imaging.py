"""Image plumbing: PPM (P6) files, bilinear resize, and the resize policy.

Images cross module boundaries as float32 [H, W, 3] arrays in [0, 1].
PPM P6 with maxval 255 is the interchange format on disk.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, StructureError


def write_ppm(path, image: np.ndarray):
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"expected [H, W, 3] image, got shape {img.shape}")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise StructureError(f"not a binary PPM file: magic {fields[0]!r}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise StructureError(f"unsupported PPM maxval {maxval}")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(raw, dtype=np.uint8, count=h * w * 3, offset=pos)
    return (pixels.reshape(h, w, 3).astype(np.float32)) / 255.0


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resample; identity when sizes already match."""
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.linspace(0, h - 1, out_h) if out_h > 1 else np.array([(h - 1) / 2.0])
    xs = np.linspace(0, w - 1, out_w) if out_w > 1 else np.array([(w - 1) / 2.0])
    y0 = np.floor(ys).astype(int).clip(0, h - 1)
    x0 = np.floor(xs).astype(int).clip(0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


def nearest_multiple(n: int, m: int) -> int:
    """Closest positive multiple of m to n (ties round up)."""
    k = max(1, int(np.floor(n / m + 0.5)))
    return k * m


def resize_to_multiple(image: np.ndarray, multiple: int) -> np.ndarray:
    """Shared resize policy: snap each side to its nearest multiple."""
    h, w = image.shape[:2]
    return resize_bilinear(image, nearest_multiple(h, multiple), nearest_multiple(w, multiple))
