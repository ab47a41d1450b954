"""Small image helpers: binary PPM I/O, bilinear resizing, ROI crops, overlays."""

from __future__ import annotations

from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ParseError


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise TypeError("PPM writer expects uint8 images")
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got {img.shape}")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise ParseError(f"{path}: not a P6/maxval-255 PPM")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).copy()


@lru_cache(maxsize=256)
def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic interpolation matrix using half-pixel centres."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        w = src - i0
        m[i, i0] += 1.0 - w
        m[i, i1] += w
    m.setflags(write=False)
    return m


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an HxW or HxWxC array; always returns float64."""
    a = np.asarray(img, dtype=np.float64)
    ry = bilinear_matrix(a.shape[0], out_h)
    rx = bilinear_matrix(a.shape[1], out_w)
    if a.ndim == 2:
        return ry @ a @ rx.T
    return np.einsum("ij,jkc,lk->ilc", ry, a, rx)


def crop(img: np.ndarray, roi: tuple[int, int, int, int]) -> np.ndarray:
    x0, y0, x1, y1 = roi
    return img[y0:y1, x0:x1]


def to_uint8(img01: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img01) * 255.0), 0, 255).astype(np.uint8)


def draw_box(img: np.ndarray, roi: tuple[int, int, int, int], color=(0, 255, 0)) -> np.ndarray:
    """1px rectangle outline along the ROI border (in place on a copy)."""
    out = np.array(img, copy=True)
    x0, y0, x1, y1 = roi
    c = np.asarray(color, dtype=out.dtype)
    out[y0, x0:x1] = c
    out[y1 - 1, x0:x1] = c
    out[y0:y1, x0] = c
    out[y0:y1, x1 - 1] = c
    return out
