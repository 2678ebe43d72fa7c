"""Raster primitives for the motion-detection chain.

Gray images are ``(H, W)`` uint8 arrays and binary masks are ``(H, W)``
bool arrays. Frames are accepted wherever an RGB raster is needed.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numba as nb
import numpy as np

from .geometry import BoundingBox, Frame

GrayImage = np.ndarray
BinaryMask = np.ndarray


def _pixels(x: Frame | np.ndarray) -> np.ndarray:
    return x.pixels if isinstance(x, Frame) else np.asarray(x)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


@nb.njit(cache=True)
def _luma(rgb, out):
    H, W = out.shape
    for y in range(H):
        for x in range(W):
            v = 0.299 * rgb[y, x, 0] + 0.587 * rgb[y, x, 1] + 0.114 * rgb[y, x, 2]
            v = math.floor(v + 0.5)
            out[y, x] = 255 if v > 255 else np.uint8(v)


def to_gray(f: Frame | np.ndarray) -> GrayImage:
    """Luma ``round(0.299 R + 0.587 G + 0.114 B)``, half rounding up."""
    rgb = np.ascontiguousarray(_pixels(f), dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected HxWx3 raster, got {rgb.shape}")
    out = np.empty(rgb.shape[:2], np.uint8)
    _luma(rgb, out)
    return out


@lru_cache(maxsize=32)
def _kernel_cached(sigma: float) -> np.ndarray:
    r = int(math.ceil(3.0 * sigma))
    xs = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    k /= k.sum()
    k = k.astype(np.float32)
    k.flags.writeable = False
    return k


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D taps of radius ``ceil(3 sigma)`` (float32)."""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    return _kernel_cached(float(sigma))


@nb.njit(cache=True)
def _blur(img, k, out):
    # Vertical pass per output row into vbuf, then horizontal pass from a
    # replicate-padded copy. Row views keep the inner loops vectorizable.
    H, W = img.shape
    r = (k.shape[0] - 1) // 2
    k0 = k[r]
    vbuf = np.empty(W, np.float32)
    pad = np.empty(W + 2 * r, np.float32)
    acc = np.empty(W, np.float32)
    half = np.float32(0.5)
    for y in range(H):
        row = img[y]
        for x in range(W):
            vbuf[x] = k0 * np.float32(row[x])
        for t in range(1, r + 1):
            a = img[max(y - t, 0)]
            b = img[min(y + t, H - 1)]
            kt = k[r + t]
            for x in range(W):
                vbuf[x] += kt * (np.float32(a[x]) + np.float32(b[x]))
        mid = pad[r : r + W]
        for x in range(W):
            mid[x] = vbuf[x]
        for x in range(r):
            pad[x] = vbuf[0]
            pad[W + r + x] = vbuf[W - 1]
        for x in range(W):
            acc[x] = k0 * mid[x]
        for t in range(1, r + 1):
            kt = k[r + t]
            lo = pad[r - t : r - t + W]
            hi = pad[r + t : r + t + W]
            for x in range(W):
                acc[x] += kt * (lo[x] + hi[x])
        o = out[y]
        for x in range(W):
            v = acc[x] + half
            if v < 0:
                v = np.float32(0)
            elif v > 255:
                v = np.float32(255)
            o[x] = np.uint8(np.int32(v))


def gaussian_blur(img: GrayImage, sigma: float) -> GrayImage:
    """Separable Gaussian blur with replicate borders, rounded back to uint8."""
    k = gaussian_kernel(sigma)
    src = np.ascontiguousarray(img, dtype=np.uint8)
    if src.ndim != 2:
        raise ValueError(f"expected a 2-D gray image, got {src.shape}")
    out = np.empty_like(src)
    _blur(src, k, out)
    return out


def abs_diff(a: GrayImage, b: GrayImage) -> GrayImage:
    _same_shape(a, b)
    return np.abs(a.astype(np.int16) - b.astype(np.int16)).astype(np.uint8)


def binary_threshold(img: GrayImage, t: int) -> BinaryMask:
    """Pixels strictly brighter than ``t``."""
    return np.asarray(img) > t


def dilate(m: BinaryMask, radius: int = 1, iterations: int = 1) -> BinaryMask:
    """Dilation by a (2r+1) x (2r+1) square, applied ``iterations`` times.
    Pixels beyond the border count as unset."""
    if radius < 1 or iterations < 1:
        raise ValueError("radius and iterations must be >= 1")
    out = np.asarray(m, dtype=bool).copy()
    for _ in range(iterations):
        # square element = horizontal max followed by vertical max
        h = out.copy()
        for d in range(1, radius + 1):
            h[:, d:] |= out[:, :-d]
            h[:, :-d] |= out[:, d:]
        out = h.copy()
        for d in range(1, radius + 1):
            out[d:, :] |= h[:-d, :]
            out[:-d, :] |= h[d:, :]
    return out


@nb.njit(cache=True)
def _label8(mask):
    H, W = mask.shape
    labels = np.zeros((H, W), np.int32)
    stack = np.empty(H * W, np.int64)
    stats = []  # (y_min, x_min, y_max, x_max, area) per label
    n = 0
    for sy in range(H):
        for sx in range(W):
            if not mask[sy, sx] or labels[sy, sx] != 0:
                continue
            n += 1
            labels[sy, sx] = n
            top = 0
            stack[top] = sy * W + sx
            top += 1
            y0, x0, y1, x1, area = sy, sx, sy, sx, 0
            while top > 0:
                top -= 1
                p = stack[top]
                y = p // W
                x = p - y * W
                area += 1
                if y < y0:
                    y0 = y
                if y > y1:
                    y1 = y
                if x < x0:
                    x0 = x
                if x > x1:
                    x1 = x
                for dy in range(-1, 2):
                    yy = y + dy
                    if yy < 0 or yy >= H:
                        continue
                    for dx in range(-1, 2):
                        xx = x + dx
                        if xx < 0 or xx >= W:
                            continue
                        if mask[yy, xx] and labels[yy, xx] == 0:
                            labels[yy, xx] = n
                            stack[top] = yy * W + xx
                            top += 1
            stats.append((y0, x0, y1, x1, area))
    return labels, stats


def label_components(m: BinaryMask) -> tuple[np.ndarray, list[tuple[int, int, int, int, int]]]:
    """8-connected labeling. Returns the label image (0 = background) and
    per-label ``(y_min, x_min, y_max, x_max, area)`` with inclusive maxima."""
    mask = np.ascontiguousarray(m, dtype=np.bool_)
    if mask.size == 0:
        return np.zeros(mask.shape, np.int32), []
    labels, stats = _label8(mask)
    return labels, list(stats)


def connected_components(m: BinaryMask) -> list[tuple[BoundingBox, int]]:
    """One ``(tight box, pixel count)`` per 8-connected component, ordered by
    ``(y_min, x_min)``. Boxes use pixel edges, so a lone pixel at (x, y)
    has box ``(x, y, x+1, y+1)``."""
    _, stats = label_components(m)
    stats.sort(key=lambda s: (s[0], s[1], s[2], s[3]))
    return [
        (BoundingBox(float(x0), float(y0), float(x1 + 1), float(y1 + 1)), int(area))
        for y0, x0, y1, x1, area in stats
    ]


def mse(a: Frame | np.ndarray, b: Frame | np.ndarray) -> float:
    pa, pb = _pixels(a), _pixels(b)
    _same_shape(pa, pb)
    if pa.size == 0:
        return 0.0
    d = pa.astype(np.float64) - pb.astype(np.float64)
    return float(np.mean(d * d))


def resize_nearest(img: np.ndarray, width: int, height: int) -> np.ndarray:
    """Nearest-neighbour resize, sampling source pixel centers."""
    src = np.asarray(img)
    h, w = src.shape[:2]
    ys = np.minimum(((np.arange(height) + 0.5) * h / height).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(width) + 0.5) * w / width).astype(np.int64), w - 1)
    return src[ys[:, None], xs[None, :]]
