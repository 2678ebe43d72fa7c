"""Background models for static cameras.

Two variants share the same front end (Gaussian blur of the gray frame):

* ``first_frame``: the first frame is the background; foreground is the
  thresholded absolute difference against it.
* ``mog``: an online per-pixel mixture of Gaussians. Ranking is by
  weight / sigma, the learning rate of the matched component is the plain
  ``alpha`` (no density factor), weights are renormalized after each update
  and variances never drop below ``variance_floor``.

Model state is float64 weights plus float32 means and variances, laid out
as ``(k, H, W)`` planes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import BinaryIO

import numba as nb
import numpy as np

from . import imageproc

FIRST_FRAME = "first_frame"
MOG = "mog"
VARIANTS = (FIRST_FRAME, MOG)

SNAPSHOT_MAGIC = b"CVBG"
SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class BackgroundParams:
    k: int = 3
    alpha: float = 0.05
    background_weight_threshold: float = 0.7
    match_sigmas: float = 2.5
    initial_variance: float = 225.0
    initial_weight: float = 0.05
    variance_floor: float = 4.0
    blur_sigma: float = 2.0
    diff_threshold: int = 25

    def __post_init__(self) -> None:
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k must be an integer >= 1, got {self.k}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0,1), got {self.alpha}")
        if not 0.0 < self.background_weight_threshold <= 1.0:
            raise ValueError("background_weight_threshold must be in (0,1]")
        if not self.match_sigmas > 0:
            raise ValueError("match_sigmas must be > 0")
        if not 0.0 < self.initial_weight < 1.0:
            raise ValueError("initial_weight must be in (0,1)")
        if not self.variance_floor > 0:
            raise ValueError("variance_floor must be > 0")
        if self.initial_variance < self.variance_floor:
            raise ValueError("initial_variance must be >= variance_floor")
        if not self.blur_sigma > 0:
            raise ValueError("blur_sigma must be > 0")
        if not 0 <= self.diff_threshold <= 255:
            raise ValueError("diff_threshold must be in [0,255]")


@nb.njit(inline="always")
def _before(wa, va, wb, vb):
    # a strictly outranks b by w/sigma; compared without sqrt or division
    return wa * wa * vb > wb * wb * va


@nb.njit(cache=True)
def _mog_update_k(img, W, MU, VAR, alpha, T, ms, iv, iw, floor, mask):
    K, N = W.shape
    keep = 1.0 - alpha
    ms2 = ms * ms
    w = np.empty(K, np.float64)
    mu = np.empty(K, np.float64)
    var = np.empty(K, np.float64)
    order = np.empty(K, np.int64)
    for i in range(N):
        xv = np.float64(img[i])
        for g in range(K):
            w[g] = W[g, i]
            mu[g] = np.float64(MU[g, i])
            var[g] = np.float64(VAR[g, i])
            order[g] = g
        # stable insertion sort, descending w/sigma
        for a in range(1, K):
            j = a
            while j > 0 and _before(w[order[j]], var[order[j]], w[order[j - 1]], var[order[j - 1]]):
                t = order[j - 1]
                order[j - 1] = order[j]
                order[j] = t
                j -= 1
        m = -1
        for a in range(K):
            g = order[a]
            d = xv - mu[g]
            if w[g] > 0.0 and d * d <= ms2 * var[g]:
                m = g
                break
        s = 0.0
        for g in range(K):
            w[g] = keep * w[g] + (alpha if g == m else 0.0)
            s += w[g]
        inv = 1.0 / s
        for g in range(K):
            w[g] *= inv
        if m < 0:
            j = order[K - 1]
            w[j] = iw
            mu[j] = xv
            var[j] = iv
            s = 0.0
            for g in range(K):
                s += w[g]
            inv = 1.0 / s
            for g in range(K):
                w[g] *= inv
            mask[i] = True
        else:
            nm = np.float64(np.float32(keep * mu[m] + alpha * xv))
            d = xv - nm
            u = keep * var[m] + alpha * d * d
            if u < floor:
                u = floor
            mu[m] = nm
            var[m] = np.float64(np.float32(u))
            c = 0.0
            for g in range(K):
                if g == m:
                    continue
                l = w[g] * w[g] * var[m]
                r = w[m] * w[m] * var[g]
                if l > r or (l == r and g < m):
                    c += w[g]
            mask[i] = c > T
        for g in range(K):
            W[g, i] = w[g]
            MU[g, i] = mu[g]
            VAR[g, i] = var[g]


@nb.njit(inline="always")
def _ahead(wa, va, wb, vb, tie):
    l = wa * wa * vb
    r = wb * wb * va
    return (l > r) | ((l == r) & tie)


@nb.njit(cache=True, error_model="numpy")
def _mog_update_3(img, W, MU, VAR, alpha, T, ms, iv, iw, floor, mask):
    # Branch-free specialization of _mog_update_k for k == 3; must stay
    # bit-identical to it (same operations in the same order).
    N = img.shape[0]
    keep = 1.0 - alpha
    ms2 = ms * ms
    wa0 = W[0]
    wa1 = W[1]
    wa2 = W[2]
    ma0 = MU[0]
    ma1 = MU[1]
    ma2 = MU[2]
    va0 = VAR[0]
    va1 = VAR[1]
    va2 = VAR[2]
    for i in range(N):
        xv = np.float64(img[i])
        w0 = wa0[i]
        w1 = wa1[i]
        w2 = wa2[i]
        m0 = np.float64(ma0[i])
        m1 = np.float64(ma1[i])
        m2 = np.float64(ma2[i])
        v0 = np.float64(va0[i])
        v1 = np.float64(va1[i])
        v2 = np.float64(va2[i])
        b01 = _ahead(w0, v0, w1, v1, True)
        b02 = _ahead(w0, v0, w2, v2, True)
        b12 = _ahead(w1, v1, w2, v2, True)
        r0 = np.int32(not b01) + np.int32(not b02)
        r1 = np.int32(b01) + np.int32(not b12)
        r2 = np.int32(b02) + np.int32(b12)
        d0 = xv - m0
        d1 = xv - m1
        d2 = xv - m2
        f0 = (w0 > 0.0) & (d0 * d0 <= ms2 * v0)
        f1 = (w1 > 0.0) & (d1 * d1 <= ms2 * v1)
        f2 = (w2 > 0.0) & (d2 * d2 <= ms2 * v2)
        e0 = r0 if f0 else 3
        e1 = r1 if f1 else 3
        e2 = r2 if f2 else 3
        s0 = f0 & (e0 < e1) & (e0 < e2)
        s1 = f1 & (e1 < e0) & (e1 < e2)
        s2 = f2 & (e2 < e0) & (e2 < e1)
        hit = f0 | f1 | f2
        w0 = keep * w0 + (alpha if s0 else 0.0)
        w1 = keep * w1 + (alpha if s1 else 0.0)
        w2 = keep * w2 + (alpha if s2 else 0.0)
        inv = 1.0 / (w0 + w1 + w2)
        w0 *= inv
        w1 *= inv
        w2 *= inv
        q0 = (not hit) & (r0 == 2)
        q1 = (not hit) & (r1 == 2)
        q2 = (not hit) & (r2 == 2)
        w0 = iw if q0 else w0
        w1 = iw if q1 else w1
        w2 = iw if q2 else w2
        # multiplying by 1.0 is exact, so matched pixels are left untouched
        inv = 1.0 if hit else 1.0 / (w0 + w1 + w2)
        w0 *= inv
        w1 *= inv
        w2 *= inv
        # only the matched component moves; gather it, update once, scatter
        mm = m0 if s0 else (m1 if s1 else m2)
        vm = v0 if s0 else (v1 if s1 else v2)
        nm = np.float64(np.float32(keep * mm + alpha * xv))
        um = np.float64(np.float32(max(keep * vm + alpha * (xv - nm) * (xv - nm), floor)))
        m0 = nm if s0 else (xv if q0 else m0)
        m1 = nm if s1 else (xv if q1 else m1)
        m2 = nm if s2 else (xv if q2 else m2)
        v0 = um if s0 else (iv if q0 else v0)
        v1 = um if s1 else (iv if q1 else v1)
        v2 = um if s2 else (iv if q2 else v2)
        # weight ranked strictly ahead of the matched component
        wm = w0 if s0 else (w1 if s1 else w2)
        c = ((w0 if (not s0) & _ahead(w0, v0, wm, um, s1 | s2) else 0.0)
             + (w1 if (not s1) & _ahead(w1, v1, wm, um, s2) else 0.0)
             + (w2 if (not s2) & _ahead(w2, v2, wm, um, False) else 0.0))
        mask[i] = (not hit) | (c > T)
        wa0[i] = w0
        wa1[i] = w1
        wa2[i] = w2
        ma0[i] = m0
        ma1[i] = m1
        ma2[i] = m2
        va0[i] = v0
        va1[i] = v1
        va2[i] = v2


class BackgroundModel:
    """Per-stream background state. Not thread-safe: one owner per stream."""

    def __init__(self, variant: str = MOG, params: BackgroundParams | None = None):
        if variant not in VARIANTS:
            raise ValueError(f"unknown background variant {variant!r}; expected one of {VARIANTS}")
        self.variant = variant
        self.params = params or BackgroundParams()
        self.frames_seen = 0
        self.shape: tuple[int, int] | None = None
        self.reference: np.ndarray | None = None
        self._reference_blurred: np.ndarray | None = None
        self.weights: np.ndarray | None = None
        self.means: np.ndarray | None = None
        self.variances: np.ndarray | None = None

    def _check_shape(self, img: np.ndarray) -> None:
        if img.ndim != 2:
            raise ValueError(f"expected a gray image, got shape {img.shape}")
        if self.shape is not None and img.shape != self.shape:
            raise ValueError(f"dimension mismatch: model {self.shape} vs frame {img.shape}")

    def _init_mog(self, blurred: np.ndarray) -> None:
        p = self.params
        h, w = blurred.shape
        self.weights = np.zeros((p.k, h, w), np.float64)
        self.weights[0] = 1.0
        self.means = np.zeros((p.k, h, w), np.float32)
        self.means[0] = blurred
        self.variances = np.full((p.k, h, w), p.initial_variance, np.float32)

    def update_and_classify(self, img: np.ndarray) -> np.ndarray:
        """Feed one gray frame; returns its foreground mask and mutates the model."""
        img = np.asarray(img)
        self._check_shape(img)
        p = self.params
        blurred = imageproc.gaussian_blur(img, p.blur_sigma)
        if self.frames_seen == 0:
            self.shape = img.shape
            if self.variant == FIRST_FRAME:
                self.reference = img.astype(np.uint8, copy=True)
                self._reference_blurred = blurred
            else:
                self._init_mog(blurred)
            self.frames_seen = 1
            return np.zeros(img.shape, dtype=bool)

        if self.variant == FIRST_FRAME:
            mask = imageproc.binary_threshold(
                imageproc.abs_diff(blurred, self._reference_blurred), p.diff_threshold
            )
        else:
            mask = self._mog_step(blurred)
        self.frames_seen += 1
        return mask

    def _mog_step(self, blurred: np.ndarray) -> np.ndarray:
        p = self.params
        k = p.k
        n = blurred.size
        flat = blurred.reshape(n)
        wv = self.weights.reshape(k, n)
        mv = self.means.reshape(k, n)
        vv = self.variances.reshape(k, n)
        mask = np.empty(n, np.bool_)
        kernel = _mog_update_3 if k == 3 else _mog_update_k
        kernel(
            flat, wv, mv, vv,
            p.alpha, p.background_weight_threshold, p.match_sigmas,
            p.initial_variance, p.initial_weight, p.variance_floor, mask,
        )
        return mask.reshape(blurred.shape)

    def background_image(self) -> np.ndarray:
        if self.frames_seen == 0:
            raise RuntimeError("background model has not seen any frame yet")
        if self.variant == FIRST_FRAME:
            return self.reference.copy()
        w = self.weights
        v = self.variances.astype(np.float64)
        # ties resolve to the lowest index, as in the update kernels
        key = w / np.sqrt(v)
        best = np.argmax(key, axis=0)
        mu = np.take_along_axis(self.means, best[None], axis=0)[0].astype(np.float64)
        return np.clip(np.floor(mu + 0.5), 0, 255).astype(np.uint8)

    # -- snapshots ---------------------------------------------------------
    # Layout (little-endian): magic "CVBG", u16 version, u8 variant
    # (0 first_frame, 1 mog), u32 params-json length, params JSON (utf-8),
    # u64 frames_seen, u32 height, u32 width, then either the raw uint8
    # reference (first_frame) or k float64 weight planes, k float32 mean
    # planes and k float32 variance planes (mog). A model with no frames
    # stores height = width = 0 and no grids.

    def save(self, fh: BinaryIO | str | Path) -> None:
        if isinstance(fh, (str, Path)):
            with open(fh, "wb") as f:
                self.save(f)
            return
        params = json.dumps(asdict(self.params), sort_keys=True).encode()
        h, w = self.shape or (0, 0)
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<HBI", SNAPSHOT_VERSION, VARIANTS.index(self.variant), len(params)))
        fh.write(params)
        fh.write(struct.pack("<QII", self.frames_seen, h, w))
        if self.frames_seen == 0:
            return
        if self.variant == FIRST_FRAME:
            fh.write(self.reference.astype("u1").tobytes())
        else:
            fh.write(self.weights.astype("<f8").tobytes())
            fh.write(self.means.astype("<f4").tobytes())
            fh.write(self.variances.astype("<f4").tobytes())

    @classmethod
    def load(cls, fh: BinaryIO | str | Path) -> "BackgroundModel":
        if isinstance(fh, (str, Path)):
            with open(fh, "rb") as f:
                return cls.load(f)
        if fh.read(4) != SNAPSHOT_MAGIC:
            raise ValueError("not a background snapshot (bad magic)")
        version, variant_idx, plen = struct.unpack("<HBI", fh.read(7))
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        params = BackgroundParams(**json.loads(fh.read(plen)))
        model = cls(VARIANTS[variant_idx], params)
        frames_seen, h, w = struct.unpack("<QII", fh.read(16))
        model.frames_seen = frames_seen
        if frames_seen == 0:
            return model
        model.shape = (h, w)

        def grid(dtype: str, count: int) -> np.ndarray:
            size = np.dtype(dtype).itemsize * count
            buf = fh.read(size)
            if len(buf) != size:
                raise ValueError("truncated background snapshot")
            return np.frombuffer(buf, dtype=dtype).copy()

        k = params.k
        if model.variant == FIRST_FRAME:
            model.reference = grid("u1", h * w).reshape(h, w)
            model._reference_blurred = imageproc.gaussian_blur(model.reference, params.blur_sigma)
        else:
            model.weights = grid("<f8", k * h * w).reshape(k, h, w).astype(np.float64)
            model.means = grid("<f4", k * h * w).reshape(k, h, w).astype(np.float32)
            model.variances = grid("<f4", k * h * w).reshape(k, h, w).astype(np.float32)
        return model
