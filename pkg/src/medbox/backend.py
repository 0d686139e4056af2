"""Kernel backend selection: numba-jitted hot loops with a pure-numpy fallback.

The active backend is chosen once at import time from the environment
variable ``MEDBOX_BACKEND`` ("numba" or "numpy"). Default is numba when it
is importable, numpy otherwise. Both implementations are kept importable so
they can be benchmarked against each other (see ``medbox.bench``).

Every kernel writes each output element from exactly one loop iteration, so
the jitted parallel versions are bit-identical to the numpy versions.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
    from numba import njit, prange

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep, but stay importable
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap

    prange = range


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _im2col_np(xp, kh, kw, stride):
    """xp: padded input (N,C,Hp,Wp) -> columns (N,OH,OW,C,kh,kw), contiguous."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N,C,OH,OW,kh,kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def _col2im_np(dcols, n, c, hp, wp, kh, kw, stride):
    """Scatter-add column gradients back to the padded input layout."""
    oh, ow = dcols.shape[1], dcols.shape[2]
    dxp = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return dxp


def _maxpool_np(xp, window, stride):
    """xp padded with -inf where needed. Returns (out, flat argmax per window)."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (window, window), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    flat = win.reshape(n, c, oh, ow, window * window)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int64)


def _maxpool_back_np(dout, idx, n, c, hp, wp, window, stride):
    dxp = np.zeros((n, c, hp, wp), dtype=dout.dtype)
    oh, ow = dout.shape[2], dout.shape[3]
    ii, jj = np.divmod(idx, window)
    on, oc, ohh, oww = np.meshgrid(
        np.arange(n), np.arange(c), np.arange(oh), np.arange(ow), indexing="ij"
    )
    np.add.at(dxp, (on, oc, ohh * stride + ii, oww * stride + jj), dout)
    return dxp


def _avgpool_np(x, window, stride, padding):
    """Average pooling; divisor counts only in-bounds cells."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (window, window), axis=(2, 3))
    sums = win[:, :, ::stride, ::stride].sum(axis=(-2, -1))
    ones = np.pad(np.ones((1, 1, h, w), dtype=x.dtype),
                  ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cwin = np.lib.stride_tricks.sliding_window_view(ones, (window, window), axis=(2, 3))
    counts = cwin[:, :, ::stride, ::stride].sum(axis=(-2, -1))
    return np.ascontiguousarray(sums / counts), counts


def _avgpool_back_np(dout, counts, n, c, h, w, window, stride, padding):
    hp, wp = h + 2 * padding, w + 2 * padding
    dxp = np.zeros((n, c, hp, wp), dtype=dout.dtype)
    g = dout / counts
    oh, ow = dout.shape[2], dout.shape[3]
    for i in range(window):
        for j in range(window):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += g
    if padding:
        dxp = dxp[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(dxp)


def _resize_bilinear_np(img, out_h, out_w):
    """img (H,W,C) float -> (out_h,out_w,C); half-pixel centers, edge clamped."""
    h, w = img.shape[:2]
    sy, sx = h / out_h, w / out_w
    fy = np.clip((np.arange(out_h) + 0.5) * sy - 0.5, 0.0, h - 1.0)
    fx = np.clip((np.arange(out_w) + 0.5) * sx - 0.5, 0.0, w - 1.0)
    y0 = np.floor(fy).astype(np.int64)
    x0 = np.floor(fx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (fy - y0).astype(img.dtype)[:, None, None]
    wx = (fx - x0).astype(img.dtype)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def _rotate_bilinear_np(img, theta_rad):
    """Rotate about the image center; out-of-range samples replicate edges."""
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ct, st = np.cos(theta_rad), np.sin(theta_rad)
    # inverse mapping: output pixel -> source coords
    sy = cy + (yy - cy) * ct - (xx - cx) * st
    sx = cx + (yy - cy) * st + (xx - cx) * ct
    sy = np.clip(sy, 0.0, h - 1.0)
    sx = np.clip(sx, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (sy - y0)[..., None].astype(img.dtype)
    wx = (sx - x0)[..., None].astype(img.dtype)
    top = img[y0, x0] * (1 - wx) + img[y0, x1] * wx
    bot = img[y1, x0] * (1 - wx) + img[y1, x1] * wx
    return top * (1 - wy) + bot * wy


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True, parallel=True)
    def _im2col_nb(xp, kh, kw, stride):
        n, c, hp, wp = xp.shape
        oh = (hp - kh) // stride + 1
        ow = (wp - kw) // stride + 1
        cols = np.empty((n, oh, ow, c, kh, kw), dtype=xp.dtype)
        for pix in prange(n * oh):
            b = pix // oh
            y = pix % oh
            for x in range(ow):
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            cols[b, y, x, ch, i, j] = xp[b, ch, y * stride + i, x * stride + j]
        return cols

    @njit(cache=True, parallel=True)
    def _col2im_nb(dcols, n, c, hp, wp, kh, kw, stride):
        oh, ow = dcols.shape[1], dcols.shape[2]
        dxp = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
        for flat in prange(n * c):
            b = flat // c
            ch = flat % c
            for y in range(oh):
                for x in range(ow):
                    for i in range(kh):
                        for j in range(kw):
                            dxp[b, ch, y * stride + i, x * stride + j] += dcols[b, y, x, ch, i, j]
        return dxp

    @njit(cache=True, parallel=True)
    def _maxpool_nb(xp, window, stride):
        n, c, hp, wp = xp.shape
        oh = (hp - window) // stride + 1
        ow = (wp - window) // stride + 1
        out = np.empty((n, c, oh, ow), dtype=xp.dtype)
        idx = np.empty((n, c, oh, ow), dtype=np.int64)
        for flat in prange(n * c):
            b = flat // c
            ch = flat % c
            for y in range(oh):
                for x in range(ow):
                    best = xp[b, ch, y * stride, x * stride]
                    bi = 0
                    for i in range(window):
                        for j in range(window):
                            v = xp[b, ch, y * stride + i, x * stride + j]
                            if v > best:
                                best = v
                                bi = i * window + j
                    out[b, ch, y, x] = best
                    idx[b, ch, y, x] = bi
        return out, idx

    @njit(cache=True, parallel=True)
    def _maxpool_back_nb(dout, idx, n, c, hp, wp, window, stride):
        dxp = np.zeros((n, c, hp, wp), dtype=dout.dtype)
        oh, ow = dout.shape[2], dout.shape[3]
        for flat in prange(n * c):
            b = flat // c
            ch = flat % c
            for y in range(oh):
                for x in range(ow):
                    k = idx[b, ch, y, x]
                    dxp[b, ch, y * stride + k // window, x * stride + k % window] += dout[b, ch, y, x]
        return dxp

    @njit(cache=True, parallel=True)
    def _avgpool_nb(x, window, stride, padding):
        n, c, h, w = x.shape
        oh = (h + 2 * padding - window) // stride + 1
        ow = (w + 2 * padding - window) // stride + 1
        out = np.empty((n, c, oh, ow), dtype=x.dtype)
        counts = np.empty((1, 1, oh, ow), dtype=x.dtype)
        for y in range(oh):
            for x_ in range(ow):
                cnt = 0
                for i in range(window):
                    for j in range(window):
                        sy = y * stride + i - padding
                        sx = x_ * stride + j - padding
                        if 0 <= sy < h and 0 <= sx < w:
                            cnt += 1
                counts[0, 0, y, x_] = cnt
        for flat in prange(n * c):
            b = flat // c
            ch = flat % c
            for y in range(oh):
                for x_ in range(ow):
                    s = 0.0
                    for i in range(window):
                        for j in range(window):
                            sy = y * stride + i - padding
                            sx = x_ * stride + j - padding
                            if 0 <= sy < h and 0 <= sx < w:
                                s += x[b, ch, sy, sx]
                    out[b, ch, y, x_] = s / counts[0, 0, y, x_]
        return out, counts

    @njit(cache=True, parallel=True)
    def _avgpool_back_nb(dout, counts, n, c, h, w, window, stride, padding):
        dx = np.zeros((n, c, h, w), dtype=dout.dtype)
        oh, ow = dout.shape[2], dout.shape[3]
        for flat in prange(n * c):
            b = flat // c
            ch = flat % c
            for y in range(oh):
                for x_ in range(ow):
                    g = dout[b, ch, y, x_] / counts[0, 0, y, x_]
                    for i in range(window):
                        for j in range(window):
                            sy = y * stride + i - padding
                            sx = x_ * stride + j - padding
                            if 0 <= sy < h and 0 <= sx < w:
                                dx[b, ch, sy, sx] += g
        return dx

    @njit(cache=True, nogil=True)
    def _resize_bilinear_nb(img, out_h, out_w):
        # serial: called per image, often interleaved with BLAS work
        h, w, c = img.shape
        out = np.empty((out_h, out_w, c), dtype=img.dtype)
        sy = h / out_h
        sx = w / out_w
        for y in range(out_h):
            fy = (y + 0.5) * sy - 0.5
            if fy < 0.0:
                fy = 0.0
            if fy > h - 1.0:
                fy = h - 1.0
            y0 = int(np.floor(fy))
            y1 = min(y0 + 1, h - 1)
            wy = fy - y0
            for x in range(out_w):
                fx = (x + 0.5) * sx - 0.5
                if fx < 0.0:
                    fx = 0.0
                if fx > w - 1.0:
                    fx = w - 1.0
                x0 = int(np.floor(fx))
                x1 = min(x0 + 1, w - 1)
                wx = fx - x0
                for ch in range(c):
                    top = img[y0, x0, ch] * (1 - wx) + img[y0, x1, ch] * wx
                    bot = img[y1, x0, ch] * (1 - wx) + img[y1, x1, ch] * wx
                    out[y, x, ch] = top * (1 - wy) + bot * wy
        return out

    @njit(cache=True, nogil=True)
    def _rotate_bilinear_nb(img, theta_rad):
        # serial: called per image, often interleaved with BLAS work
        h, w, c = img.shape
        out = np.empty_like(img)
        cy = (h - 1) / 2.0
        cx = (w - 1) / 2.0
        ct = np.cos(theta_rad)
        st = np.sin(theta_rad)
        for y in range(h):
            for x in range(w):
                sy = cy + (y - cy) * ct - (x - cx) * st
                sx = cx + (y - cy) * st + (x - cx) * ct
                if sy < 0.0:
                    sy = 0.0
                if sy > h - 1.0:
                    sy = h - 1.0
                if sx < 0.0:
                    sx = 0.0
                if sx > w - 1.0:
                    sx = w - 1.0
                y0 = int(np.floor(sy))
                x0 = int(np.floor(sx))
                y1 = min(y0 + 1, h - 1)
                x1 = min(x0 + 1, w - 1)
                wy = sy - y0
                wx = sx - x0
                for ch in range(c):
                    top = img[y0, x0, ch] * (1 - wx) + img[y0, x1, ch] * wx
                    bot = img[y1, x0, ch] * (1 - wx) + img[y1, x1, ch] * wx
                    out[y, x, ch] = top * (1 - wy) + bot * wy
        return out


_NUMPY_KERNELS = {
    "im2col": _im2col_np,
    "col2im": _col2im_np,
    "maxpool": _maxpool_np,
    "maxpool_back": _maxpool_back_np,
    "avgpool": _avgpool_np,
    "avgpool_back": _avgpool_back_np,
    "resize_bilinear": _resize_bilinear_np,
    "rotate_bilinear": _rotate_bilinear_np,
}

if HAS_NUMBA:
    _NUMBA_KERNELS = {
        "im2col": _im2col_nb,
        "col2im": _col2im_nb,
        "maxpool": _maxpool_nb,
        "maxpool_back": _maxpool_back_nb,
        "avgpool": _avgpool_nb,
        "avgpool_back": _avgpool_back_nb,
        "resize_bilinear": _resize_bilinear_nb,
        "rotate_bilinear": _rotate_bilinear_nb,
    }
else:
    _NUMBA_KERNELS = _NUMPY_KERNELS


def kernels(name: str) -> dict:
    """Return the kernel table for an explicit backend name."""
    if name == "numpy":
        return _NUMPY_KERNELS
    if name == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("numba backend requested but numba is not installed")
        return _NUMBA_KERNELS
    raise ValueError(f"unknown backend {name!r} (expected 'numba' or 'numpy')")


BACKEND = os.environ.get("MEDBOX_BACKEND", "numba" if HAS_NUMBA else "numpy")
_active = kernels(BACKEND)

im2col = _active["im2col"]
col2im = _active["col2im"]
maxpool = _active["maxpool"]
maxpool_back = _active["maxpool_back"]
avgpool = _active["avgpool"]
avgpool_back = _active["avgpool_back"]
resize_bilinear = _active["resize_bilinear"]
rotate_bilinear = _active["rotate_bilinear"]
