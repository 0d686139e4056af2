"""NHWC hot-path kernels used inside the network graph.

The reference NCHW primitives in :mod:`medbox.ops` define the semantics and
are oracle-tested; these fused channels-last equivalents exist because the
training loop is memory-bound. Tests cross-check every routine here against
the reference path.

Stride-1 convolutions run as shift-accumulated BLAS GEMMs over the padded
grid: one accumulating matmul per kernel tap on contiguous views, no im2col
gather and no col2im scatter (rows that would mix adjacent images fall in
the cropped margin, so batching stays exact). Strided convolutions fall back
to im2col + one GEMM. BatchNorm and its ReLU are fused single-pass kernels.

The jitted kernels here are deliberately single-threaded: the GEMMs own the
cores, and a second OpenMP pool fighting the BLAS pool stalls both. Each has
a pure-numpy fallback following ``MEDBOX_BACKEND`` like :mod:`medbox.backend`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg.blas import dgemm, sgemm

from . import backend
from .errors import MissingContext
from .ops import BNState, check_finite

HAS_NUMBA = backend.HAS_NUMBA
if HAS_NUMBA:
    from numba import njit


def _require(ctx):
    if ctx is None:
        raise MissingContext("backward requires a forward pass with want_ctx=True")
    return ctx


def _gemm_acc(a, b, c):
    """c += a @ b for C-contiguous operands, via the transposed Fortran view."""
    gemm = sgemm if a.dtype == np.float32 else dgemm
    gemm(1.0, b.T, a.T, beta=1.0, c=c.T, overwrite_c=True)


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _im2col_nhwc_np(xp, kh, kw, stride):
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (N,OH,OW,C,kh,kw)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def _col2im_nhwc_np(dcols, n, hp, wp, kh, kw, stride):
    oh, ow = dcols.shape[1], dcols.shape[2]
    dxp = np.zeros((n, hp, wp, dcols.shape[5]), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += \
                dcols[:, :, :, i, j, :]
    return dxp


def _bn_stats_np(x2d):
    return x2d.sum(axis=0), np.einsum("mc,mc->c", x2d, x2d)


def _bn_apply_np(x2d, mean, inv_std, gamma, beta, relu):
    out = gamma * ((x2d - mean) * inv_std) + beta
    if relu:
        np.maximum(out, 0, out=out)
    return out.astype(x2d.dtype, copy=False)


def _bn_back_train_np(x2d, dout2d, out2d, mean, inv_std, gamma, relu):
    m = x2d.shape[0]
    dz = np.where(out2d > 0, dout2d, 0) if relu else dout2d
    xhat = (x2d - mean) * inv_std
    dbeta = dz.sum(axis=0)
    dgamma = np.einsum("mc,mc->c", dz, xhat)
    dx = (gamma * inv_std / m) * (m * dz - dbeta - xhat * dgamma)
    return dx.astype(x2d.dtype, copy=False), dgamma, dbeta


def _bn_back_eval_np(x2d, dout2d, out2d, mean, inv_std, gamma, relu):
    dz = np.where(out2d > 0, dout2d, 0) if relu else dout2d
    xhat = (x2d - mean) * inv_std
    dbeta = dz.sum(axis=0)
    dgamma = np.einsum("mc,mc->c", dz, xhat)
    dx = dz * (gamma * inv_std)
    return dx.astype(x2d.dtype, copy=False), dgamma, dbeta


def _maxpool_nhwc_np(xp, window, stride):
    win = np.lib.stride_tricks.sliding_window_view(xp, (window, window), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (N,OH,OW,C,w,w)
    n, oh, ow, c = win.shape[:4]
    flat = win.reshape(n, oh, ow, c, window * window)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int64)


def _maxpool_back_nhwc_np(dout, idx, n, hp, wp, window, stride):
    c = dout.shape[3]
    oh, ow = dout.shape[1], dout.shape[2]
    dxp = np.zeros((n, hp, wp, c), dtype=dout.dtype)
    ii, jj = np.divmod(idx, window)
    on, ohh, oww, oc = np.meshgrid(np.arange(n), np.arange(oh), np.arange(ow),
                                   np.arange(c), indexing="ij")
    np.add.at(dxp, (on, ohh * stride + ii, oww * stride + jj, oc), dout)
    return dxp


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------
# Kernels are single-threaded on purpose: a second OpenMP pool spinning
# between regions starves the (already single-threaded) BLAS; process-level
# workers provide the parallelism instead.

if HAS_NUMBA:

    @njit(cache=True, nogil=True)
    def _im2col_nhwc_nb(xp, kh, kw, stride):
        n, hp, wp, c = xp.shape
        oh = (hp - kh) // stride + 1
        ow = (wp - kw) // stride + 1
        cols = np.empty((n, oh, ow, kh, kw, c), dtype=xp.dtype)
        for b in range(n):
            for y in range(oh):
                for x in range(ow):
                    for i in range(kh):
                        for j in range(kw):
                            for ch in range(c):
                                cols[b, y, x, i, j, ch] = xp[b, y * stride + i, x * stride + j, ch]
        return cols

    @njit(cache=True, nogil=True)
    def _col2im_nhwc_nb(dcols, n, hp, wp, kh, kw, stride):
        c = dcols.shape[5]
        oh, ow = dcols.shape[1], dcols.shape[2]
        dxp = np.zeros((n, hp, wp, c), dtype=dcols.dtype)
        for b in range(n):
            for y in range(oh):
                for x in range(ow):
                    for i in range(kh):
                        for j in range(kw):
                            for ch in range(c):
                                dxp[b, y * stride + i, x * stride + j, ch] += \
                                    dcols[b, y, x, i, j, ch]
        return dxp

    @njit(cache=True, nogil=True)
    def _bn_stats_nb_entry(x2d):
        m, c = x2d.shape
        s = np.zeros(c, dtype=x2d.dtype)
        q = np.zeros(c, dtype=x2d.dtype)
        for i in range(m):
            for ch in range(c):
                v = x2d[i, ch]
                s[ch] += v
                q[ch] += v * v
        return s, q

    @njit(cache=True, nogil=True)
    def _bn_apply_nb(x2d, mean, inv_std, gamma, beta, relu):
        m, c = x2d.shape
        out = np.empty_like(x2d)
        for i in range(m):
            for ch in range(c):
                v = gamma[ch] * ((x2d[i, ch] - mean[ch]) * inv_std[ch]) + beta[ch]
                if relu and v < 0:
                    v = 0
                out[i, ch] = v
        return out

    @njit(cache=True, nogil=True)
    def _bn_back_train_nb(x2d, dout2d, out2d, mean, inv_std, gamma, relu):
        m, c = x2d.shape
        sum1 = np.zeros(c, dtype=x2d.dtype)  # sum dz
        sum2 = np.zeros(c, dtype=x2d.dtype)  # sum dz * xhat
        for i in range(m):
            for ch in range(c):
                dz = dout2d[i, ch]
                if relu and out2d[i, ch] <= 0:
                    dz = 0
                sum1[ch] += dz
                sum2[ch] += dz * (x2d[i, ch] - mean[ch]) * inv_std[ch]
        dx = np.empty_like(x2d)
        for i in range(m):
            for ch in range(c):
                dz = dout2d[i, ch]
                if relu and out2d[i, ch] <= 0:
                    dz = 0
                xhat = (x2d[i, ch] - mean[ch]) * inv_std[ch]
                dx[i, ch] = (gamma[ch] * inv_std[ch] / m) * (m * dz - sum1[ch] - xhat * sum2[ch])
        return dx, sum2, sum1  # dgamma = sum dz*xhat, dbeta = sum dz

    @njit(cache=True, nogil=True)
    def _bn_back_eval_nb(x2d, dout2d, out2d, mean, inv_std, gamma, relu):
        m, c = x2d.shape
        sum1 = np.zeros(c, dtype=x2d.dtype)
        sum2 = np.zeros(c, dtype=x2d.dtype)
        dx = np.empty_like(x2d)
        for i in range(m):
            for ch in range(c):
                dz = dout2d[i, ch]
                if relu and out2d[i, ch] <= 0:
                    dz = 0
                sum1[ch] += dz
                sum2[ch] += dz * (x2d[i, ch] - mean[ch]) * inv_std[ch]
                dx[i, ch] = dz * gamma[ch] * inv_std[ch]
        return dx, sum2, sum1

    @njit(cache=True, nogil=True)
    def _maxpool_nhwc_nb(xp, window, stride):
        n, hp, wp, c = xp.shape
        oh = (hp - window) // stride + 1
        ow = (wp - window) // stride + 1
        out = np.empty((n, oh, ow, c), dtype=xp.dtype)
        idx = np.empty((n, oh, ow, c), dtype=np.int64)
        for b in range(n):
            for y in range(oh):
                for x in range(ow):
                    for ch in range(c):
                        best = xp[b, y * stride, x * stride, ch]
                        bi = 0
                        for i in range(window):
                            for j in range(window):
                                v = xp[b, y * stride + i, x * stride + j, ch]
                                if v > best:
                                    best = v
                                    bi = i * window + j
                        out[b, y, x, ch] = best
                        idx[b, y, x, ch] = bi
        return out, idx

    @njit(cache=True, nogil=True)
    def _maxpool_back_nhwc_nb(dout, idx, n, hp, wp, window, stride):
        c = dout.shape[3]
        oh, ow = dout.shape[1], dout.shape[2]
        dxp = np.zeros((n, hp, wp, c), dtype=dout.dtype)
        for b in range(n):
            for y in range(oh):
                for x in range(ow):
                    for ch in range(c):
                        k = idx[b, y, x, ch]
                        dxp[b, y * stride + k // window, x * stride + k % window, ch] += \
                            dout[b, y, x, ch]
        return dxp


_NP = {
    "im2col": _im2col_nhwc_np,
    "col2im": _col2im_nhwc_np,
    "bn_stats": _bn_stats_np,
    "bn_apply": _bn_apply_np,
    "bn_back_train": _bn_back_train_np,
    "bn_back_eval": _bn_back_eval_np,
    "maxpool": _maxpool_nhwc_np,
    "maxpool_back": _maxpool_back_nhwc_np,
}
if HAS_NUMBA:
    _NB = {
        "im2col": _im2col_nhwc_nb,
        "col2im": _col2im_nhwc_nb,
        "bn_stats": _bn_stats_nb_entry,
        "bn_apply": _bn_apply_nb,
        "bn_back_train": _bn_back_train_nb,
        "bn_back_eval": _bn_back_eval_nb,
        "maxpool": _maxpool_nhwc_nb,
        "maxpool_back": _maxpool_back_nhwc_nb,
    }
else:
    _NB = _NP


def kernels(name: str) -> dict:
    if name == "numpy":
        return _NP
    if name == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("numba backend requested but numba is not installed")
        return _NB
    raise ValueError(f"unknown backend {name!r}")


_K = kernels(backend.BACKEND)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

@dataclass
class ConvCtx:
    x_shape: tuple
    w: np.ndarray  # canonical (F, C, kh, kw)
    xp: np.ndarray | None  # padded input (shift-GEMM path)
    cols: np.ndarray | None  # im2col matrix (strided path)
    x2d: np.ndarray | None  # flat input (1x1 path)
    stride: int
    padding: int

    def backward(self, dout, need_dx=True):
        return conv_backward(self, dout, need_dx)


def _shift_offsets(kh, kw, p, wp):
    for i in range(kh):
        for j in range(kw):
            yield i, j, (i - p) * wp + (j - p)


def conv_forward(x, w, stride=1, padding=0, want_ctx=False):
    """NHWC convolution. x (N,H,W,C); w canonical (F,C,kh,kw); no bias."""
    n, h, wd, c = x.shape
    f, _, kh, kw = w.shape
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        x2d = x.reshape(n * h * wd, c)
        out = (x2d @ w.reshape(f, c).T).reshape(n, h, wd, f)
        check_finite(out, "conv")
        return out, (ConvCtx(x.shape, w, None, None, x2d, stride, padding) if want_ctx else None)

    if stride == 1:
        # shift-accumulated GEMM over the whole padded grid
        xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0))) \
            if padding else np.ascontiguousarray(x)
        hp, wp = xp.shape[1], xp.shape[2]
        oh, ow = hp - kh + 1, wd + 2 * padding - kw + 1
        xf = xp.reshape(n * hp * wp, c)
        m = xf.shape[0]
        out_full = np.zeros((m, f), dtype=x.dtype)
        for i, j, o in _shift_offsets(kh, kw, padding, wp):
            wij = np.ascontiguousarray(w[:, :, i, j].T)  # (C, F)
            _gemm_acc(xf[max(0, o) : m + min(0, o)], wij, out_full[max(0, -o) : m - max(0, o)])
        out = out_full.reshape(n, hp, wp, f)[:, padding : padding + oh, padding : padding + ow]
        out = np.ascontiguousarray(out)
        check_finite(out, "conv")
        return out, (ConvCtx(x.shape, w, xp, None, None, stride, padding) if want_ctx else None)

    # strided convolutions (stem): im2col + a single GEMM
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x
    cols = _K["im2col"](xp, kh, kw, stride)
    oh, ow = cols.shape[1], cols.shape[2]
    w_mat = np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(kh * kw * c, f)
    out = (cols.reshape(n * oh * ow, kh * kw * c) @ w_mat).reshape(n, oh, ow, f)
    check_finite(out, "conv")
    return out, (ConvCtx(x.shape, w, None, cols, None, stride, padding) if want_ctx else None)


def conv_backward(ctx: ConvCtx, dout, need_dx=True):
    """Returns (dx or None, dw in canonical (F,C,kh,kw) layout)."""
    ctx = _require(ctx)
    n, h, wd, c = ctx.x_shape
    f, _, kh, kw = ctx.w.shape
    p = ctx.padding

    if ctx.x2d is not None:  # 1x1 fast path
        dout2d = dout.reshape(-1, f)
        dw = (ctx.x2d.T @ dout2d).T.reshape(f, c, 1, 1)
        dx = None
        if need_dx:
            dx = (dout2d @ ctx.w.reshape(f, c)).reshape(n, h, wd, c)
            check_finite(dx, "conv_backward")
        return dx, np.ascontiguousarray(dw)

    if ctx.xp is not None:  # shift-GEMM path
        hp, wp = ctx.xp.shape[1], ctx.xp.shape[2]
        oh, ow = dout.shape[1], dout.shape[2]
        xf = ctx.xp.reshape(n * hp * wp, c)
        m = xf.shape[0]
        dout_full = np.zeros((n, hp, wp, f), dtype=dout.dtype)
        dout_full[:, p : p + oh, p : p + ow] = dout
        df = dout_full.reshape(m, f)
        dw = np.empty((f, c, kh, kw), dtype=ctx.w.dtype)
        dxf = np.zeros((m, c), dtype=dout.dtype) if need_dx else None
        for i, j, o in _shift_offsets(kh, kw, p, wp):
            a = xf[max(0, o) : m + min(0, o)]
            d = df[max(0, -o) : m - max(0, o)]
            dw[:, :, i, j] = (a.T @ d).T
            if need_dx:
                wij = np.ascontiguousarray(ctx.w[:, :, i, j])  # (F, C)
                _gemm_acc(d, wij, dxf[max(0, o) : m + min(0, o)])
        dx = None
        if need_dx:
            dx = dxf.reshape(n, hp, wp, c)[:, p : p + h, p : p + wd]
            dx = np.ascontiguousarray(dx)
            check_finite(dx, "conv_backward")
        return dx, dw

    # strided im2col path
    oh, ow = dout.shape[1], dout.shape[2]
    dout2d = dout.reshape(n * oh * ow, f)
    cols2d = ctx.cols.reshape(n * oh * ow, kh * kw * c)
    dw_mat = cols2d.T @ dout2d  # (kh*kw*c, f)
    dw = np.ascontiguousarray(dw_mat.reshape(kh, kw, c, f).transpose(3, 2, 0, 1))
    dx = None
    if need_dx:
        w_mat = np.ascontiguousarray(ctx.w.transpose(2, 3, 1, 0)).reshape(kh * kw * c, f)
        dcols = (dout2d @ w_mat.T).reshape(n, oh, ow, kh, kw, c)
        dxp = _K["col2im"](dcols, n, h + 2 * p, wd + 2 * p, kh, kw, ctx.stride)
        dx = np.ascontiguousarray(dxp[:, p : p + h, p : p + wd, :]) if p else dxp
        check_finite(dx, "conv_backward")
    return dx, dw


# ---------------------------------------------------------------------------
# fused batchnorm (+ optional relu)
# ---------------------------------------------------------------------------

@dataclass
class BNReluCtx:
    x: np.ndarray
    out: np.ndarray
    mean: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    relu: bool
    train_mode: bool

    def backward(self, dout):
        return bnrelu_backward(self, dout)


def bnrelu_forward(x, gamma, beta, state: BNState, mode="train", momentum=0.1,
                   epsilon=1e-5, relu=True, want_ctx=False):
    """Batch normalization over (N,H,W) with an optionally fused ReLU.

    Same statistics conventions as :func:`medbox.ops.batchnorm_forward`.
    """
    n, h, w, c = x.shape
    x2d = x.reshape(-1, c)
    m = x2d.shape[0]
    if mode == "train":
        if m < 2:
            raise ValueError(f"batchnorm train mode needs N*H*W >= 2 per channel, got {m}")
        total, sq_total = _K["bn_stats"](x2d)
        mean = total / m
        var = np.maximum(sq_total / m - mean * mean, 0.0)
        inv_std = 1.0 / np.sqrt(var + epsilon)
        state.running_mean += momentum * (mean - state.running_mean)
        state.running_var += momentum * (var * (m / (m - 1)) - state.running_var)
        state.initialized = True
    elif mode == "eval":
        if not state.initialized:
            raise ValueError(
                "batchnorm eval mode with uninitialized running stats; "
                "train first or load a saved model"
            )
        mean = state.running_mean
        inv_std = 1.0 / np.sqrt(state.running_var.astype(x.dtype) + epsilon)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    mean = mean.astype(x.dtype)
    inv_std = inv_std.astype(x.dtype)
    out2d = _K["bn_apply"](x2d, mean, inv_std, gamma, beta, relu)
    out = out2d.reshape(x.shape)
    check_finite(out, "batchnorm")
    ctx = BNReluCtx(x, out, mean, inv_std, gamma, relu, mode == "train") if want_ctx else None
    return out, ctx


def bnrelu_backward(ctx: BNReluCtx, dout):
    """Returns (dx, dgamma, dbeta)."""
    ctx = _require(ctx)
    c = ctx.gamma.size
    x2d = ctx.x.reshape(-1, c)
    dout2d = np.ascontiguousarray(dout.reshape(-1, c))
    out2d = ctx.out.reshape(-1, c)
    key = "bn_back_train" if ctx.train_mode else "bn_back_eval"
    dx2d, dgamma, dbeta = _K[key](x2d, dout2d, out2d, ctx.mean, ctx.inv_std,
                                  ctx.gamma, ctx.relu)
    dx = dx2d.reshape(dout.shape)
    check_finite(dx, "batchnorm_backward")
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# pooling / global average pooling
# ---------------------------------------------------------------------------

@dataclass
class MaxPoolCtx:
    x_shape: tuple
    idx: np.ndarray
    window: int
    stride: int
    padding: int

    def backward(self, dout):
        return maxpool_backward(self, dout)


def maxpool_forward(x, window, stride, padding=0, want_ctx=False):
    if padding:
        xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)),
                    constant_values=-np.inf)
    else:
        xp = x
    out, idx = _K["maxpool"](xp, window, stride)
    check_finite(out, "maxpool")
    return out, (MaxPoolCtx(x.shape, idx, window, stride, padding) if want_ctx else None)


def maxpool_backward(ctx: MaxPoolCtx, dout):
    ctx = _require(ctx)
    n, h, w, c = ctx.x_shape
    p = ctx.padding
    dxp = _K["maxpool_back"](dout, ctx.idx, n, h + 2 * p, w + 2 * p, ctx.window, ctx.stride)
    return np.ascontiguousarray(dxp[:, p : p + h, p : p + w, :]) if p else dxp


@dataclass
class AvgPool2Ctx:
    x_shape: tuple

    def backward(self, dout):
        return avgpool2_backward(self, dout)


def avgpool2_forward(x, want_ctx=False):
    """2x2/stride-2 average pooling (transition layers).

    Odd trailing rows/columns are never covered by a window (floor output
    size), so they are cropped before the reshape-mean.
    """
    n, h, w, c = x.shape
    he, we = h - h % 2, w - w % 2
    xc = x[:, :he, :we, :]
    out = xc.reshape(n, he // 2, 2, we // 2, 2, c).mean(axis=(2, 4))
    check_finite(out, "avgpool2")
    return out, (AvgPool2Ctx(x.shape) if want_ctx else None)


def avgpool2_backward(ctx: AvgPool2Ctx, dout):
    ctx = _require(ctx)
    n, h, w, c = ctx.x_shape
    he, we = h - h % 2, w - w % 2
    g = (dout * dout.dtype.type(0.25))[:, :, None, :, None, :]
    dx = np.broadcast_to(g, (n, he // 2, 2, we // 2, 2, c)).reshape(n, he, we, c)
    if he != h or we != w:
        dx = np.pad(dx, ((0, 0), (0, h - he), (0, w - we), (0, 0)))
    return np.ascontiguousarray(dx)


@dataclass
class GapCtx:
    x_shape: tuple

    def backward(self, dout):
        return gap_backward(self, dout)


def gap_forward(x, want_ctx=False):
    n, h, w, c = x.shape
    out = x.reshape(n, h * w, c).mean(axis=1)
    return out, (GapCtx(x.shape) if want_ctx else None)


def gap_backward(ctx: GapCtx, dout):
    ctx = _require(ctx)
    n, h, w, c = ctx.x_shape
    dx = np.broadcast_to(dout[:, None, None, :] / dout.dtype.type(h * w), ctx.x_shape)
    return np.ascontiguousarray(dx)
