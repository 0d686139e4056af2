"""Layer primitives with explicit forward/backward pairs.

Every forward takes ``want_ctx``; when true it returns a context object whose
``backward(upstream)`` yields a :class:`LayerGrad`. There is no autograd
graph: composite layers chain these calls in reverse order themselves.

All ops preserve the input dtype. Production code runs float32; gradient
verification runs the same code paths in float64.

Outputs are checked for NaN/Inf after every op (disable with
``MEDBOX_FINITE_CHECKS=0`` for benchmarking).
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import backend
from .errors import MissingContext, NonFiniteError, ShapeMismatch

FINITE_CHECKS = os.environ.get("MEDBOX_FINITE_CHECKS", "1") != "0"


def check_finite(arr: np.ndarray, op: str) -> None:
    if not FINITE_CHECKS:
        return
    # single-pass reduction: any NaN/Inf propagates into the sum
    if not np.isfinite(float(arr.sum())):
        raise NonFiniteError(f"{op} produced non-finite values")


@dataclass
class LayerGrad:
    """Gradients of one op: w.r.t. its input and each named parameter."""

    input_grad: np.ndarray
    param_grads: dict[str, np.ndarray] = field(default_factory=dict)


def _require(ctx):
    if ctx is None:
        raise MissingContext("backward requires a forward pass with want_ctx=True")
    return ctx


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

@dataclass
class Conv2dCtx:
    x_shape: tuple
    w: np.ndarray
    cols: np.ndarray | None  # None on the 1x1 fast path
    x_mat: np.ndarray | None  # (N,C,H*W) view used by the 1x1 fast path
    stride: int
    padding: int

    def backward(self, dout: np.ndarray) -> LayerGrad:
        return conv2d_backward(self, dout)


def conv2d_forward(x, w, stride=1, padding=0, want_ctx=False):
    """Cross-correlate NCHW input with (F,C,kh,kw) weights. No bias.

    Output H' = floor((H + 2*padding - kh)/stride) + 1, likewise W'.
    """
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeMismatch(
            f"conv2d: input shape {x.shape} has {c} channels but weight shape "
            f"{w.shape} expects {cw}"
        )
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeMismatch(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{wd + 2 * padding}"
        )
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        x_mat = x.reshape(n, c, h * wd)
        out = np.matmul(w.reshape(f, c), x_mat).reshape(n, f, h, wd)
        check_finite(out, "conv2d")
        ctx = Conv2dCtx(x.shape, w, None, x_mat, stride, padding) if want_ctx else None
        return out, ctx

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = backend.im2col(xp, kh, kw, stride)  # (N,OH,OW,C,kh,kw)
    oh, ow = cols.shape[1], cols.shape[2]
    out = cols.reshape(n * oh * ow, c * kh * kw) @ w.reshape(f, -1).T
    out = np.ascontiguousarray(out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2))
    check_finite(out, "conv2d")
    ctx = Conv2dCtx(x.shape, w, cols, None, stride, padding) if want_ctx else None
    return out, ctx


def conv2d_backward(ctx: Conv2dCtx, dout: np.ndarray) -> LayerGrad:
    ctx = _require(ctx)
    n, c, h, wd = ctx.x_shape
    w = ctx.w
    f, _, kh, kw = w.shape

    if ctx.cols is None:  # 1x1 stride-1 fast path
        dout_mat = dout.reshape(n, f, h * wd)
        dw = np.matmul(dout_mat, ctx.x_mat.transpose(0, 2, 1)).sum(axis=0)
        dx = np.matmul(w.reshape(f, c).T, dout_mat).reshape(n, c, h, wd)
        check_finite(dx, "conv2d_backward")
        return LayerGrad(dx, {"weight": dw.reshape(w.shape)})

    oh, ow = dout.shape[2], dout.shape[3]
    dout_mat = dout.transpose(0, 2, 3, 1).reshape(n * oh * ow, f)
    dw = dout_mat.T @ ctx.cols.reshape(n * oh * ow, c * kh * kw)
    dcols = (dout_mat @ w.reshape(f, -1)).reshape(n, oh, ow, c, kh, kw)
    p = ctx.padding
    dxp = backend.col2im(dcols, n, c, h + 2 * p, wd + 2 * p, kh, kw, ctx.stride)
    dx = dxp[:, :, p : p + h, p : p + wd] if p else dxp
    dx = np.ascontiguousarray(dx)
    check_finite(dx, "conv2d_backward")
    return LayerGrad(dx, {"weight": dw.reshape(w.shape)})


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

class BNState:
    """Per-layer running statistics; updated in train mode only."""

    __slots__ = ("running_mean", "running_var", "initialized")

    def __init__(self, channels: int, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.initialized = False


@dataclass
class BatchNormCtx:
    xhat: np.ndarray
    inv_std: np.ndarray  # per-channel, broadcastable
    gamma: np.ndarray
    train_mode: bool

    def backward(self, dout: np.ndarray) -> LayerGrad:
        return batchnorm_backward(self, dout)


def batchnorm_forward(x, gamma, beta, state: BNState, mode="train",
                      momentum=0.1, epsilon=1e-5, want_ctx=False):
    """Normalize per channel over (N,H,W); affine transform with gamma/beta.

    Train mode uses batch statistics and updates the running estimates
    (running variance uses the unbiased batch variance). Eval mode uses the
    running estimates and requires them to have been initialized.
    """
    n, c, h, w = x.shape
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ValueError(f"batchnorm train mode needs N*H*W >= 2 per channel, got {m}")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + epsilon)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        unbiased = var * (m / (m - 1))
        state.running_mean += momentum * (mean - state.running_mean)
        state.running_var += momentum * (unbiased - state.running_var)
        state.initialized = True
    elif mode == "eval":
        if not state.initialized:
            raise ValueError(
                "batchnorm eval mode with uninitialized running stats; "
                "train first or load a saved model"
            )
        inv_std = 1.0 / np.sqrt(state.running_var.astype(x.dtype) + epsilon)
        xhat = (x - state.running_mean.astype(x.dtype)[None, :, None, None]) \
            * inv_std[None, :, None, None]
    else:
        raise ValueError(f"unknown mode {mode!r}")

    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    check_finite(out, "batchnorm")
    ctx = BatchNormCtx(xhat, inv_std.astype(x.dtype), gamma, mode == "train") if want_ctx else None
    return out, ctx


def batchnorm_backward(ctx: BatchNormCtx, dout: np.ndarray) -> LayerGrad:
    ctx = _require(ctx)
    xhat, gamma = ctx.xhat, ctx.gamma
    dbeta = dout.sum(axis=(0, 2, 3))
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    if ctx.train_mode:
        n, c, h, w = dout.shape
        m = n * h * w
        dxhat = dout * gamma[None, :, None, None]
        dx = (ctx.inv_std[None, :, None, None] / m) * (
            m * dxhat
            - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        )
    else:
        dx = dout * (gamma * ctx.inv_std)[None, :, None, None]
    check_finite(dx, "batchnorm_backward")
    return LayerGrad(dx, {"gamma": dgamma, "beta": dbeta})


# ---------------------------------------------------------------------------
# activation
# ---------------------------------------------------------------------------

@dataclass
class ReluCtx:
    mask: np.ndarray

    def backward(self, dout: np.ndarray) -> LayerGrad:
        return relu_backward(self, dout)


def relu_forward(x, want_ctx=False):
    """Elementwise max(0, x)."""
    mask = x > 0
    out = np.where(mask, x, x.dtype.type(0))
    return out, (ReluCtx(mask) if want_ctx else None)


def relu_backward(ctx: ReluCtx, dout: np.ndarray) -> LayerGrad:
    ctx = _require(ctx)
    return LayerGrad(np.where(ctx.mask, dout, dout.dtype.type(0)))


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

@dataclass
class Pool2dCtx:
    kind: str
    x_shape: tuple
    window: int
    stride: int
    padding: int
    idx: np.ndarray | None  # max: winning in-window offset
    counts: np.ndarray | None  # average: in-bounds cell count per window
    fast: bool  # average fast path (window == stride, no padding)

    def backward(self, dout: np.ndarray) -> LayerGrad:
        return pool2d_backward(self, dout)


def pool2d_forward(x, kind="max", window=2, stride=2, padding=0, want_ctx=False):
    """Window-wise max or mean. Average divisors exclude padded cells."""
    n, c, h, w = x.shape
    if window < 1:
        raise ValueError(f"pool2d: window must be >= 1, got {window}")
    if window > h + 2 * padding or window > w + 2 * padding:
        raise ShapeMismatch(
            f"pool2d: window {window} larger than padded input "
            f"{h + 2 * padding}x{w + 2 * padding}"
        )
    if kind == "average":
        if padding == 0 and window == stride and h % window == 0 and w % window == 0:
            out = x.reshape(n, c, h // window, window, w // window, window).mean(axis=(3, 5))
            out = np.ascontiguousarray(out)
            ctx = Pool2dCtx(kind, x.shape, window, stride, padding, None, None, True) \
                if want_ctx else None
            check_finite(out, "pool2d")
            return out, ctx
        out, counts = backend.avgpool(x, window, stride, padding)
        ctx = Pool2dCtx(kind, x.shape, window, stride, padding, None, counts, False) \
            if want_ctx else None
        check_finite(out, "pool2d")
        return out, ctx
    if kind == "max":
        if padding:
            xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                        constant_values=-np.inf)
        else:
            xp = x
        out, idx = backend.maxpool(xp, window, stride)
        ctx = Pool2dCtx(kind, x.shape, window, stride, padding, idx, None, False) \
            if want_ctx else None
        check_finite(out, "pool2d")
        return out, ctx
    raise ValueError(f"pool2d: unknown kind {kind!r}")


def pool2d_backward(ctx: Pool2dCtx, dout: np.ndarray) -> LayerGrad:
    ctx = _require(ctx)
    n, c, h, w = ctx.x_shape
    if ctx.kind == "average":
        if ctx.fast:
            k = ctx.window
            dx = np.broadcast_to(
                (dout / (k * k))[:, :, :, None, :, None],
                (n, c, h // k, k, w // k, k),
            ).reshape(n, c, h, w)
            return LayerGrad(np.ascontiguousarray(dx))
        dx = backend.avgpool_back(dout, ctx.counts, n, c, h, w,
                                  ctx.window, ctx.stride, ctx.padding)
        return LayerGrad(dx)
    p = ctx.padding
    dxp = backend.maxpool_back(dout, ctx.idx, n, c, h + 2 * p, w + 2 * p,
                               ctx.window, ctx.stride)
    dx = dxp[:, :, p : p + h, p : p + w] if p else dxp
    return LayerGrad(np.ascontiguousarray(dx))


# ---------------------------------------------------------------------------
# channel concatenation
# ---------------------------------------------------------------------------

@dataclass
class ConcatCtx:
    channels: list[int]

    def backward(self, dout: np.ndarray) -> list[np.ndarray]:
        return concat_backward(self, dout)


def concat_channels(inputs, want_ctx=False):
    """Concatenate NCHW tensors along the channel axis, order preserved."""
    if not inputs:
        raise ValueError("concat_channels: need at least one input")
    ref = inputs[0].shape
    for i, t in enumerate(inputs):
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeMismatch(
                f"concat_channels: input {i} has shape {t.shape}, expected "
                f"N={ref[0]} and spatial size {ref[2:]} as input 0 {ref}"
            )
    out = inputs[0] if len(inputs) == 1 else np.concatenate(inputs, axis=1)
    ctx = ConcatCtx([t.shape[1] for t in inputs]) if want_ctx else None
    return out, ctx


def concat_backward(ctx: ConcatCtx, dout: np.ndarray) -> list[np.ndarray]:
    """Split the upstream gradient back into per-input slices (exact)."""
    ctx = _require(ctx)
    grads = []
    start = 0
    for ch in ctx.channels:
        grads.append(dout[:, start : start + ch])
        start += ch
    return grads


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------

@dataclass
class LinearCtx:
    x: np.ndarray
    w: np.ndarray

    def backward(self, dout: np.ndarray) -> LayerGrad:
        return linear_backward(self, dout)


def linear_forward(x, w, b, want_ctx=False):
    """x (N,D) @ w (K,D)^T + b (K)."""
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(
            f"linear: input shape {x.shape} incompatible with weight shape {w.shape}"
        )
    out = x @ w.T + b
    check_finite(out, "linear")
    return out, (LinearCtx(x, w) if want_ctx else None)


def linear_backward(ctx: LinearCtx, dout: np.ndarray) -> LayerGrad:
    ctx = _require(ctx)
    dw = dout.T @ ctx.x
    db = dout.sum(axis=0)
    dx = dout @ ctx.w
    check_finite(dx, "linear_backward")
    return LayerGrad(dx, {"weight": dw, "bias": db})


# ---------------------------------------------------------------------------
# global average pooling
# ---------------------------------------------------------------------------

@dataclass
class GapCtx:
    x_shape: tuple

    def backward(self, dout: np.ndarray) -> LayerGrad:
        return gap_backward(self, dout)


def gap_forward(x, want_ctx=False):
    """Global average pool NCHW -> (N,C)."""
    out = x.mean(axis=(2, 3))
    return out, (GapCtx(x.shape) if want_ctx else None)


def gap_backward(ctx: GapCtx, dout: np.ndarray) -> LayerGrad:
    ctx = _require(ctx)
    n, c, h, w = ctx.x_shape
    dx = np.broadcast_to(dout[:, :, None, None] / (h * w), ctx.x_shape)
    return LayerGrad(np.ascontiguousarray(dx))
