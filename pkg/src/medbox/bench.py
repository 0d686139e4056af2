"""Benchmarks: jitted kernels against their pure-numpy fallbacks, plus an
end-to-end forward/backward timing of the desk-scale network.
"""
from __future__ import annotations

import time

import numpy as np

from . import backend, fused


def _time(fn, *args, repeats=5):
    fn(*args)  # warmup / compile
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats * 1e3


def kernel_comparison(repeats: int = 5) -> list[dict]:
    """Per-kernel numpy-vs-numba timings in milliseconds."""
    rng = np.random.default_rng(0)
    rows = []

    def row(name, np_fn, nb_fn, *args):
        t_np = _time(np_fn, *args, repeats=repeats)
        t_nb = _time(nb_fn, *args, repeats=repeats)
        rows.append({"kernel": name, "numpy_ms": t_np, "numba_ms": t_nb,
                     "speedup": t_np / t_nb if t_nb > 0 else float("inf")})

    NP, NB = backend.kernels("numpy"), backend.kernels("numba")
    xp = rng.standard_normal((8, 24, 66, 66)).astype(np.float32)
    row("im2col 3x3 (NCHW)", NP["im2col"], NB["im2col"], xp, 3, 3, 1)
    dcols = rng.standard_normal((8, 64, 64, 24, 3, 3)).astype(np.float32)
    row("col2im 3x3 (NCHW)", NP["col2im"], NB["col2im"], dcols, 8, 24, 66, 66, 3, 3, 1)
    xm = rng.standard_normal((8, 24, 64, 64)).astype(np.float32)
    row("maxpool 3x3/2", NP["maxpool"], NB["maxpool"], xm, 3, 2)
    row("avgpool 3x3/2", NP["avgpool"], NB["avgpool"], xm, 3, 2, 1)
    img = rng.random((480, 640, 3)).astype(np.float32)
    row("resize 640->224", NP["resize_bilinear"], NB["resize_bilinear"], img, 224, 224)
    row("rotate 15deg", NP["rotate_bilinear"], NB["rotate_bilinear"], img, 0.26)

    FNP, FNB = fused.kernels("numpy"), fused.kernels("numba")
    xh = rng.standard_normal((8, 66, 66, 24)).astype(np.float32)
    row("im2col 3x3 (NHWC)", FNP["im2col"], FNB["im2col"], xh, 3, 3, 1)
    x2d = rng.standard_normal((8 * 64 * 64, 24)).astype(np.float32)
    mean = x2d.mean(0)
    inv = (1.0 / x2d.std(0)).astype(np.float32)
    g = np.ones(24, np.float32)
    b = np.zeros(24, np.float32)
    row("bn stats", FNP["bn_stats"], FNB["bn_stats"], x2d)
    row("bn apply+relu", FNP["bn_apply"], FNB["bn_apply"], x2d, mean, inv, g, b, True)
    out2d = FNB["bn_apply"](x2d, mean, inv, g, b, True)
    d2d = rng.standard_normal(x2d.shape).astype(np.float32)
    row("bn backward", FNP["bn_back_train"], FNB["bn_back_train"],
        x2d, d2d, out2d, mean, inv, g, True)
    return rows


def format_kernel_table(rows: list[dict]) -> str:
    header = f"{'kernel':<22} {'numpy':>10} {'numba':>10} {'speedup':>8}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r['kernel']:<22} {r['numpy_ms']:>8.2f}ms {r['numba_ms']:>8.2f}ms "
                     f"{r['speedup']:>7.1f}x")
    return "\n".join(lines)


def training_step_benchmark(batch_size: int = 32, repeats: int = 3) -> dict:
    """Forward+backward timing of the desk model at 64 px."""
    from .net import build, desk_config
    from .train import cross_entropy

    net = build(desk_config(growth_rate=12, block_layout=(2, 4, 4),
                            num_classes=8, input_px=64), seed=0)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((batch_size, 3, 64, 64)).astype(np.float32)
    y = rng.integers(0, 8, batch_size)

    def step():
        logits, tape = net.forward(x, mode="train", want_ctx=True)
        _, d = cross_entropy(logits, y)
        net.backward(tape, d)

    ms = _time(step, repeats=repeats)
    return {"batch_size": batch_size, "step_ms": ms,
            "images_per_s": batch_size / (ms / 1e3)}
