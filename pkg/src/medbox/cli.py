"""Command-line interface: dataset generation, training, ablation studies,
the inference service, and benchmarks.
"""
from __future__ import annotations

import json
import os

import click
import numpy as np


@click.group()
def main():
    """Medicinal-box recognition toolkit."""


def _parse_blocks(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _model_config(growth_rate, phi, blocks, classes, image_size, stem, stem_channels):
    from .net import ModelConfig

    return ModelConfig(
        growth_rate=growth_rate,
        compression=phi,
        block_layout=_parse_blocks(blocks),
        num_classes=classes,
        stem_channels=stem_channels,
        input_size=(3, image_size, image_size),
        stem=stem,
    )


@main.command()
@click.option("--classes", default=8, show_default=True)
@click.option("--per-class", default=40, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--image-size", default=64, show_default=True)
@click.option("--out", required=True, type=click.Path())
def generate(classes, per_class, seed, image_size, out):
    """Render a synthetic box dataset plus a matching demo catalog."""
    from .synthetic import generate_synthetic, write_demo_catalog

    manifest = generate_synthetic(classes, per_class, seed, out, image_size)
    write_demo_catalog(manifest, os.path.join(out, "catalog.json"))
    click.echo(f"wrote {len(manifest.samples)} images across "
               f"{manifest.num_classes} classes under {out}")


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="Run-config JSON mirroring TrainConfig.")
@click.option("--growth-rate", default=12, show_default=True)
@click.option("--phi", default=0.5, show_default=True)
@click.option("--blocks", default="2,4,4", show_default=True)
@click.option("--image-size", default=64, show_default=True)
@click.option("--stem", default="reduced", type=click.Choice(["reduced", "full"]),
              show_default=True)
@click.option("--freeze", "freeze_policy", default=None,
              type=click.Choice(["full", "backbone_frozen"]))
@click.option("--init-model", type=click.Path(exists=True),
              help="Start from a saved model instead of fresh initialization.")
@click.option("--model-out", required=True, type=click.Path())
@click.option("--log-out", type=click.Path(), help="Per-epoch CSV log path.")
@click.option("--seed", default=0, show_default=True)
def train(manifest_path, config_path, growth_rate, phi, blocks, image_size, stem,
          freeze_policy, init_model, model_out, log_out, seed):
    """Train (or fine-tune) a model on a manifest dataset."""
    from dataclasses import replace

    from . import modelio
    from .data import ImageDataset, load_manifest
    from .net import build
    from .train import TrainConfig, fit, write_epoch_log

    manifest = load_manifest(manifest_path)
    if config_path:
        tcfg = TrainConfig.load(config_path)
    else:
        tcfg = TrainConfig(epochs=30, lr_drops=((16, 0.1), (24, 0.1)),
                           batch_size=32, seed=seed)
    if freeze_policy:
        tcfg = replace(tcfg, freeze_policy=freeze_policy)

    if init_model:
        net = modelio.load(init_model)
    else:
        mcfg = _model_config(growth_rate, phi, blocks, manifest.num_classes,
                             image_size, stem, None)
        net = build(mcfg, seed=seed)
    data = ImageDataset(manifest, image_size=net.config.input_size[1:])
    result = fit(net, data, tcfg,
                 callbacks=[lambda s: click.echo(
                     f"epoch {s.epoch:3d}  lr {s.lr:.4f}  loss {s.loss:.4f}  "
                     f"acc {s.train_acc:.3f}")])
    modelio.save(net, model_out)
    if log_out:
        write_epoch_log(log_out, result.log)
    click.echo(f"saved model to {model_out}")


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--grid", default="4,8,12", show_default=True,
              help="Growth rates, e.g. k=4,8,16 or 4,8,16.")
@click.option("--phi", default="0.5", show_default=True,
              help="Compression values; a single value or comma list.")
@click.option("--blocks", default="2,4,4", show_default=True)
@click.option("--image-size", default=64, show_default=True)
@click.option("--epochs", default=30, show_default=True)
@click.option("--repetitions", default=10, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--workers", default=None, type=int)
@click.option("--out", required=True, type=click.Path())
def ablate(manifest_path, grid, phi, blocks, image_size, epochs, repetitions,
           seed, workers, out):
    """Cross-validated ablation over growth rate and compression."""
    from .data import load_manifest, make_splits
    from .evaluate import (ablate as run_ablation, format_ablation_table,
                           write_ablation_csv, write_confusion_csv,
                           write_confusion_ppm)
    from .train import TrainConfig

    manifest = load_manifest(manifest_path)
    ks = [int(v) for v in grid.removeprefix("k=").split(",") if v.strip()]
    phis = [float(v) for v in phi.split(",") if v.strip()]
    pairs = [(k, p) for p in phis for k in ks]
    base = _model_config(ks[0], phis[0], blocks, manifest.num_classes,
                         image_size, "reduced", None)
    drops = tuple(d for d in ((max(1, epochs * 16 // 30), 0.1),
                              (max(2, epochs * 24 // 30), 0.1)) if d[0] < epochs)
    tcfg = TrainConfig(epochs=epochs, lr_drops=drops, batch_size=32, seed=seed)
    plan = make_splits(manifest, fraction=0.8, repetitions=repetitions, seed=seed)
    result = run_ablation(manifest, pairs, tcfg, base, plan, workers=workers)

    os.makedirs(out, exist_ok=True)
    table = format_ablation_table(result)
    click.echo(table)
    with open(os.path.join(out, "ablation.txt"), "w", encoding="utf-8") as f:
        f.write(table + "\n")
    write_ablation_csv(result, os.path.join(out, "ablation.csv"))
    for row, cv in zip(result.rows, result.results):
        pooled = cv.pooled_confusion()
        write_confusion_csv(pooled, os.path.join(out, f"confusion_{row.config_id}.csv"))
        write_confusion_ppm(pooled, os.path.join(out, f"confusion_{row.config_id}.ppm"))
    click.echo(f"reports written to {out}")


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--catalog", "catalog_path", required=True, type=click.Path(exists=True))
@click.option("--lambda", "threshold", default=0.85, show_default=True,
              help="Confidence threshold; 0 disables it.")
@click.option("--bind", default="127.0.0.1:8008", show_default=True)
def serve(model_path, catalog_path, threshold, bind):
    """Run the classification HTTP service."""
    from .service import EngineConfig, InferenceEngine, serve as run

    host, _, port = bind.partition(":")
    engine = InferenceEngine.load(EngineConfig(model_path, catalog_path, threshold))
    cfg = engine.net.config
    click.echo(f"serving model (k={cfg.growth_rate}, classes={cfg.num_classes}, "
               f"lambda={threshold}) on http://{bind}")
    run(engine, host or "127.0.0.1", int(port or 8008))


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--catalog", "catalog_path", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", type=click.Path(exists=True),
              help="Sample benchmark frames from this dataset.")
@click.option("--iterations", default=200, show_default=True)
def bench(model_path, catalog_path, manifest_path, iterations):
    """Measure end-to-end classify latency (p50/p95, throughput)."""
    import io

    from PIL import Image

    from .service import EngineConfig, InferenceEngine, benchmark

    engine = InferenceEngine.load(EngineConfig(model_path, catalog_path))
    frames = []
    if manifest_path:
        from .data import load_manifest

        manifest = load_manifest(manifest_path)
        for i in range(0, len(manifest.samples), max(1, len(manifest.samples) // 16)):
            with open(manifest.sample_path(i), "rb") as f:
                frames.append(f.read())
    else:
        rng = np.random.default_rng(0)
        px = engine.net.config.input_size[1]
        for _ in range(8):
            arr = rng.integers(0, 256, (px, px, 3), dtype=np.uint8)
            buf = io.BytesIO()
            Image.fromarray(arr).save(buf, format="PNG")
            frames.append(buf.getvalue())
    report = benchmark(engine, frames, iterations)
    click.echo(f"iterations: {report.iterations}")
    click.echo(f"p50: {report.p50_ms:.2f} ms   p95: {report.p95_ms:.2f} ms   "
               f"throughput: {report.fps:.1f} frames/s")


@main.command("bench-kernels")
@click.option("--repeats", default=5, show_default=True)
def bench_kernels(repeats):
    """Compare the jitted kernels against the pure-numpy fallbacks."""
    from .bench import format_kernel_table, kernel_comparison, training_step_benchmark

    click.echo(format_kernel_table(kernel_comparison(repeats)))
    step = training_step_benchmark()
    click.echo(f"\ndesk-model train step (batch {step['batch_size']}): "
               f"{step['step_ms']:.0f} ms = {step['images_per_s']:.1f} images/s")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True),
              help="torch .pth state dict of a torchvision-style densenet")
@click.option("--growth-rate", default=32, show_default=True)
@click.option("--blocks", default="6,12,24,16", show_default=True)
@click.option("--classes", default=63, show_default=True)
@click.option("--stem-channels", default=64, show_default=True)
@click.option("--image-size", default=224, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--reference", type=click.Path(),
              help="Also record reference logits for verification.")
def convert(checkpoint, growth_rate, blocks, classes, stem_channels, image_size,
            out, reference):
    """Convert a torch densenet checkpoint into the model file format."""
    import torch

    from .convert import convert_checkpoint

    state = torch.load(checkpoint, map_location="cpu", weights_only=True)
    cfg = _model_config(growth_rate, 0.5, blocks, classes, image_size,
                        "full", stem_channels)
    convert_checkpoint(state, cfg, out, reference)
    click.echo(f"converted {checkpoint} -> {out}")


if __name__ == "__main__":
    main()
