"""Metrics, confusion matrices, the cross-validation driver, and the
growth-rate/compression ablation harness.

Repetitions are independent and run in worker processes (each with
single-threaded BLAS); results are aggregated in repetition order, so the
outcome does not depend on scheduling.
"""
from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import multiprocessing as mp

import numpy as np

from .data import AugmentPolicy, DatasetManifest, ImageDataset, SplitPlan, load_manifest
from .net import ModelConfig, Network, build
from .train import TrainConfig, fit


# ---------------------------------------------------------------------------
# confusion matrix and metrics
# ---------------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (K, K); rows = true class, columns = predicted

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(true_labels, predicted, num_classes: int) -> ConfusionMatrix:
    true_labels = np.asarray(true_labels)
    predicted = np.asarray(predicted)
    if true_labels.size and (
        true_labels.min() < 0 or true_labels.max() >= num_classes
        or predicted.min() < 0 or predicted.max() >= num_classes
    ):
        raise ValueError(f"labels outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (true_labels, predicted), 1)
    return ConfusionMatrix(counts)


@dataclass
class PerClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    accuracy: float
    precision: float  # support-weighted
    recall: float     # support-weighted (equals accuracy exactly)
    f1: float         # support-weighted
    per_class: list[PerClassMetrics] = field(default_factory=list)


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Support-weighted precision/recall/f1 plus accuracy.

    Per class: precision = diag/colsum (0 when the class is never
    predicted), recall = diag/rowsum, f1 their harmonic mean (0 when both
    are 0). Weighted averages use row sums (supports) as weights, which
    makes weighted recall equal accuracy identically.

    Counts are integers, so the weighted averages are evaluated in exact
    rational arithmetic and rounded once at the end; the recall/accuracy
    identity then holds bit-for-bit, not just to rounding.
    """
    from fractions import Fraction

    counts = cm.counts
    total = int(counts.sum())
    if total < 1:
        raise ValueError("empty confusion matrix")
    k = cm.num_classes
    diag = [int(counts[i, i]) for i in range(k)]
    rowsum = [int(counts[i, :].sum()) for i in range(k)]
    colsum = [int(counts[:, i].sum()) for i in range(k)]

    prec = [Fraction(diag[i], colsum[i]) if colsum[i] else Fraction(0)
            for i in range(k)]
    rec = [Fraction(diag[i], rowsum[i]) if rowsum[i] else Fraction(0)
           for i in range(k)]
    f1 = [2 * prec[i] * rec[i] / (prec[i] + rec[i]) if prec[i] + rec[i] else Fraction(0)
          for i in range(k)]
    weights = [Fraction(rowsum[i], total) for i in range(k)]

    per_class = [PerClassMetrics(float(prec[i]), float(rec[i]), float(f1[i]), rowsum[i])
                 for i in range(k)]
    return MetricsReport(
        accuracy=float(Fraction(sum(diag), total)),
        precision=float(sum(w * p for w, p in zip(weights, prec))),
        recall=float(sum(w * r for w, r in zip(weights, rec))),
        f1=float(sum(w * f for w, f in zip(weights, f1))),
        per_class=per_class,
    )


# ---------------------------------------------------------------------------
# cross-validation driver
# ---------------------------------------------------------------------------

@dataclass
class CVResult:
    mean: MetricsReport
    std: dict  # metric name -> std over repetitions
    per_repetition: list[MetricsReport]
    confusions: list[ConfusionMatrix]
    logs: list[list[tuple]] = field(default_factory=list)  # per-rep epoch logs

    def pooled_confusion(self) -> ConfusionMatrix:
        return ConfusionMatrix(sum(c.counts for c in self.confusions))


def derive_seed(global_seed: int, repetition: int) -> int:
    return int(np.random.SeedSequence((global_seed, repetition)).generate_state(1)[0])


def _run_repetition(manifest_path: str, model_cfg: dict, train_cfg: dict,
                    train_idx, test_idx, repetition: int, image_size,
                    return_params: bool):
    """Train one repetition and evaluate its held-out split.

    Module-level so process pools can import it. Returns the confusion
    counts, the epoch log, and optionally the trained parameters.
    """
    manifest = load_manifest(manifest_path)
    mcfg = ModelConfig.from_dict(model_cfg)
    tcfg = TrainConfig.from_dict(train_cfg)
    train_ds = ImageDataset(manifest, train_idx, image_size=image_size)
    test_ds = ImageDataset(manifest, test_idx, image_size=image_size,
                           policy=AugmentPolicy(enabled=False))
    net = build(mcfg, seed=derive_seed(tcfg.seed, repetition))
    result = fit(net, train_ds, tcfg)
    x, y = test_ds.eval_tensors()
    preds = batched_predictions(net, x)
    cm = confusion(y, preds, mcfg.num_classes)
    out = {
        "counts": cm.counts,
        "log": [(r.epoch, r.lr, r.loss, r.train_acc) for r in result.log],
    }
    if return_params:
        out["params"] = net.params
        out["bn_stats"] = {
            name: (st.running_mean, st.running_var, st.initialized)
            for name, st in net.bn_states.items()
        }
    return out


def batched_predictions(net: Network, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    preds = []
    for i in range(0, len(x), batch_size):
        logits = net.forward(x[i : i + batch_size], mode="eval")
        preds.append(logits.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def cross_validate(manifest: DatasetManifest, model_cfg: ModelConfig,
                   train_cfg: TrainConfig, splits: SplitPlan,
                   image_size=None, workers: int | None = None,
                   return_model: bool = False):
    """Train/evaluate once per split repetition and aggregate the metrics.

    Returns a CVResult, or (CVResult, Network) when ``return_model`` is set
    (the repetition-0 model, rebuilt from the worker's parameters).
    """
    if image_size is None:
        image_size = model_cfg.input_size[1:]
    manifest_path = os.path.join(manifest.root, "manifest.json")
    jobs = [
        (manifest_path, model_cfg.to_dict(), train_cfg.to_dict(),
         train_idx, test_idx, rep, tuple(image_size), return_model and rep == 0)
        for rep, (train_idx, test_idx) in enumerate(splits.repetitions)
    ]
    if workers is None:
        workers = min(len(jobs), os.cpu_count() or 1)

    if workers <= 1:
        raws = [_run_repetition(*job) for job in jobs]
    else:
        ctx = mp.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            raws = list(pool.map(_run_repetition_star, jobs))

    confusions = [ConfusionMatrix(r["counts"]) for r in raws]
    reports = [metrics(cm) for cm in confusions]
    mean = MetricsReport(
        accuracy=float(np.mean([r.accuracy for r in reports])),
        precision=float(np.mean([r.precision for r in reports])),
        recall=float(np.mean([r.recall for r in reports])),
        f1=float(np.mean([r.f1 for r in reports])),
    )
    std = {
        "accuracy": float(np.std([r.accuracy for r in reports])),
        "precision": float(np.std([r.precision for r in reports])),
        "recall": float(np.std([r.recall for r in reports])),
        "f1": float(np.std([r.f1 for r in reports])),
    }
    result = CVResult(mean, std, reports, confusions, [r["log"] for r in raws])
    if not return_model:
        return result
    net = build(model_cfg, seed=derive_seed(train_cfg.seed, 0))
    net.params = {k: np.asarray(v) for k, v in raws[0]["params"].items()}
    for name, (rm, rv, init) in raws[0]["bn_stats"].items():
        st = net.bn_states[name]
        st.running_mean = np.asarray(rm)
        st.running_var = np.asarray(rv)
        st.initialized = bool(init)
    return result, net


def _run_repetition_star(job):
    return _run_repetition(*job)


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    config_id: str
    growth_rate: int
    compression: float
    params: int
    memory_bytes: int
    accuracy: float
    precision: float
    recall: float
    f1: float


@dataclass
class AblationResult:
    rows: list[AblationRow]
    results: list[CVResult]


def ablate(manifest: DatasetManifest, grid: list[tuple[int, float]],
           train_cfg: TrainConfig, model_base: ModelConfig,
           splits: SplitPlan, workers: int | None = None,
           reuse: dict | None = None) -> AblationResult:
    """Run one cross-validation per (growth rate, compression) setting.

    ``reuse`` maps (k, phi) to an already-computed CVResult for the same
    manifest/splits/train config, so a grid can incorporate a prior run
    without re-training it.
    """
    if not grid:
        raise ValueError("ablation grid is empty")
    reuse = reuse or {}
    rows, results = [], []
    for k, phi in grid:
        cfg = replace(model_base, growth_rate=k, compression=phi)
        report = build(cfg, seed=0).count_params()
        cv = reuse.get((k, phi)) or cross_validate(manifest, cfg, train_cfg,
                                                   splits, workers=workers)
        rows.append(AblationRow(
            config_id=f"k{k}-phi{phi:g}",
            growth_rate=k,
            compression=phi,
            params=report.total_params,
            memory_bytes=report.memory_bytes,
            accuracy=cv.mean.accuracy,
            precision=cv.mean.precision,
            recall=cv.mean.recall,
            f1=cv.mean.f1,
        ))
        results.append(cv)
    return AblationResult(rows, results)


def format_ablation_table(result: AblationResult, model_name: str = "densenet") -> str:
    """Plain-text table in the column order Model, k, phi, Params, Memory,
    Accuracy, Precision, Recall, F1."""
    header = (f"{'Model':<12} {'k':>4} {'phi':>5} {'Params':>10} {'Memory':>9} "
              f"{'Accuracy':>9} {'Precision':>10} {'Recall':>8} {'F1':>8}")
    lines = [header, "-" * len(header)]
    for r in result.rows:
        lines.append(
            f"{model_name:<12} {r.growth_rate:>4} {r.compression:>5g} "
            f"{r.params / 1e6:>9.2f}M {r.memory_bytes / 1e6:>8.1f}MB "
            f"{r.accuracy:>8.2%} {r.precision:>9.2%} {r.recall:>7.2%} {r.f1:>7.2%}"
        )
    return "\n".join(lines)


def write_ablation_csv(result: AblationResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["model", "k", "phi", "params", "memory_bytes",
                    "accuracy", "precision", "recall", "f1"])
        for r in result.rows:
            w.writerow([r.config_id, r.growth_rate, r.compression, r.params,
                        r.memory_bytes, f"{r.accuracy:.6f}", f"{r.precision:.6f}",
                        f"{r.recall:.6f}", f"{r.f1:.6f}"])


def write_confusion_csv(cm: ConfusionMatrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["true\\pred"] + [str(i) for i in range(cm.num_classes)])
        for i, row in enumerate(cm.counts):
            w.writerow([i] + [int(v) for v in row])


def write_confusion_ppm(cm: ConfusionMatrix, path, cell: int = 12) -> None:
    """Binary PPM heat dump of the confusion matrix (white -> red scale)."""
    k = cm.num_classes
    counts = cm.counts.astype(np.float64)
    peak = counts.max() if counts.max() > 0 else 1.0
    img = np.zeros((k * cell, k * cell, 3), dtype=np.uint8)
    for i in range(k):
        for j in range(k):
            heat = counts[i, j] / peak
            r = 255
            gb = int(255 * (1.0 - heat))
            img[i * cell : (i + 1) * cell, j * cell : (j + 1) * cell] = (r, gb, gb)
    with open(path, "wb") as f:
        f.write(f"P6 {k * cell} {k * cell} 255\n".encode())
        f.write(img.tobytes())
