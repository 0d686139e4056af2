"""Training: cross-entropy loss, SGD with Nesterov momentum and coupled
weight decay, a step learning-rate schedule, and the backbone-freeze policy
for fine-tuning only the classifier head.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, MedboxError
from .net import Network


class TrainingDiverged(MedboxError):
    """Loss became non-finite during fit."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    base_lr: float = 0.1
    lr_drops: tuple[tuple[int, float], ...] = ((40, 0.1), (80, 0.1))
    weight_decay: float = 5e-4
    momentum: float = 0.9
    batch_size: int = 32
    freeze_policy: str = "full"  # "full" | "backbone_frozen"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.freeze_policy not in ("full", "backbone_frozen"):
            raise ConfigError(f"unknown freeze_policy {self.freeze_policy!r}")
        epochs_seen = [e for e, _ in self.lr_drops]
        if epochs_seen != sorted(set(epochs_seen)):
            raise ConfigError(f"lr_drops epochs must be strictly increasing: {epochs_seen}")
        if any(e >= self.epochs for e in epochs_seen):
            raise ConfigError(
                f"lr_drops epochs {epochs_seen} must be < epochs ({self.epochs})"
            )
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-indexed epoch: base times every drop factor
        whose epoch has been reached."""
        lr = self.base_lr
        for drop_epoch, factor in self.lr_drops:
            if epoch >= drop_epoch:
                lr *= factor
        return lr

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "base_lr": self.base_lr,
            "lr_drops": [list(d) for d in self.lr_drops],
            "weight_decay": self.weight_decay,
            "momentum": self.momentum,
            "batch_size": self.batch_size,
            "freeze_policy": self.freeze_policy,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(
            epochs=d["epochs"],
            base_lr=d["base_lr"],
            lr_drops=tuple((int(e), float(f)) for e, f in d.get("lr_drops", [])),
            weight_decay=d.get("weight_decay", 5e-4),
            momentum=d.get("momentum", 0.9),
            batch_size=d.get("batch_size", 32),
            freeze_policy=d.get("freeze_policy", "full"),
            seed=d.get("seed", 0),
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


class OptimizerState:
    """Per-parameter momentum buffers; exists exactly for trainable params."""

    def __init__(self, net: Network):
        self.velocity = {
            name: np.zeros_like(p)
            for name, p in net.params.items()
            if net.trainable[name]
        }


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log softmax probability of the true class.

    Returns (loss, dloss/dlogits). Stabilized by max subtraction; the
    gradient is (softmax - onehot) / N.
    """
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must be in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(total)
    loss = float(-log_probs[np.arange(n), labels].mean())
    grad = exp / total
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad.astype(logits.dtype, copy=False)


def sgd_step(params: dict, grads: dict, state: OptimizerState,
             lr: float, momentum: float, weight_decay: float) -> None:
    """Nesterov momentum update, in place.

    With g' = g + wd*w:  v <- mu*v + g';  w <- w - lr*(g' + mu*v).
    Parameters without an entry in the optimizer state (frozen) and
    parameters without gradients are untouched.
    """
    for name, v in state.velocity.items():
        g = grads.get(name)
        if g is None:
            continue
        w = params[name]
        if weight_decay:
            g = g + weight_decay * w
        v *= momentum
        v += g
        w -= (lr * (g + momentum * v)).astype(w.dtype, copy=False)


def apply_freeze_policy(net: Network, policy: str) -> Network:
    """Mark parameters trainable per policy.

    "backbone_frozen" leaves only the classifier weight/bias trainable;
    frozen BN layers then run on their running statistics during training.
    """
    if policy not in ("full", "backbone_frozen"):
        raise ConfigError(f"unknown freeze_policy {policy!r}")
    for name in net.trainable:
        if policy == "full":
            net.trainable[name] = True
        else:
            net.trainable[name] = name in ("classifier.weight", "classifier.bias")
    return net


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss: float
    train_acc: float


@dataclass
class FitResult:
    net: Network
    log: list[EpochStats] = field(default_factory=list)


def write_epoch_log(path, log: list[EpochStats]) -> None:
    """Comma-separated epoch log: epoch, lr, loss, train_acc."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("epoch,lr,loss,train_acc\n")
        for row in log:
            f.write(f"{row.epoch},{row.lr:g},{row.loss:.6f},{row.train_acc:.6f}\n")


def fit(net: Network, data, config: TrainConfig, callbacks=()) -> FitResult:
    """Train the network in place over ``config.epochs`` epochs.

    ``data`` provides ``labels``, ``__len__`` and ``batches(rng, batch_size)``
    yielding (NCHW float32 images, int labels) with a fresh per-epoch shuffle
    from the given generator. With the backbone frozen, the backbone runs
    forward-only and gradients reach just the classifier.
    """
    if len(data) == 0:
        raise ValueError("fit: dataset is empty")
    classes_present = np.unique(np.asarray(data.labels))
    missing = set(range(net.config.num_classes)) - set(int(c) for c in classes_present)
    if missing:
        raise ValueError(f"fit: no samples for classes {sorted(missing)}")

    apply_freeze_policy(net, config.freeze_policy)
    frozen = config.freeze_policy == "backbone_frozen"
    state = OptimizerState(net)
    result = FitResult(net)

    for epoch in range(1, config.epochs + 1):
        lr = config.lr_at(epoch)
        rng = np.random.default_rng((config.seed, epoch))
        loss_sum = 0.0
        correct = 0
        seen = 0
        for batch_idx, (x, y) in enumerate(data.batches(rng, config.batch_size)):
            if frozen:
                feats = net.forward_features(x, mode="train")
                logits, ctx = net.classify_features(feats, want_ctx=True)
            else:
                logits, tape = net.forward(x, mode="train", want_ctx=True)
            loss, dlogits = cross_entropy(logits, y)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {batch_idx}"
                )
            if frozen:
                g = ctx.backward(dlogits)
                grads = {"classifier.weight": g.param_grads["weight"],
                         "classifier.bias": g.param_grads["bias"]}
            else:
                grads = net.backward(tape, dlogits)
            sgd_step(net.params, grads, state, lr, config.momentum, config.weight_decay)
            loss_sum += loss * len(y)
            correct += int((logits.argmax(axis=1) == y).sum())
            seen += len(y)
        stats = EpochStats(epoch, lr, loss_sum / seen, correct / seen)
        result.log.append(stats)
        for cb in callbacks:
            cb(stats)
    return result
