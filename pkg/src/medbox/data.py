"""Dataset manifest loading, stratified split plans, image preprocessing,
and train-time augmentation (random horizontal flips and rotations).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import backend
from .errors import ManifestError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ManifestNotFound(ManifestError):
    pass


class ManifestSchemaError(ManifestError):
    pass


class MissingImageError(ManifestError):
    pass


@dataclass(frozen=True)
class ClassEntry:
    id: str
    name: str


@dataclass(frozen=True)
class Sample:
    path: str
    class_index: int
    source: str = ""


@dataclass
class DatasetManifest:
    classes: list[ClassEntry]
    samples: list[Sample]
    version: int = 1
    root: str = "."

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def labels(self) -> np.ndarray:
        return np.array([s.class_index for s in self.samples], dtype=np.int64)

    def class_counts(self) -> np.ndarray:
        counts = np.zeros(self.num_classes, dtype=np.int64)
        for s in self.samples:
            counts[s.class_index] += 1
        return counts

    def sample_path(self, i: int) -> str:
        return os.path.join(self.root, self.samples[i].path)


def load_manifest(path) -> DatasetManifest:
    """Load and validate a manifest JSON file.

    Distinct failures: ManifestNotFound, ManifestSchemaError (bad structure,
    dangling class references, classes with fewer than 2 samples), and
    MissingImageError for dangling image paths.
    """
    if not os.path.exists(path):
        raise ManifestNotFound(f"manifest not found: {path}")
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ManifestSchemaError(f"manifest is not valid JSON: {e}") from e
    for key in ("version", "classes", "samples"):
        if key not in doc:
            raise ManifestSchemaError(f"manifest missing required key {key!r}")
    classes = []
    for i, c in enumerate(doc["classes"]):
        if not isinstance(c, dict) or "id" not in c or "name" not in c:
            raise ManifestSchemaError(f"class entry {i} must have 'id' and 'name'")
        classes.append(ClassEntry(str(c["id"]), str(c["name"])))
    if len({c.id for c in classes}) != len(classes):
        raise ManifestSchemaError("duplicate class ids")
    samples = []
    for i, s in enumerate(doc["samples"]):
        if not isinstance(s, dict) or "path" not in s or "class" not in s:
            raise ManifestSchemaError(f"sample {i} must have 'path' and 'class'")
        ci = s["class"]
        if not isinstance(ci, int) or not 0 <= ci < len(classes):
            raise ManifestSchemaError(
                f"sample {i} ({s['path']!r}) references unknown class {ci!r}"
            )
        samples.append(Sample(str(s["path"]), ci, str(s.get("source", ""))))
    manifest = DatasetManifest(classes, samples, int(doc["version"]),
                               root=os.path.dirname(os.path.abspath(path)))
    counts = manifest.class_counts()
    thin = [classes[i].id for i in np.nonzero(counts < 2)[0]]
    if thin:
        raise ManifestSchemaError(
            f"every class needs >= 2 samples for stratified splitting; too few for: {thin}"
        )
    for i in range(len(samples)):
        p = manifest.sample_path(i)
        if not os.path.exists(p):
            raise MissingImageError(f"sample image not found: {p}")
    return manifest


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "version": manifest.version,
        "classes": [{"id": c.id, "name": c.name} for c in manifest.classes],
        "samples": [{"path": s.path, "class": s.class_index, "source": s.source}
                    for s in manifest.samples],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


# ---------------------------------------------------------------------------
# stratified splits
# ---------------------------------------------------------------------------

@dataclass
class SplitPlan:
    repetitions: list[tuple[np.ndarray, np.ndarray]]  # (train_idx, test_idx)
    fraction: float
    seed: int


def make_splits(manifest: DatasetManifest, fraction: float = 0.8,
                repetitions: int = 10, seed: int = 0) -> SplitPlan:
    """Repeated stratified train/test splits.

    Per repetition and class: shuffle that class's samples with a seed
    derived from (seed, repetition), hold out round((1-fraction) * n) of
    them (at least 1) for test, the rest for train.
    """
    labels = manifest.labels()
    counts = manifest.class_counts()
    thin = [manifest.classes[i].id for i in np.nonzero(counts < 2)[0]]
    if thin:
        raise ManifestError(f"classes with a single sample cannot be split: {thin}")
    by_class = [np.nonzero(labels == c)[0] for c in range(manifest.num_classes)]
    reps = []
    test_frac = 1.0 - fraction
    for rep in range(repetitions):
        rng = np.random.default_rng((seed, rep))
        train, test = [], []
        for idx in by_class:
            n = len(idx)
            n_test = max(1, int(np.floor(test_frac * n + 0.5)))  # round half up
            perm = idx[rng.permutation(n)]
            test.append(perm[:n_test])
            train.append(perm[n_test:])
        reps.append((np.sort(np.concatenate(train)), np.sort(np.concatenate(test))))
    return SplitPlan(reps, fraction, seed)


# ---------------------------------------------------------------------------
# preprocessing and augmentation
# ---------------------------------------------------------------------------

def preprocess(image: np.ndarray, size: tuple[int, int],
               mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    """RGB bitmap (H,W,3 uint8 or float) -> normalized float32 (3,H,W).

    Bilinear resize to ``size``, scale to [0,1], then per-channel
    (x - mean) / std.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an RGB (H,W,3) image, got shape {image.shape}")
    h, w = image.shape[:2]
    if h == 0 or w == 0:
        raise ValueError("empty image")
    img = np.ascontiguousarray(image, dtype=np.float32)
    if (h, w) != tuple(size):
        img = backend.resize_bilinear(img, size[0], size[1])
    img = img / np.float32(255.0)
    img -= np.asarray(mean, dtype=np.float32)
    img /= np.asarray(std, dtype=np.float32)
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def unnormalize(tensor: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    """Inverse of the normalization step: float32 (3,H,W) -> (H,W,3) in [0,1]."""
    img = tensor.transpose(1, 2, 0) * np.asarray(std, dtype=np.float32)
    img += np.asarray(mean, dtype=np.float32)
    return img


@dataclass(frozen=True)
class AugmentPolicy:
    hflip_prob: float = 0.5
    rotation_range_deg: tuple[float, float] = (-15.0, 15.0)
    enabled: bool = True  # applied at training time only


def augment(image: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip then random rotation about the center.

    Rotation uses bilinear sampling with edge replication and happens on the
    raw image, before any resize. Zero rotation bypasses resampling.
    """
    out = image
    if rng.random() < policy.hflip_prob:
        out = out[:, ::-1]
    lo, hi = policy.rotation_range_deg
    theta = float(rng.uniform(lo, hi))
    if theta != 0.0:
        rotated = backend.rotate_bilinear(
            np.ascontiguousarray(out, dtype=np.float32), np.deg2rad(theta)
        )
        if image.dtype == np.uint8:
            out = np.clip(np.rint(rotated), 0, 255).astype(np.uint8)
        else:
            out = rotated.astype(image.dtype)
    return np.ascontiguousarray(out)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


class ImageDataset:
    """In-memory dataset over a manifest subset, feeding the training loop.

    Training batches are augmented per sample from the per-epoch generator;
    evaluation tensors are preprocessed once and bit-stable.
    """

    def __init__(self, manifest: DatasetManifest, indices=None,
                 image_size: tuple[int, int] = (64, 64),
                 policy: AugmentPolicy | None = None,
                 mean=IMAGENET_MEAN, std=IMAGENET_STD):
        self.manifest = manifest
        self.indices = np.arange(len(manifest.samples)) if indices is None \
            else np.asarray(indices)
        self.image_size = tuple(image_size)
        self.policy = policy if policy is not None else AugmentPolicy()
        self.mean, self.std = mean, std
        self.images = [load_image(manifest.sample_path(int(i))) for i in self.indices]
        self.labels = manifest.labels()[self.indices]
        self.num_classes = manifest.num_classes
        # normalized HWC float cache; flips/rotations commute with the
        # per-channel affine normalization, so augmentation runs on these
        self._norm = np.stack([
            preprocess(img, self.image_size, self.mean, self.std).transpose(1, 2, 0)
            for img in self.images
        ])

    def __len__(self) -> int:
        return len(self.indices)

    def batches(self, rng: np.random.Generator, batch_size: int):
        order = rng.permutation(len(self.indices))
        lo, hi = self.policy.rotation_range_deg
        for start in range(0, len(order), batch_size):
            sel = order[start : start + batch_size]
            xs = np.empty((len(sel),) + self._norm.shape[1:], dtype=np.float32)
            for k, i in enumerate(sel):
                img = self._norm[int(i)]
                if self.policy.enabled:
                    if rng.random() < self.policy.hflip_prob:
                        img = img[:, ::-1]
                    theta = float(rng.uniform(lo, hi))
                    if theta != 0.0:
                        img = backend.rotate_bilinear(
                            np.ascontiguousarray(img), np.deg2rad(theta))
                xs[k] = img
            yield np.ascontiguousarray(xs.transpose(0, 3, 1, 2)), self.labels[sel]

    def eval_tensors(self) -> tuple[np.ndarray, np.ndarray]:
        return np.ascontiguousarray(self._norm.transpose(0, 3, 1, 2)), self.labels.copy()
