"""Manifest loading, split stratification, preprocessing, augmentation."""
import hashlib
import json
import os

import numpy as np
import pytest

from medbox.data import (
    AugmentPolicy,
    DatasetManifest,
    ClassEntry,
    Sample,
    augment,
    load_manifest,
    make_splits,
    preprocess,
    unnormalize,
)
from medbox.errors import ManifestError
from medbox.data import ManifestNotFound, ManifestSchemaError, MissingImageError

from oracles import resize_bilinear_loops


def write_manifest(tmp_path, doc, images=()):
    for rel in images:
        p = tmp_path / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        from PIL import Image
        Image.new("RGB", (8, 8), (100, 120, 140)).save(p)
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc))
    return path


GOOD = {
    "version": 1,
    "classes": [{"id": "a", "name": "Alpha"}, {"id": "b", "name": "Beta"}],
    "samples": [
        {"path": "img/a0.png", "class": 0, "source": "t"},
        {"path": "img/a1.png", "class": 0, "source": "t"},
        {"path": "img/b0.png", "class": 1, "source": "t"},
        {"path": "img/b1.png", "class": 1, "source": "t"},
    ],
}


class TestManifest:
    def test_well_formed_loads_with_class_order(self, tmp_path):
        path = write_manifest(tmp_path, GOOD, [s["path"] for s in GOOD["samples"]])
        m = load_manifest(path)
        assert [c.id for c in m.classes] == ["a", "b"]
        assert len(m.samples) == 4
        assert m.labels().tolist() == [0, 0, 1, 1]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ManifestNotFound):
            load_manifest(tmp_path / "nope.json")

    def test_unknown_class_named_in_error(self, tmp_path):
        doc = dict(GOOD, samples=GOOD["samples"] + [{"path": "img/x.png", "class": 7}])
        path = write_manifest(tmp_path, doc, [s["path"] for s in GOOD["samples"]])
        with pytest.raises(ManifestSchemaError, match="img/x.png"):
            load_manifest(path)

    def test_dangling_image_path(self, tmp_path):
        path = write_manifest(tmp_path, GOOD, [s["path"] for s in GOOD["samples"][:-1]])
        with pytest.raises(MissingImageError, match="b1.png"):
            load_manifest(path)

    def test_single_sample_class_rejected(self, tmp_path):
        doc = dict(GOOD, samples=GOOD["samples"][:3])
        path = write_manifest(tmp_path, doc, [s["path"] for s in doc["samples"]])
        with pytest.raises(ManifestSchemaError, match="b"):
            load_manifest(path)


def toy_manifest(counts):
    classes = [ClassEntry(f"c{i}", f"C{i}") for i in range(len(counts))]
    samples = []
    for ci, n in enumerate(counts):
        samples.extend(Sample(f"{ci}_{j}.png", ci) for j in range(n))
    return DatasetManifest(classes, samples)


class TestSplits:
    def test_exact_proportions_10x10(self):
        plan = make_splits(toy_manifest([10] * 10), fraction=0.8, repetitions=3, seed=0)
        labels = toy_manifest([10] * 10).labels()
        for train, test in plan.repetitions:
            assert len(test) == 20
            counts = np.bincount(labels[test], minlength=10)
            assert (counts == 2).all()

    def test_minimum_one_test_sample(self):
        plan = make_splits(toy_manifest([3, 10]), repetitions=2, seed=1)
        labels = toy_manifest([3, 10]).labels()
        for train, test in plan.repetitions:
            assert np.bincount(labels[test], minlength=2)[0] == 1

    def test_disjoint_and_exhaustive(self):
        m = toy_manifest([5, 7, 9])
        plan = make_splits(m, repetitions=4, seed=2)
        n = len(m.samples)
        for train, test in plan.repetitions:
            assert len(np.intersect1d(train, test)) == 0
            assert len(np.union1d(train, test)) == n

    def test_repetitions_differ(self):
        plan = make_splits(toy_manifest([10, 10]), repetitions=5, seed=3)
        tests = [tuple(t) for _, t in plan.repetitions]
        assert len(set(tests)) > 1

    def test_single_sample_class_listed(self):
        with pytest.raises(ManifestError, match="c1"):
            make_splits(toy_manifest([4, 1]), repetitions=1)

    def test_deterministic_under_seed(self):
        a = make_splits(toy_manifest([8, 8]), repetitions=3, seed=9)
        b = make_splits(toy_manifest([8, 8]), repetitions=3, seed=9)
        for (ta, sa), (tb, sb) in zip(a.repetitions, b.repetitions):
            assert np.array_equal(ta, tb) and np.array_equal(sa, sb)


class TestPreprocess:
    def test_uniform_gray(self):
        img = np.full((10, 12, 3), 128, dtype=np.uint8)
        out = preprocess(img, (10, 12), mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5))
        assert out.shape == (3, 10, 12)
        np.testing.assert_allclose(out, (128 / 255 - 0.5) / 0.5, atol=1e-6)

    def test_same_size_is_identity_resize(self):
        img = np.zeros((2, 2, 3), dtype=np.uint8)
        img[0, 0] = img[1, 1] = 255
        out = preprocess(img, (2, 2), mean=(0, 0, 0), std=(1, 1, 1))
        np.testing.assert_allclose(out[0], np.array([[1, 0], [0, 1]], dtype=np.float32))

    def test_resize_matches_reference_resampler(self):
        h, w = 100, 80
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        img = np.stack([yy * 2.0, xx * 2.5, (yy + xx) * 1.0], axis=2).astype(np.float32)
        out = preprocess(img.astype(np.uint8), (224, 224), mean=(0, 0, 0), std=(1, 1, 1))
        ref = resize_bilinear_loops(img.astype(np.uint8).astype(np.float32), 224, 224) / 255.0
        np.testing.assert_allclose(out, ref.transpose(2, 0, 1), atol=1e-5)

    def test_unnormalize_roundtrip(self):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, (16, 16, 3)).astype(np.uint8)
        t = preprocess(img, (16, 16))
        back = unnormalize(t)
        np.testing.assert_allclose(back, img / 255.0, atol=1e-6)

    def test_empty_image_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            preprocess(np.zeros((0, 4, 3), dtype=np.uint8), (8, 8))


class TestAugment:
    def test_zero_rotation_no_flip_is_identity(self):
        img = np.random.default_rng(1).integers(0, 256, (20, 20, 3)).astype(np.uint8)
        policy = AugmentPolicy(hflip_prob=0.0, rotation_range_deg=(0.0, 0.0))
        out = augment(img, policy, np.random.default_rng(0))
        assert np.array_equal(out, img)

    def test_double_flip_restores(self):
        img = np.random.default_rng(2).integers(0, 256, (12, 16, 3)).astype(np.uint8)
        policy = AugmentPolicy(hflip_prob=1.0, rotation_range_deg=(0.0, 0.0))
        once = augment(img, policy, np.random.default_rng(0))
        twice = augment(once, policy, np.random.default_rng(0))
        assert not np.array_equal(once, img)
        assert np.array_equal(twice, img)

    def test_fixed_seed_reproducible_hash(self):
        img = np.random.default_rng(3).integers(0, 256, (32, 32, 3)).astype(np.uint8)
        policy = AugmentPolicy()
        h = []
        for _ in range(2):
            out = augment(img, policy, np.random.default_rng(42))
            h.append(hashlib.sha256(out.tobytes()).hexdigest())
        assert h[0] == h[1]

    def test_rotation_keeps_shape_and_range(self):
        img = np.random.default_rng(4).integers(0, 256, (24, 24, 3)).astype(np.uint8)
        policy = AugmentPolicy(hflip_prob=0.0, rotation_range_deg=(-15.0, 15.0))
        out = augment(img, policy, np.random.default_rng(7))
        assert out.shape == img.shape and out.dtype == np.uint8
