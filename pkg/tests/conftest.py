"""Shared fixtures: a small trained model and its service engine."""
import os

import numpy as np
import pytest

from medbox.data import AugmentPolicy, ImageDataset, load_manifest, make_splits
from medbox.net import build, desk_config
from medbox.synthetic import generate_synthetic, write_demo_catalog
from medbox.train import TrainConfig, fit
from medbox import modelio


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """4-class synthetic dataset at 32 px (fast to train on)."""
    root = tmp_path_factory.mktemp("tinyds")
    manifest = generate_synthetic(classes=4, per_class=10, seed=21,
                                  out_dir=root, image_size=32)
    write_demo_catalog(manifest, root / "catalog.json")
    return manifest


@pytest.fixture(scope="session")
def tiny_model(tiny_dataset, tmp_path_factory):
    """Desk-style model trained briefly on the tiny dataset."""
    plan = make_splits(tiny_dataset, fraction=0.8, repetitions=1, seed=0)
    train_idx, test_idx = plan.repetitions[0]
    ds = ImageDataset(tiny_dataset, train_idx, image_size=(32, 32))
    net = build(desk_config(growth_rate=8, block_layout=(2, 2), num_classes=4,
                            input_px=32), seed=5)
    fit(net, ds, TrainConfig(epochs=12, base_lr=0.1, lr_drops=((9, 0.1),),
                             batch_size=16, seed=0))
    path = tmp_path_factory.mktemp("model") / "tiny.nbx"
    modelio.save(net, path)
    return {"net": net, "path": str(path), "manifest": tiny_dataset,
            "test_idx": test_idx}


@pytest.fixture(scope="session")
def tiny_engine(tiny_model, tiny_dataset):
    from medbox.service import EngineConfig, InferenceEngine

    catalog_path = os.path.join(tiny_dataset.root, "catalog.json")
    cfg = EngineConfig(model_path=tiny_model["path"], catalog_path=catalog_path,
                       threshold=0.5)
    return InferenceEngine.load(cfg)
