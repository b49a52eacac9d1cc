"""Shared fixtures: a tiny generated dataset and an identity-init model."""

import zlib

import numpy as np
import pytest

from os2dkit import datagen, features, trainer


def make_rng(*key):
    """Deterministic per-test generator; string parts are crc32-hashed."""
    parts = [zlib.crc32(k.encode()) if isinstance(k, str) else k for k in key]
    return np.random.default_rng(np.random.SeedSequence(parts))


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "tiny"
    datagen.generate_dataset(root, n_classes=10, n_train_images=8,
                             n_val_images=4, n_val_old_images=2, seed=7)
    return root


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_dir):
    return datagen.load_dataset(tiny_dataset_dir)


@pytest.fixture(scope="session")
def init_store64(tiny_dataset):
    """Identity-init float64 model, BN statistics warmed on real crops."""
    rng = make_rng(2024, 11)
    store = trainer.init_model_store(rng, tiny_dataset.normalization, "v1",
                                     np.float64)
    crops = [r.load_image().astype(np.float64)[:, :96, :96]
             for r in tiny_dataset.splits["train"][:6]]
    features.warmup_extractor_stats(store, crops)
    return store
