"""Shared test utilities: error metrics and synthetic datasets."""

import numpy as np

from qusecnets.data import Dataset
from qusecnets.model import ModelConfig, build_model, train

TINY_CONFIG = ModelConfig(
    input_shape=(8, 8, 1),
    architecture=(("conv", 4, 3), ("dense", 10)),
    seed=5,
    loss="cross_entropy",
)


def max_rel_err(a, b, floor=1.0):
    """Max elementwise |a-b| / max(|a|, |b|, floor).

    The floor keeps near-zero entries from blowing up the ratio; our test
    tensors are O(1), so floor=1 makes this an absolute error there while
    staying relative for large entries.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def blob_dataset(n_per_class=20, classes=10, side=8, seed=0, name="synthetic"):
    """Linearly separable 10-class images: one bright patch per class."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for cls in range(classes):
        for _ in range(n_per_class):
            img = rng.uniform(0.0, 0.15, (side, side, 1))
            r, c = divmod(cls, 4)
            img[2 * r:2 * r + 2, 2 * c:2 * c + 2, 0] = rng.uniform(0.85, 1.0, (2, 2))
            images.append(img)
            labels.append(cls)
    order = rng.permutation(len(images))
    return Dataset(np.asarray(images)[order], np.asarray(labels, dtype=np.int64)[order],
                   name, "train")


def trained_tiny_model(config=TINY_CONFIG, epochs=30, seed=0):
    """A small but competent classifier for attack behavior tests."""
    ds = blob_dataset(seed=seed)
    model = build_model(config)
    train(model, ds, epochs=epochs, batch_size=32, lr=0.05, seed=seed)
    return model, ds
