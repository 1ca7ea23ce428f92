"""Shared fixtures: src on the path, small synthetic datasets written in the real on-disk formats."""

import json
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(__file__)), "src"))

from data import Dataset, write_idx  # noqa: E402
from nn import ArchitectureSpec, LayerDesc  # noqa: E402


def write_mnist_fixture(directory, n_train=40, n_test=12, seed=0):
    """IDX files with n 28x28 images; returns the four paths."""
    rng = np.random.default_rng(seed)
    paths = {}
    for split, n in (("train", n_train), ("test", n_test)):
        images = rng.integers(0, 256, size=(n, 28, 28), dtype=np.uint8)
        labels = (np.arange(n) % 10).astype(np.uint8)
        paths[f"{split}_images"] = os.path.join(directory, f"{split}-images-idx3-ubyte")
        paths[f"{split}_labels"] = os.path.join(directory, f"{split}-labels-idx1-ubyte")
        write_idx(paths[f"{split}_images"], images)
        write_idx(paths[f"{split}_labels"], labels)
    return paths


def write_cifar10_fixture(directory, per_file=4, seed=0):
    rng = np.random.default_rng(seed)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]
    for k, name in enumerate(names):
        labels = (np.arange(per_file) + k) % 10
        pixels = rng.integers(0, 256, size=(per_file, 3 * 32 * 32), dtype=np.uint8)
        rows = np.concatenate([labels[:, None].astype(np.uint8), pixels], axis=1)
        with open(os.path.join(directory, name), "wb") as f:
            f.write(rows.tobytes())
    return directory


# Small enough that a few epochs on 28x28 inputs take well under a second.
TINY_MODEL = {"widths": [4, 4, 8, 8], "fc_width": 16}


@pytest.fixture
def mnist_files(tmp_path):
    return write_mnist_fixture(str(tmp_path))


@pytest.fixture
def mnist_config(tmp_path, mnist_files):
    """Config file for a tiny mnist run; paths are relative to the config's directory."""
    cfg = {
        "dataset": {"name": "mnist", "val_fraction": 0.25,
                    **{k: os.path.basename(v) for k, v in mnist_files.items()}},
        "model": dict(TINY_MODEL),
        "train": {"batch_size": 8, "max_epochs": 2, "seed": 3},
    }
    path = tmp_path / "mnist.json"
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture
def cifar10_config(tmp_path):
    data_dir = tmp_path / "cifar"
    data_dir.mkdir()
    write_cifar10_fixture(str(data_dir))
    path = tmp_path / "cifar10.json"
    path.write_text(json.dumps({"dataset": {"name": "cifar10", "dir": "cifar"}}))
    return str(path)


@pytest.fixture
def tiny_spec():
    return ArchitectureSpec("tiny", (1, 4, 4), (
        LayerDesc("conv", size=3),
        LayerDesc("relu"),
        LayerDesc("pool"),
        LayerDesc("flatten"),
        LayerDesc("dense", size=8),
        LayerDesc("relu"),
        LayerDesc("softmax", size=3),
    ))


@pytest.fixture
def tiny_dataset():
    rng = np.random.default_rng(11)
    images = rng.random((24, 1, 4, 4)).astype(np.float32)
    labels = np.arange(24) % 3
    return Dataset(images, labels, 3, "tiny")
