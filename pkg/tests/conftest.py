import numpy as np
import pytest
import torch

from fedleak.data import DatasetHandle, NormStats
from fedleak.models import ArchitectureSpec, build_model

CIFAR_SHAPE = (3, 32, 32)


@pytest.fixture
def toy_dataset():
    """600 random 3x8x8 images over 4 classes, fixed seed."""
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, (600, 3, 8, 8), dtype=np.uint8)
    labels = np.repeat(np.arange(4), 150)
    return DatasetHandle("toy", pixels, labels, 4, NormStats((0.5, 0.5, 0.5), (0.25, 0.25, 0.25)))


@pytest.fixture
def cnn():
    spec = ArchitectureSpec("cnn_small", CIFAR_SHAPE, 10)
    return spec, build_model(spec, 0)


@pytest.fixture
def mlp():
    spec = ArchitectureSpec("mlp256", CIFAR_SHAPE, 10)
    return spec, build_model(spec, 0)


def images(n, shape=CIFAR_SHAPE, seed=0):
    return torch.randn((n, *shape), generator=torch.Generator().manual_seed(seed))
