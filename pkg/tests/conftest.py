import os
from pathlib import Path

import numpy as np
import pytest

from sml.core.classifier import FeedforwardNet
from sml.core.topology import combination_matrix, random_strongly_connected_graph
from sml.models import ExperimentConfig

MNIST_FILES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)


def identity_net(scale: float = 1.0, input_dim: int = 1) -> FeedforwardNet:
    """Single-layer net whose logit is scale * sum(h)"""
    w = np.full((2, input_dim), scale / 2.0)
    w[1] *= -1.0
    return FeedforwardNet((w,), (np.zeros(2),))


def zero_net(input_dim: int = 2, hidden: int = 3) -> FeedforwardNet:
    return FeedforwardNet(
        (np.zeros((hidden, input_dim)), np.zeros((2, hidden))),
        (np.zeros(hidden), np.zeros(2)),
    )


def random_combination(num_agents: int, seed: int, edge_probability: float = 0.5):
    graph = random_strongly_connected_graph(num_agents, edge_probability, seed)
    return combination_matrix(graph)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def synthetic_config() -> ExperimentConfig:
    """Three Gaussian agents on a path, small enough to run in a second"""
    return ExperimentConfig(
        graph={"num_agents": 3, "edges": [(0, 1), (1, 2)], "self_loops": "all"},
        diffusion={"step_size": 0.1},
        data={"source": "gaussian", "corrupt_agents": [0]},
        synth={"dimension": 2, "mean_norms": [2.0], "sigma": 1.0, "train_per_class": 40, "holdout_per_class": 20},
        model={"hidden_sizes": [4], "activation": "arctan"},
        train={"batch_size": 10, "epochs": 3, "learning_rate": 0.1},
        predict={"horizon": 60, "switch_at": 30, "accuracy_windows": [(10, 30), (40, 60)]},
        bounds={"rademacher_draws": 16},
        run={"seed": 7},
    )


@pytest.fixture
def mnist_dir() -> Path:
    root = Path(os.getenv("SML_MNIST_DIR", "data/mnist"))
    if not all((root / name).is_file() for name in MNIST_FILES):
        pytest.skip(f"MNIST files not found under {root}")
    return root
