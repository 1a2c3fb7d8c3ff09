"""
Per-agent feedforward classifiers producing the local logit statistic
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit

from sml.exceptions import DivergenceError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Activation:
    name: str
    function: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray], np.ndarray]
    lipschitz: float


ACTIVATIONS: Dict[str, Activation] = {
    "arctan": Activation("arctan", np.arctan, lambda x: 1.0 / (1.0 + x * x), 1.0),
    "tanh": Activation("tanh", np.tanh, lambda x: 1.0 - np.tanh(x) ** 2, 1.0),
    "relu": Activation("relu", lambda x: np.maximum(x, 0.0), lambda x: (x > 0).astype(float), 1.0),
}

# Output row 0 carries class +1, row 1 class -1: f = z_1 - z_2
_OUTPUT_SIGNS = np.array([1.0, -1.0])


def get_activation(name: str) -> Activation:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"Unsupported activation function: {name}") from None


@dataclass(frozen=True, eq=False)
class FeedforwardNet:
    """
    L-layer network. Layer 1 computes W_1 h - theta_1, layer l > 1 computes
    W_l sigma(g_{l-1}) - theta_l; the two outputs z give the logit z_1 - z_2.
    """
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    activation: str = "arctan"

    def __post_init__(self):
        weights = tuple(np.array(w, dtype=float, ndmin=2) for w in self.weights)
        biases = tuple(np.array(b, dtype=float).reshape(-1) for b in self.biases)
        if not weights or len(weights) != len(biases):
            raise ShapeError(f"Need one bias per weight matrix, got {len(weights)} and {len(biases)}")
        for index, (w, b) in enumerate(zip(weights, biases), start=1):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"Layer {index}: weight {w.shape} incompatible with bias {b.shape}")
            if index > 1 and w.shape[1] != weights[index - 2].shape[0]:
                raise ShapeError(f"Layer {index} expects {w.shape[1]} inputs, previous layer has {weights[index - 2].shape[0]}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ShapeError(f"Layer {index} has non-finite parameters")
            w.setflags(write=False)
            b.setflags(write=False)
        if weights[-1].shape[0] != 2:
            raise ShapeError(f"Output layer must have 2 nodes, got {weights[-1].shape[0]}")
        get_activation(self.activation)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)

    @property
    def layer_sizes(self) -> Tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def lipschitz(self) -> float:
        return get_activation(self.activation).lipschitz

    @property
    def num_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def with_parameters(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]) -> "FeedforwardNet":
        return FeedforwardNet(tuple(weights), tuple(biases), self.activation)


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Features (N x n_0) with labels in {-1, +1}; sample_ids trace rows back to the source split"""
    features: np.ndarray
    labels: np.ndarray
    sample_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        features = np.array(self.features, dtype=float, ndmin=2)
        labels = np.asarray(self.labels).reshape(-1).astype(np.int8)
        if features.shape[0] < 1:
            raise ShapeError("Dataset must hold at least one sample")
        if labels.shape[0] != features.shape[0]:
            raise ShapeError(f"{features.shape[0]} feature rows but {labels.shape[0]} labels")
        if not np.isin(labels, (-1, 1)).all():
            raise ValueError("Labels must be -1 or +1")
        if not np.isfinite(features).all():
            raise ValueError("Features must be finite")
        sample_ids = self.sample_ids
        if sample_ids is None:
            sample_ids = np.arange(features.shape[0])
        sample_ids = np.asarray(sample_ids, dtype=np.int64)
        for array in (features, labels, sample_ids):
            array.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "sample_ids", sample_ids)

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, rows: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.features[rows], self.labels[rows], self.sample_ids[rows])

    def of_class(self, label: int) -> "LabeledDataset":
        return self.subset(np.flatnonzero(self.labels == label))

    def class_count(self, label: int) -> int:
        return int((self.labels == label).sum())


class TrainConfig(BaseModel):
    """Mini-batch gradient descent settings"""
    model_config = ConfigDict(frozen=True)

    batch_size: int = Field(10, gt=0)
    epochs: int = Field(15, gt=0)
    learning_rate: float = Field(0.05, ge=0)
    seed: int = 0
    shuffle: bool = True


@dataclass(frozen=True, eq=False)
class TrainResult:
    net: FeedforwardNet
    risk_trace: np.ndarray


def init_net(layer_sizes: Sequence[int], activation: str, rng: np.random.Generator) -> FeedforwardNet:
    """Weights uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases zero"""
    if len(layer_sizes) < 2 or layer_sizes[-1] != 2:
        raise ShapeError(f"Layer sizes must end with 2 outputs, got {tuple(layer_sizes)}")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        radius = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-radius, radius, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return FeedforwardNet(tuple(weights), tuple(biases), activation)


def _check_features(net: FeedforwardNet, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = features[np.newaxis, :]
    if features.ndim != 2 or features.shape[1] != net.input_dim:
        raise ShapeError(f"Expected features of width {net.input_dim}, got shape {features.shape}")
    return features


def _forward_pass(net: FeedforwardNet, features: np.ndarray) -> List[np.ndarray]:
    """Pre-activations g_1..g_L for a batch"""
    sigma = get_activation(net.activation).function
    layer_outputs = []
    inputs = features
    for index, (w, b) in enumerate(zip(net.weights, net.biases)):
        if index > 0:
            inputs = sigma(layer_outputs[-1])
        layer_outputs.append(inputs @ w.T - b)
    return layer_outputs


def forward_logits(net: FeedforwardNet, features: np.ndarray) -> np.ndarray:
    """Batched logit f(h) = z_1 - z_2"""
    features = _check_features(net, features)
    return _forward_pass(net, features)[-1] @ _OUTPUT_SIGNS


def forward_logit(net: FeedforwardNet, h: np.ndarray) -> float:
    h = np.asarray(h, dtype=float)
    if h.ndim != 1:
        raise ShapeError(f"Expected a feature vector, got shape {h.shape}")
    return float(forward_logits(net, h)[0])


def posterior_plus(net: FeedforwardNet, h: np.ndarray) -> float:
    return float(expit(forward_logit(net, h)))


def posterior_minus(net: FeedforwardNet, h: np.ndarray) -> float:
    return float(expit(-forward_logit(net, h)))


def _margins(net: FeedforwardNet, data: LabeledDataset) -> np.ndarray:
    return data.labels * forward_logits(net, data.features)


def empirical_risk(net: FeedforwardNet, data: LabeledDataset) -> float:
    """Mean logistic loss, log(1 + exp(-m)) evaluated without overflow"""
    return float(np.mean(np.logaddexp(0.0, -_margins(net, data))))


def _gradient(
    net: FeedforwardNet, features: np.ndarray, labels: np.ndarray
) -> Tuple[float, List[np.ndarray], List[np.ndarray]]:
    activation = get_activation(net.activation)
    layer_outputs = _forward_pass(net, features)
    margins = labels * (layer_outputs[-1] @ _OUTPUT_SIGNS)
    loss = float(np.mean(np.logaddexp(0.0, -margins)))

    # d/df log(1 + exp(-y f)) = -y * sigmoid(-y f)
    dlogit = -labels * expit(-margins) / features.shape[0]
    upstream = dlogit[:, np.newaxis] * _OUTPUT_SIGNS[np.newaxis, :]

    weight_grads: List[np.ndarray] = [None] * net.depth
    bias_grads: List[np.ndarray] = [None] * net.depth
    for index in range(net.depth - 1, -1, -1):
        inputs = features if index == 0 else activation.function(layer_outputs[index - 1])
        weight_grads[index] = upstream.T @ inputs
        bias_grads[index] = -upstream.sum(axis=0)
        if index > 0:
            upstream = (upstream @ net.weights[index]) * activation.derivative(layer_outputs[index - 1])
    return loss, weight_grads, bias_grads


def risk_gradient(net: FeedforwardNet, data: LabeledDataset) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Exact gradient of empirical_risk w.r.t. every W_l and theta_l"""
    features = _check_features(net, data.features)
    _, weight_grads, bias_grads = _gradient(net, features, data.labels.astype(float))
    return weight_grads, bias_grads


def train(net: FeedforwardNet, data: LabeledDataset, cfg: TrainConfig) -> TrainResult:
    """
    Plain mini-batch gradient descent on the empirical logistic risk.
    Shuffling is driven by cfg.seed; the returned trace holds the full
    training risk at the end of every epoch.
    """
    features = _check_features(net, data.features)
    labels = data.labels.astype(float)
    n = features.shape[0]
    if cfg.batch_size > n:
        raise ValueError(f"Batch size {cfg.batch_size} exceeds dataset size {n}")

    rng = np.random.default_rng(cfg.seed)
    weights = [w.copy() for w in net.weights]
    biases = [b.copy() for b in net.biases]
    trace = np.empty(cfg.epochs)
    current = net

    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        for batch, start in enumerate(range(0, n, cfg.batch_size)):
            rows = order[start:start + cfg.batch_size]
            loss, weight_grads, bias_grads = _gradient(current, features[rows], labels[rows])
            if not np.isfinite(loss):
                logger.error(f"Training diverged at epoch {epoch}, batch {batch}")
                raise DivergenceError(epoch, batch, loss)
            for index in range(net.depth):
                weights[index] -= cfg.learning_rate * weight_grads[index]
                biases[index] -= cfg.learning_rate * bias_grads[index]
            try:
                current = net.with_parameters([w.copy() for w in weights], [b.copy() for b in biases])
            except ShapeError:
                logger.error(f"Parameters became non-finite at epoch {epoch}, batch {batch}")
                raise DivergenceError(epoch, batch, float("nan")) from None
        trace[epoch] = empirical_risk(current, data)
        logger.debug(f"Epoch {epoch + 1}/{cfg.epochs}: risk {trace[epoch]:.6f}")

    return TrainResult(net=current, risk_trace=trace)


def save_checkpoint(path: Path, nets: Sequence[FeedforwardNet], **arrays: np.ndarray) -> Path:
    """
    Store nets in one .npz: per agent the layer sizes, activation and every
    matrix/bias; extra arrays (training means, matrix, ...) are stored as given.
    """
    payload = {"num_agents": np.array(len(nets))}
    for k, net in enumerate(nets):
        payload[f"agent{k}_layer_sizes"] = np.array(net.layer_sizes)
        payload[f"agent{k}_activation"] = np.array(net.activation)
        for index, (w, b) in enumerate(zip(net.weights, net.biases)):
            payload[f"agent{k}_W{index}"] = w
            payload[f"agent{k}_theta{index}"] = b
    payload.update({name: np.asarray(value) for name, value in arrays.items()})
    path = Path(path)
    with path.open("wb") as handle:
        np.savez(handle, **payload)
    return path


def load_checkpoint(path: Path) -> Tuple[List[FeedforwardNet], Dict[str, np.ndarray]]:
    with np.load(Path(path), allow_pickle=False) as archive:
        stored = {name: archive[name] for name in archive.files}
    nets = []
    for k in range(int(stored.pop("num_agents"))):
        depth = len(stored.pop(f"agent{k}_layer_sizes")) - 1
        activation = str(stored.pop(f"agent{k}_activation"))
        weights = tuple(stored.pop(f"agent{k}_W{index}") for index in range(depth))
        biases = tuple(stored.pop(f"agent{k}_theta{index}") for index in range(depth))
        nets.append(FeedforwardNet(weights, biases, activation))
    return nets, stored
