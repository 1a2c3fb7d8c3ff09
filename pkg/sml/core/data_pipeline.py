"""
Data ingestion: IDX parsing, the binary digit task, per-agent partitioning,
training-set corruption and synthetic Gaussian sources
"""
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple
import gzip
import logging
import struct

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split

from sml.core.classifier import LabeledDataset
from sml.exceptions import (
    BadMagicError,
    DataError,
    DimOverflowError,
    EmptyClassError,
    IdxFormatError,
    InsufficientSamplesError,
    TruncatedPayloadError,
    UnknownDigitError,
)

logger = logging.getLogger(__name__)

IDX_UBYTE = 0x08
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MAX_IDX_ELEMENTS = 2**31 - 1


@dataclass(frozen=True)
class IdxTensor:
    dims: Tuple[int, ...]
    payload: bytes

    def __post_init__(self):
        expected = int(np.prod(self.dims, dtype=np.int64)) if self.dims else 0
        if len(self.payload) != expected:
            raise IdxFormatError(f"Payload of {len(self.payload)} bytes does not match dims {self.dims}")

    @property
    def magic(self) -> int:
        return (IDX_UBYTE << 8) | len(self.dims)

    def to_array(self) -> np.ndarray:
        return np.frombuffer(self.payload, dtype=np.uint8).reshape(self.dims)


def parse_idx(data: bytes) -> IdxTensor:
    """
    Parse a big-endian IDX container of unsigned bytes:
    [00 00 08 ndims][ndims x uint32 dims][payload].
    """
    if len(data) < 4:
        raise TruncatedPayloadError(f"IDX header needs 4 bytes, got {len(data)}")
    zero, dtype_code, ndims = struct.unpack(">HBB", data[:4])
    if zero != 0 or dtype_code != IDX_UBYTE or ndims == 0:
        raise BadMagicError(f"Bad IDX magic 0x{int.from_bytes(data[:4], 'big'):08x}")

    header_end = 4 + 4 * ndims
    if len(data) < header_end:
        raise TruncatedPayloadError(f"IDX header declares {ndims} dims but file ends at byte {len(data)}")
    dims = struct.unpack(f">{ndims}I", data[4:header_end])

    count = 1
    for size in dims:
        count *= size
        if count > MAX_IDX_ELEMENTS:
            raise DimOverflowError(f"IDX dims {dims} exceed {MAX_IDX_ELEMENTS} elements")

    payload = data[header_end:]
    if len(payload) < count:
        raise TruncatedPayloadError(f"IDX payload has {len(payload)} bytes, dims {dims} need {count}")
    if len(payload) > count:
        raise IdxFormatError(f"IDX payload has {len(payload) - count} trailing bytes")
    return IdxTensor(dims=tuple(dims), payload=bytes(payload))


def serialize_idx(tensor: IdxTensor) -> bytes:
    header = struct.pack(">HBB", 0, IDX_UBYTE, len(tensor.dims))
    return header + struct.pack(f">{len(tensor.dims)}I", *tensor.dims) + tensor.payload


def load_idx(path: Path) -> IdxTensor:
    """Read a plain or gzip-compressed IDX file"""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"IDX file not found: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as handle:
        data = handle.read()
    logger.debug(f"Read {len(data)} bytes from {path}")
    return parse_idx(data)


def load_mnist(images_path: Path, labels_path: Path) -> Tuple[np.ndarray, np.ndarray]:
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.magic != IMAGE_MAGIC or labels.magic != LABEL_MAGIC:
        raise BadMagicError(f"Expected image/label magics, got 0x{images.magic:08x}/0x{labels.magic:08x}")
    if images.dims[0] != labels.dims[0]:
        raise IdxFormatError(f"{images.dims[0]} images but {labels.dims[0]} labels")
    logger.info(f"Loaded {images.dims[0]} MNIST samples from {images_path}")
    return images.to_array(), labels.to_array()


def build_binary_task(
    images: np.ndarray,
    labels: np.ndarray,
    digit_neg: int = 0,
    digit_pos: int = 1,
    normalization: str = "unit",
) -> LabeledDataset:
    """Keep two digits, flatten the images, digit_pos -> +1 and digit_neg -> -1"""
    for digit in (digit_neg, digit_pos):
        if not 0 <= digit <= 9:
            raise UnknownDigitError(f"Digit filter {digit} is not a digit")
    if digit_neg == digit_pos:
        raise UnknownDigitError("Positive and negative digits must differ")
    if normalization not in ("unit", "none"):
        raise ValueError(f"Unknown normalization '{normalization}'")
    images = np.asarray(images)
    labels = np.asarray(labels).reshape(-1)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")

    rows = np.flatnonzero((labels == digit_neg) | (labels == digit_pos))
    for digit in (digit_neg, digit_pos):
        if not (labels[rows] == digit).any():
            raise EmptyClassError(f"No samples of digit {digit}")

    features = images[rows].reshape(rows.size, -1).astype(float)
    if normalization == "unit":
        features /= 255.0
    signs = np.where(labels[rows] == digit_pos, 1, -1)
    logger.info(f"Binary task {digit_neg}/{digit_pos}: {int((signs < 0).sum())} negatives, {int((signs > 0).sum())} positives")
    return LabeledDataset(features, signs, sample_ids=rows)


@dataclass(frozen=True, eq=False)
class AgentDataAssignment:
    """
    Per-agent training sets; reserve holds the unassigned training samples,
    holdout the shared labeled set for class means, streams the per-agent
    prediction features.
    """
    training: Tuple[LabeledDataset, ...]
    reserve: Optional[LabeledDataset] = None
    holdout: Optional[LabeledDataset] = None
    streams: Optional[Tuple[np.ndarray, ...]] = None

    @property
    def num_agents(self) -> int:
        return len(self.training)


def partition_agents(data: LabeledDataset, num_agents: int, per_class: int, seed: int) -> AgentDataAssignment:
    """Disjoint per-agent training sets with per_class samples of each class"""
    if num_agents < 1 or per_class < 1:
        raise ValueError(f"Need positive agent count and per-class size, got {num_agents} and {per_class}")
    rng = np.random.default_rng(seed)
    needed = num_agents * per_class
    shuffled = {}
    for label in (1, -1):
        rows = np.flatnonzero(data.labels == label)
        if rows.size < needed:
            raise InsufficientSamplesError(f"Class {label:+d} has {rows.size} samples, {needed} needed")
        shuffled[label] = rng.permutation(rows)

    training = []
    for k in range(num_agents):
        block = slice(k * per_class, (k + 1) * per_class)
        rows = np.concatenate([shuffled[1][block], shuffled[-1][block]])
        training.append(data.subset(rng.permutation(rows)))

    leftover = np.sort(np.concatenate([shuffled[1][needed:], shuffled[-1][needed:]]))
    reserve = data.subset(leftover) if leftover.size else None
    return AgentDataAssignment(training=tuple(training), reserve=reserve)


def corrupt_agent(assignment: AgentDataAssignment, k: int, seed: int) -> AgentDataAssignment:
    """
    Replace agent k's training set by class +1 features only, keeping its
    size, and draw its labels uniformly at random.
    """
    if not 0 <= k < assignment.num_agents:
        raise IndexError(f"Agent {k} outside 0..{assignment.num_agents - 1}")
    rng = np.random.default_rng(seed)
    own = assignment.training[k]
    pools = [own.of_class(1)] if own.class_count(1) else []
    if assignment.reserve is not None and assignment.reserve.class_count(1):
        pools.append(assignment.reserve.of_class(1))
    if not pools:
        raise EmptyClassError(f"No class +1 samples available to corrupt agent {k}")

    features = np.concatenate([pool.features for pool in pools])
    sample_ids = np.concatenate([pool.sample_ids for pool in pools])
    size = len(own)
    rows = rng.choice(features.shape[0], size=size, replace=features.shape[0] < size)
    labels = rng.choice(np.array([-1, 1]), size=size)
    corrupted = LabeledDataset(features[rows], labels, sample_ids=sample_ids[rows])

    training = list(assignment.training)
    training[k] = corrupted
    logger.info(f"Corrupted agent {k}: {size} class +1 samples, label mean {labels.mean():+.3f}")
    return replace(assignment, training=tuple(training))


def split_holdout(data: LabeledDataset, fraction: float, seed: int) -> Tuple[LabeledDataset, LabeledDataset]:
    """Stratified (holdout, stream pool) split"""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"Holdout fraction must lie in (0, 1), got {fraction}")
    stream_rows, holdout_rows = train_test_split(
        np.arange(len(data)), test_size=fraction, stratify=data.labels, random_state=seed
    )
    return data.subset(np.sort(holdout_rows)), data.subset(np.sort(stream_rows))


def prediction_schedule(horizon: int = 1000, switch_at: int = 500) -> np.ndarray:
    """-1 before switch_at, +1 from switch_at on"""
    if horizon < 0 or not 0 <= switch_at <= horizon:
        raise ValueError(f"Switch time {switch_at} outside [0, {horizon}]")
    return np.where(np.arange(horizon) < switch_at, -1, 1).astype(np.int8)


def draw_prediction_streams(
    pool: LabeledDataset,
    schedule: np.ndarray,
    rngs: Sequence[np.random.Generator],
) -> Tuple[np.ndarray, ...]:
    """Per agent, draw with replacement a pool sample of the scheduled class at every step"""
    schedule = np.asarray(schedule).reshape(-1)
    by_class = {label: np.flatnonzero(pool.labels == label) for label in (1, -1)}
    for label in np.unique(schedule):
        if by_class[int(label)].size == 0:
            raise EmptyClassError(f"Stream pool has no samples of class {int(label):+d}")
    streams = []
    for rng in rngs:
        rows = np.empty(schedule.size, dtype=np.int64)
        for label, candidates in by_class.items():
            steps = np.flatnonzero(schedule == label)
            if steps.size:
                rows[steps] = candidates[rng.integers(candidates.size, size=steps.size)]
        streams.append(pool.features[rows])
    return tuple(streams)


@dataclass(frozen=True, eq=False)
class GaussianSourceSpec:
    """Class +1 centred at +mean, class -1 at -mean, isotropic noise"""
    mean: np.ndarray
    sigma: float
    seed: int

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        if mean.size < 1:
            raise ValueError("Gaussian source needs dimension >= 1")
        if self.sigma <= 0:
            raise ValueError(f"Noise std must be positive, got {self.sigma}")
        mean.setflags(write=False)
        object.__setattr__(self, "mean", mean)

    @property
    def dimension(self) -> int:
        return self.mean.size

    @classmethod
    def along_diagonal(cls, dimension: int, norm: float, sigma: float, seed: int) -> "GaussianSourceSpec":
        return cls(np.full(dimension, norm / np.sqrt(dimension)), sigma, seed)


@dataclass(frozen=True, eq=False)
class GaussianSample:
    features: np.ndarray
    labels: np.ndarray
    llr: np.ndarray


def gaussian_stream(spec: GaussianSourceSpec, label_schedule: Sequence[int], count: Optional[int] = None) -> GaussianSample:
    """
    Samples h = gamma m + sigma noise with their exact log-likelihood ratio
    2 m.h / sigma^2. The schedule is repeated when count exceeds its length.
    """
    schedule = np.asarray(label_schedule, dtype=np.int8).reshape(-1)
    count = schedule.size if count is None else count
    if count < 0:
        raise ValueError(f"Sample count must be nonnegative, got {count}")
    labels = np.resize(schedule, count) if count else np.zeros(0, dtype=np.int8)
    rng = np.random.default_rng(spec.seed)
    noise = rng.standard_normal((count, spec.dimension))
    features = labels[:, np.newaxis] * spec.mean[np.newaxis, :] + spec.sigma * noise
    llr = 2.0 * features @ spec.mean / spec.sigma ** 2
    return GaussianSample(features=features, labels=labels, llr=llr)


def gaussian_training_set(spec: GaussianSourceSpec, per_class: int) -> LabeledDataset:
    sample = gaussian_stream(spec, [1, -1], count=2 * per_class)
    return LabeledDataset(sample.features, sample.labels)


def export_assignment_csv(assignment: AgentDataAssignment, path: Path, extra_columns: Optional[dict] = None) -> Path:
    """Audit dump: one row per (role, agent, sample)"""
    frames = []
    for k, dataset in enumerate(assignment.training):
        frames.append(pd.DataFrame({"role": "training", "agent": k, "sample_id": dataset.sample_ids, "label": dataset.labels}))
    for role, dataset in (("reserve", assignment.reserve), ("holdout", assignment.holdout)):
        if dataset is not None:
            frames.append(pd.DataFrame({"role": role, "agent": -1, "sample_id": dataset.sample_ids, "label": dataset.labels}))
    frame = pd.concat(frames, ignore_index=True)
    for name, value in (extra_columns or {}).items():
        frame[name] = value
    frame.to_csv(path, index=False)
    return Path(path)
