"""
Experiment configuration models
"""
from typing import List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from sml.core.classifier import ACTIVATIONS

# Ten agents, undirected, every agent on a cycle plus a few chords
DEFAULT_EDGES: List[Tuple[int, int]] = [
    (0, 1), (0, 2), (1, 3), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7),
    (7, 8), (8, 9), (9, 0), (2, 5), (4, 7), (1, 8), (6, 9),
]


def _split(value):
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class GraphSection(_Section):
    num_agents: int = Field(10, ge=1)
    kind: Literal["edges", "random"] = "edges"
    edges: List[Tuple[int, int]] = DEFAULT_EDGES
    directed: bool = False
    self_loops: Union[Literal["all"], List[int]] = "all"
    edge_probability: float = Field(0.3, gt=0, le=1)
    # only the averaging rule is implemented; the key is kept for other rules
    rule: Literal["averaging"] = "averaging"

    @field_validator("edges", mode="before")
    @classmethod
    def _parse_edges(cls, value):
        items = _split(value)
        if items and isinstance(items[0], str):
            return [tuple(int(part) for part in item.split("-")) for item in items]
        return items

    @field_validator("self_loops", mode="before")
    @classmethod
    def _parse_loops(cls, value):
        if isinstance(value, str) and value.strip() == "all":
            return "all"
        return _split(value)

    def loop_agents(self) -> List[int]:
        return list(range(self.num_agents)) if self.self_loops == "all" else list(self.self_loops)


class DiffusionSection(_Section):
    step_size: float = Field(0.05, gt=0, lt=1)
    initial_lambda: List[float] = [0.0]

    @field_validator("initial_lambda", mode="before")
    @classmethod
    def _split_lambda(cls, value):
        return _split(value)


class DataSection(_Section):
    source: Literal["mnist", "gaussian"] = "mnist"
    mnist_dir: str = "data/mnist"
    train_images: str = "train-images-idx3-ubyte"
    train_labels: str = "train-labels-idx1-ubyte"
    test_images: str = "t10k-images-idx3-ubyte"
    test_labels: str = "t10k-labels-idx1-ubyte"
    digit_neg: int = Field(0, ge=0, le=9)
    digit_pos: int = Field(1, ge=0, le=9)
    normalization: Literal["unit", "none"] = "unit"
    per_class: int = Field(98, ge=1)
    holdout_fraction: float = Field(0.2, gt=0, lt=1)
    corrupt_agents: List[int] = [0]
    independent_streams: bool = True

    @field_validator("corrupt_agents", mode="before")
    @classmethod
    def _split_corrupt(cls, value):
        return _split(value)


class SynthSection(_Section):
    dimension: int = Field(2, ge=1)
    mean_norms: List[float] = [1.0]
    sigma: float = Field(1.0, gt=0)
    train_per_class: int = Field(250, ge=1)
    holdout_per_class: int = Field(200, ge=1)

    @field_validator("mean_norms", mode="before")
    @classmethod
    def _split_norms(cls, value):
        return _split(value)


class ModelSection(_Section):
    hidden_sizes: List[int] = [64]
    activation: str = "arctan"

    @field_validator("hidden_sizes", mode="before")
    @classmethod
    def _split_hidden(cls, value):
        return _split(value)

    @field_validator("activation")
    @classmethod
    def _known_activation(cls, value):
        if value not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")
        return value


class TrainSection(_Section):
    batch_size: int = Field(10, ge=1)
    epochs: int = Field(15, ge=1)
    learning_rate: float = Field(0.05, ge=0)
    shuffle: bool = True


class PredictSection(_Section):
    horizon: int = Field(1000, ge=0)
    switch_at: int = Field(500, ge=0)
    accuracy_windows: List[Tuple[int, int]] = [(100, 500), (550, 1000)]

    @field_validator("accuracy_windows", mode="before")
    @classmethod
    def _parse_windows(cls, value):
        items = _split(value)
        if items and isinstance(items[0], str):
            return [tuple(int(part) for part in item.split("-")) for item in items]
        return items

    @model_validator(mode="after")
    def _switch_in_range(self):
        if self.switch_at > self.horizon:
            raise ValueError(f"switch_at {self.switch_at} exceeds horizon {self.horizon}")
        return self


class BoundsSection(_Section):
    input_inf_bound: float = Field(1.0, gt=0)
    margin: Optional[float] = Field(None, gt=0)
    rademacher_draws: int = Field(200, ge=0)

    @field_validator("margin", mode="before")
    @classmethod
    def _empty_is_none(cls, value):
        return None if value in ("", None) else value


class RunSection(_Section):
    seed: int = Field(0, ge=0, lt=2**64)


class ExperimentConfig(_Section):
    """Every setting that determines the artifacts of a run"""
    graph: GraphSection = GraphSection()
    diffusion: DiffusionSection = DiffusionSection()
    data: DataSection = DataSection()
    synth: SynthSection = SynthSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    predict: PredictSection = PredictSection()
    bounds: BoundsSection = BoundsSection()
    run: RunSection = RunSection()

    @model_validator(mode="after")
    def _agents_in_range(self):
        k = self.graph.num_agents
        referenced = list(self.data.corrupt_agents) + self.graph.loop_agents()
        if self.graph.kind == "edges":
            referenced += [index for edge in self.graph.edges for index in edge]
        bad = sorted({index for index in referenced if not 0 <= index < k})
        if bad:
            raise ValueError(f"Agents {bad} referenced but the graph has {k} agents")
        for name, values in (
            ("DIFFUSION_INITIAL_LAMBDA", self.diffusion.initial_lambda),
            ("SYNTH_MEAN_NORMS", self.synth.mean_norms),
        ):
            if len(values) not in (1, k):
                raise ValueError(f"{name} needs 1 or {k} values, got {len(values)}")
        if self.data.digit_neg == self.data.digit_pos:
            raise ValueError("DATA_DIGIT_NEG and DATA_DIGIT_POS must differ")
        return self

    def initial_lambdas(self) -> List[float]:
        values = self.diffusion.initial_lambda
        return values * self.graph.num_agents if len(values) == 1 else list(values)

    def mean_norms(self) -> List[float]:
        values = self.synth.mean_norms
        return values * self.graph.num_agents if len(values) == 1 else list(values)
