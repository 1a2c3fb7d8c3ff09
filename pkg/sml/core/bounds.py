"""
Rademacher complexity bounds, class-conditional means and the probability
bound for consistent learning
"""
from itertools import product
from typing import List, Optional, Sequence
import logging
import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from sml.core.classifier import FeedforwardNet, LabeledDataset, forward_logits
from sml.core.engine import AgentEnsemble
from sml.core.topology import network_average
from sml.exceptions import CoverageError, MarginDomainError, RiskDomainError, ShapeError

logger = logging.getLogger(__name__)

ENUMERATION_LIMIT = 12
_DRAW_CHUNK = 1024


class FnnComplexityParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    depth: int = Field(ge=1)
    weight_l1_bound: float = Field(ge=0)
    bias_bound: float = Field(ge=0)
    input_inf_bound: float = Field(gt=0)
    lipschitz: float = Field(gt=0)
    input_dim: int = Field(ge=1)
    sample_count: int = Field(ge=1)


class RademacherEstimate(BaseModel):
    mean: float
    standard_error: float
    num_draws: int
    exhaustive: bool


class ConsistencyInputs(BaseModel):
    model_config = ConfigDict(frozen=True)

    # d and network_risk are range-checked by check_domain
    d: float
    network_risk: float
    logit_bound: float = Field(gt=0)
    sample_counts: List[int]
    complexities: List[float]
    perron: List[float]

    @model_validator(mode="after")
    def _lengths_agree(self):
        if not (len(self.sample_counts) == len(self.complexities) == len(self.perron) >= 1):
            raise ValueError("sample_counts, complexities and perron must have the same nonzero length")
        if min(self.sample_counts) < 1 or min(self.complexities) < 0:
            raise ValueError("sample counts must be positive and complexities nonnegative")
        return self

    @property
    def margin_ceiling(self) -> float:
        """Upper end of the admissible range of d"""
        return -math.log(math.expm1(self.network_risk))

    def check_domain(self) -> None:
        if not 0.0 < self.network_risk < math.log(2.0):
            raise RiskDomainError(f"Network risk {self.network_risk} must lie in (0, log 2)")
        if not 0.0 < self.d < self.margin_ceiling:
            raise MarginDomainError(f"d = {self.d} must lie in (0, {self.margin_ceiling})")


class ConsistencyBound(BaseModel):
    """Per-agent exponential terms and the resulting probability bound"""
    delta_term: float
    first_terms: List[float]
    second_terms: List[float]
    first_vacuous: List[bool]
    second_vacuous: List[bool]
    bound: float
    bound_clamped: float


class ClassMeans(BaseModel):
    model_config = ConfigDict(frozen=True)

    agent_plus: List[float]
    agent_minus: List[float]
    agent_training: List[float]
    perron: List[float]
    network_plus: float
    network_minus: float
    network_training: float

    @model_validator(mode="after")
    def _network_matches_agents(self):
        weights = np.asarray(self.perron)
        for agents, network in (
            (self.agent_plus, self.network_plus),
            (self.agent_minus, self.network_minus),
            (self.agent_training, self.network_training),
        ):
            if abs(float(np.asarray(agents) @ weights) - network) > 1e-12:
                raise ValueError("Network means must equal the Perron-weighted agent means")
        return self


class ConsistencyVerdict(BaseModel):
    consistent: bool
    margin_plus: float
    margin_minus: float


class BoundReport(BaseModel):
    """Everything needed to audit the Rademacher and consistency evaluations"""
    fnn_params: List[FnnComplexityParams]
    rademacher_bounds: List[float]
    first_layer_rademacher: List[Optional[RademacherEstimate]] = []
    inputs: ConsistencyInputs
    result: ConsistencyBound
    class_means: Optional[ClassMeans] = None
    verdict: Optional[ConsistencyVerdict] = None


def fnn_rademacher_bound(p: FnnComplexityParams) -> float:
    """Distribution-free upper bound on the Rademacher average of an L-layer FNN class"""
    growth = 2.0 * p.weight_l1_bound * p.lipschitz
    input_term = (
        growth ** (p.depth - 1)
        * p.weight_l1_bound
        * p.input_inf_bound
        * math.sqrt(2.0 * math.log(2.0 * p.input_dim))
    )
    bias_term = sum(growth ** layer * p.bias_bound for layer in range(p.depth))
    return 2.0 / math.sqrt(p.sample_count) * (input_term + bias_term)


def _linear_sup(b: float, samples: np.ndarray, signs: np.ndarray) -> np.ndarray:
    # sup over ||w||_1 <= b of w . v is b * ||v||_inf
    return b * np.abs(signs @ samples / samples.shape[0]).max(axis=1)


def _all_signs(n: int) -> np.ndarray:
    return np.array(list(product((-1.0, 1.0), repeat=n)))


def empirical_rademacher_linear(
    b: float,
    samples: np.ndarray,
    num_draws: int,
    seed: int,
) -> RademacherEstimate:
    """
    Monte-Carlo estimate of the empirical Rademacher average of the l1-ball
    linear class. When num_draws == 2^N (N <= 12) every sign pattern is
    visited once and the result is exact.
    """
    samples = np.array(samples, dtype=float, ndmin=2)
    n = samples.shape[0]
    if n < 1 or samples.shape[1] < 1 or num_draws < 1:
        raise ShapeError(f"Need N, M >= 1 and at least one draw, got {samples.shape} and {num_draws}")

    if n <= ENUMERATION_LIMIT and num_draws == 2 ** n:
        values = _linear_sup(b, samples, _all_signs(n))
        return RademacherEstimate(mean=float(values.mean()), standard_error=0.0, num_draws=num_draws, exhaustive=True)

    # counter-based seeding per chunk of draws keeps results independent of how draws are scheduled
    values = []
    for chunk, start in enumerate(range(0, num_draws, _DRAW_CHUNK)):
        size = min(_DRAW_CHUNK, num_draws - start)
        rng = np.random.default_rng([seed, chunk])
        signs = rng.choice((-1.0, 1.0), size=(size, n))
        values.append(_linear_sup(b, samples, signs))
    values = np.concatenate(values)
    error = float(values.std(ddof=1) / math.sqrt(num_draws)) if num_draws > 1 else 0.0
    return RademacherEstimate(mean=float(values.mean()), standard_error=error, num_draws=num_draws, exhaustive=False)


def exact_rademacher_linear(b: float, samples: np.ndarray) -> float:
    """Brute-force expectation over all 2^N sign patterns"""
    samples = np.array(samples, dtype=float, ndmin=2)
    n = samples.shape[0]
    total = 0.0
    for signs in product((-1, 1), repeat=n):
        correlation = sum(r * x for r, x in zip(signs, samples)) / n
        total += b * float(np.max(np.abs(correlation)))
    return total / 2 ** n


def class_means(
    ensemble: AgentEnsemble,
    holdouts: Sequence[LabeledDataset],
    perron: np.ndarray,
) -> ClassMeans:
    """Class-conditional logit means per agent on held-out data, and their network averages"""
    if len(holdouts) != ensemble.num_agents:
        raise ShapeError(f"Expected {ensemble.num_agents} holdout sets, got {len(holdouts)}")
    perron = np.asarray(perron, dtype=float)
    plus, minus = [], []
    for k, (net, holdout) in enumerate(zip(ensemble.nets, holdouts)):
        logits = forward_logits(net, holdout.features)
        for label, sink in ((1, plus), (-1, minus)):
            rows = holdout.labels == label
            if not rows.any():
                logger.error(f"Holdout of agent {k} lacks class {label:+d}")
                raise CoverageError(k, label)
            sink.append(float(logits[rows].mean()))
    training = [float(m) for m in ensemble.training_means]
    return ClassMeans(
        agent_plus=plus,
        agent_minus=minus,
        agent_training=training,
        perron=perron.tolist(),
        network_plus=network_average(plus, perron),
        network_minus=network_average(minus, perron),
        network_training=network_average(training, perron),
    )


def consistency_condition(means: ClassMeans) -> ConsistencyVerdict:
    """mu+ above the network training mean and mu- below it"""
    margin_plus = means.network_plus - means.network_training
    margin_minus = means.network_training - means.network_minus
    return ConsistencyVerdict(
        consistent=margin_plus > 0 and margin_minus > 0,
        margin_plus=margin_plus,
        margin_minus=margin_minus,
    )


def consistency_probability_bound(inp: ConsistencyInputs) -> ConsistencyBound:
    """
    Lower bound on the probability of consistent learning. A gap that is not
    positive makes its exponential 1 and is flagged vacuous; the raw bound
    may be negative and bound_clamped brings it into [0, 1].
    """
    inp.check_domain()
    delta_term = math.log1p(math.exp(-inp.d))
    scale = 2.0 * inp.logit_bound ** 2
    first_terms, second_terms, first_vacuous, second_vacuous = [], [], [], []
    for count, rho in zip(inp.sample_counts, inp.complexities):
        for gap, terms, flags in (
            (inp.d - rho, first_terms, first_vacuous),
            ((delta_term - inp.network_risk) / 2.0 - rho, second_terms, second_vacuous),
        ):
            if gap <= 0:
                terms.append(1.0)
                flags.append(True)
            else:
                terms.append(math.exp(-gap ** 2 * count / scale))
                flags.append(False)
    bound = 1.0 - 2.0 * sum(first_terms) - sum(second_terms)
    if any(first_vacuous) or any(second_vacuous):
        logger.info("Consistency bound is vacuous for at least one agent")
    return ConsistencyBound(
        delta_term=delta_term,
        first_terms=first_terms,
        second_terms=second_terms,
        first_vacuous=first_vacuous,
        second_vacuous=second_vacuous,
        bound=bound,
        bound_clamped=min(max(bound, 0.0), 1.0),
    )


def network_average_risk(per_agent_risks: Sequence[float], perron: np.ndarray) -> float:
    return network_average(per_agent_risks, np.asarray(perron, dtype=float))


def fnn_complexity_params(net: FeedforwardNet, input_inf_bound: float, sample_count: int) -> FnnComplexityParams:
    """Read the FNN bound constants off a trained net"""
    return FnnComplexityParams(
        depth=net.depth,
        weight_l1_bound=max(float(np.abs(w).sum(axis=1).max()) for w in net.weights),
        bias_bound=max(float(np.abs(b).max()) for b in net.biases),
        input_inf_bound=input_inf_bound,
        lipschitz=net.lipschitz,
        input_dim=net.input_dim,
        sample_count=sample_count,
    )


def logit_bound(net: FeedforwardNet, feature_sets: Sequence[np.ndarray]) -> float:
    """max |f| over the given feature sets"""
    return max(float(np.abs(forward_logits(net, x)).max()) for x in feature_sets if len(x))


def default_margin(network_risk: float) -> float:
    """Midpoint of the admissible range of d"""
    if not 0.0 < network_risk < math.log(2.0):
        raise RiskDomainError(f"Network risk {network_risk} must lie in (0, log 2)")
    return 0.5 * -math.log(math.expm1(network_risk))


def evaluate_bounds(
    nets: Sequence[FeedforwardNet],
    sample_counts: Sequence[int],
    training_risks: Sequence[float],
    logit_bounds: Sequence[float],
    perron: np.ndarray,
    input_inf_bound: float = 1.0,
    d: Optional[float] = None,
    train_features: Optional[Sequence[np.ndarray]] = None,
    rademacher_draws: int = 0,
    seed: int = 0,
    means: Optional[ClassMeans] = None,
) -> BoundReport:
    """
    Chain the FNN bound into the consistency bound: rho_k is twice the FNN
    bound, R is the Perron average of training risks, B the largest logit.
    """
    params = [fnn_complexity_params(net, input_inf_bound, count) for net, count in zip(nets, sample_counts)]
    radius = [fnn_rademacher_bound(p) for p in params]
    risk = network_average_risk(training_risks, perron)
    inputs = ConsistencyInputs(
        d=d if d is not None else default_margin(risk),
        network_risk=risk,
        logit_bound=max(logit_bounds),
        sample_counts=list(sample_counts),
        complexities=[2.0 * r for r in radius],
        perron=np.asarray(perron, dtype=float).tolist(),
    )
    logger.info(f"Consistency inputs: R={risk:.6f}, d={inputs.d:.6f}, B={inputs.logit_bound:.4f}")

    first_layer: List[Optional[RademacherEstimate]] = []
    if train_features is not None and rademacher_draws > 0:
        for k, (net, features) in enumerate(zip(nets, train_features)):
            b = float(np.abs(net.weights[0]).sum(axis=1).max())
            first_layer.append(empirical_rademacher_linear(b, features, rademacher_draws, seed + k))

    return BoundReport(
        fnn_params=params,
        rademacher_bounds=radius,
        first_layer_rademacher=first_layer,
        inputs=inputs,
        result=consistency_probability_bound(inputs),
        class_means=means,
        verdict=consistency_condition(means) if means is not None else None,
    )
