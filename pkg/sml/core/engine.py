"""
Prediction phase: debiased logits fused over the network by the adaptive
diffusion recursion, plus the belief-form update used to cross-check it
"""
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple
import logging

import numpy as np
from scipy.special import logsumexp

from sml.core.classifier import FeedforwardNet, forward_logits
from sml.core.topology import CombinationMatrix
from sml.exceptions import ShapeError, SignalError
from sml.utils.parallel import map_agents

logger = logging.getLogger(__name__)

TRAINING_MEAN_TOL = 1e-12


def _check_step_size(delta: float) -> float:
    # delta = 1 is the memoryless degenerate case, still well defined
    if not 0.0 < delta <= 1.0:
        raise ValueError(f"Step size must lie in (0, 1], got {delta}")
    return float(delta)


@dataclass(frozen=True, eq=False)
class AgentEnsemble:
    """Trained nets, their empirical training means and the combination matrix"""
    nets: Tuple[FeedforwardNet, ...]
    training_means: np.ndarray
    combination: CombinationMatrix

    def __post_init__(self):
        means = np.asarray(self.training_means, dtype=float).reshape(-1)
        if means.shape[0] != len(self.nets) or len(self.nets) != self.combination.num_agents:
            raise ShapeError(
                f"{len(self.nets)} nets, {means.shape[0]} training means, "
                f"{self.combination.num_agents}-agent combination matrix"
            )
        if not np.isfinite(means).all():
            raise ValueError("Training means must be finite")
        means.setflags(write=False)
        object.__setattr__(self, "nets", tuple(self.nets))
        object.__setattr__(self, "training_means", means)

    @property
    def num_agents(self) -> int:
        return len(self.nets)

    def verify_training_means(self, train_features: Sequence[np.ndarray], tol: float = TRAINING_MEAN_TOL) -> bool:
        recomputed = np.array([training_mean(net, x) for net, x in zip(self.nets, train_features)])
        return bool(np.all(np.abs(recomputed - self.training_means) <= tol))


@dataclass(frozen=True, eq=False)
class DiffusionState:
    lambdas: np.ndarray
    step_size: float
    time_index: int = 0

    def __post_init__(self):
        lambdas = np.array(self.lambdas, dtype=float).reshape(-1)
        if not np.isfinite(lambdas).all():
            raise ValueError("Decision variables must be finite")
        if self.time_index < 0:
            raise ValueError(f"Time index must be nonnegative, got {self.time_index}")
        lambdas.setflags(write=False)
        object.__setattr__(self, "lambdas", lambdas)
        object.__setattr__(self, "step_size", _check_step_size(self.step_size))


@dataclass(frozen=True, eq=False)
class BeliefState:
    """Beliefs phi_k(+1), phi_k(-1) kept as logarithms (K x 2)"""
    log_beliefs: np.ndarray

    def __post_init__(self):
        log_beliefs = np.array(self.log_beliefs, dtype=float)
        if log_beliefs.ndim != 2 or log_beliefs.shape[1] != 2:
            raise ShapeError(f"Log beliefs must be K x 2, got {log_beliefs.shape}")
        if not np.isfinite(log_beliefs).all():
            raise ValueError("Log beliefs must be finite")
        if np.abs(np.exp(log_beliefs).sum(axis=1) - 1.0).max() > 1e-12:
            raise ValueError("Each agent's beliefs must sum to 1")
        log_beliefs.setflags(write=False)
        object.__setattr__(self, "log_beliefs", log_beliefs)

    @classmethod
    def from_log_ratios(cls, lambdas: np.ndarray) -> "BeliefState":
        lambdas = np.asarray(lambdas, dtype=float).reshape(-1)
        return cls(np.column_stack([-np.logaddexp(0.0, -lambdas), -np.logaddexp(0.0, lambdas)]))

    @classmethod
    def uniform(cls, num_agents: int) -> "BeliefState":
        return cls(np.full((num_agents, 2), -np.log(2.0)))

    @property
    def beliefs(self) -> np.ndarray:
        return np.exp(self.log_beliefs)

    def log_ratios(self) -> np.ndarray:
        return self.log_beliefs[:, 0] - self.log_beliefs[:, 1]


@dataclass(frozen=True, eq=False)
class PredictionTrajectory:
    """Row i holds the state after the observation at time i"""
    lambdas: np.ndarray
    decisions: np.ndarray
    statistics: np.ndarray

    @property
    def horizon(self) -> int:
        return self.lambdas.shape[0]


def training_mean(net: FeedforwardNet, train_features: np.ndarray) -> float:
    """Empirical mean of the logit over the agent's own training features"""
    return float(np.mean(forward_logits(net, train_features)))


def build_ensemble(
    nets: Sequence[FeedforwardNet],
    train_features: Sequence[np.ndarray],
    combination: CombinationMatrix,
) -> AgentEnsemble:
    means = [training_mean(net, x) for net, x in zip(nets, train_features)]
    return AgentEnsemble(tuple(nets), np.array(means), combination)


def _check_agent(ensemble: AgentEnsemble, k: int) -> None:
    if not 0 <= k < ensemble.num_agents:
        raise IndexError(f"Agent {k} outside 0..{ensemble.num_agents - 1}")


def debiased_statistic(ensemble: AgentEnsemble, k: int, h: np.ndarray) -> float:
    """c = f_k(h) - training mean of agent k"""
    _check_agent(ensemble, k)
    h = np.asarray(h, dtype=float)
    if h.ndim != 1:
        raise ShapeError(f"Expected a feature vector, got shape {h.shape}")
    return float(forward_logits(ensemble.nets[k], h)[0] - ensemble.training_means[k])


def debiased_statistics(
    ensemble: AgentEnsemble,
    streams: Sequence[np.ndarray],
    workers: int = 1,
) -> np.ndarray:
    """T x K matrix of debiased logits, one column per agent stream"""
    if len(streams) != ensemble.num_agents:
        raise ShapeError(f"Expected {ensemble.num_agents} streams, got {len(streams)}")
    lengths = {np.asarray(stream).shape[0] for stream in streams}
    if len(lengths) > 1:
        raise ShapeError(f"Agent streams have unequal lengths {sorted(lengths)}")
    horizon = lengths.pop()
    if horizon == 0:
        return np.zeros((0, ensemble.num_agents))

    def agent_column(k: int) -> np.ndarray:
        return forward_logits(ensemble.nets[k], streams[k]) - ensemble.training_means[k]

    columns = map_agents(agent_column, range(ensemble.num_agents), workers)
    return np.column_stack(columns)


def diffusion_step(state: DiffusionState, c: np.ndarray, combination: CombinationMatrix) -> DiffusionState:
    """lambda_k <- (1 - delta) sum_l a_lk lambda_l + delta sum_l a_lk c_l"""
    c = np.asarray(c, dtype=float).reshape(-1)
    if c.shape[0] != combination.num_agents or state.lambdas.shape[0] != combination.num_agents:
        raise ShapeError(
            f"State of {state.lambdas.shape[0]} agents and {c.shape[0]} statistics "
            f"for a {combination.num_agents}-agent matrix"
        )
    bad = np.flatnonzero(~np.isfinite(c))
    if bad.size:
        raise SignalError(int(bad[0]), state.time_index + 1)
    delta = state.step_size
    combined = combination.weights.T @ ((1.0 - delta) * state.lambdas + delta * c)
    return DiffusionState(combined, delta, state.time_index + 1)


def decide(lambda_k: float) -> int:
    """sign with sign(0) = +1"""
    return 1 if lambda_k >= 0 else -1


def decide_all(lambdas: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(lambdas) >= 0, 1, -1).astype(np.int8)


def local_decisions(statistics: np.ndarray) -> np.ndarray:
    """Each agent's stand-alone decision from its own debiased logit"""
    return decide_all(statistics)


def diffuse(
    statistics: np.ndarray,
    combination: CombinationMatrix,
    delta: float,
    lambda0: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Run the recursion over a T x K statistic matrix, returning T x K decision variables"""
    statistics = np.asarray(statistics, dtype=float)
    num_agents = combination.num_agents
    if statistics.ndim != 2 or statistics.shape[1] != num_agents:
        raise ShapeError(f"Statistics must be T x {num_agents}, got {statistics.shape}")
    if lambda0 is None:
        lambda0 = np.zeros(num_agents)
    state = DiffusionState(lambda0, delta)
    lambdas = np.empty_like(statistics)
    for i in range(statistics.shape[0]):
        try:
            state = diffusion_step(state, statistics[i], combination)
        except SignalError as exc:
            logger.error(f"Diffusion stopped at time {i}: {exc}")
            raise SignalError(exc.agent, i) from exc
        lambdas[i] = state.lambdas
    return lambdas


def run_prediction(
    ensemble: AgentEnsemble,
    combination: CombinationMatrix,
    delta: float,
    streams: Sequence[np.ndarray],
    lambda0: Optional[np.ndarray] = None,
    workers: int = 1,
) -> PredictionTrajectory:
    """Debias every agent's stream, diffuse, and record sign decisions at every step"""
    statistics = debiased_statistics(ensemble, streams, workers=workers)
    lambdas = diffuse(statistics, combination, delta, lambda0)
    return PredictionTrajectory(lambdas=lambdas, decisions=decide_all(lambdas), statistics=statistics)


def _belief_update(
    state: BeliefState,
    log_ratios: np.ndarray,
    combination: CombinationMatrix,
    delta: float,
) -> BeliefState:
    # Bayes-like step: psi ~ phi^(1-delta) L^delta, with L(+1)/L(-1) given as a log ratio
    log_likelihoods = np.column_stack([log_ratios, np.zeros_like(log_ratios)])
    log_psi = (1.0 - delta) * state.log_beliefs + delta * log_likelihoods
    log_psi -= logsumexp(log_psi, axis=1, keepdims=True)
    # geometric combination of neighbors' intermediate beliefs
    log_phi = combination.weights.T @ log_psi
    log_phi -= logsumexp(log_phi, axis=1, keepdims=True)
    return BeliefState(log_phi)


def belief_oracle_step(
    state: BeliefState,
    likelihood_ratios: np.ndarray,
    combination: CombinationMatrix,
    delta: float,
) -> BeliefState:
    """
    One belief-form social learning update. likelihood_ratios[k] is
    L_k(h|+1) / L_k(h|-1); for trained classifiers use exp(c_k).
    """
    delta = _check_step_size(delta)
    ratios = np.asarray(likelihood_ratios, dtype=float).reshape(-1)
    if ratios.shape[0] != combination.num_agents or state.log_beliefs.shape[0] != combination.num_agents:
        raise ShapeError(f"Expected {combination.num_agents} likelihood ratios, got {ratios.shape[0]}")
    if (ratios <= 0).any() or not np.isfinite(ratios).all():
        raise ValueError("Likelihood ratios must be positive and finite")
    return _belief_update(state, np.log(ratios), combination, delta)


def run_belief_oracle(
    statistics: np.ndarray,
    combination: CombinationMatrix,
    delta: float,
    lambda0: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Iterate the belief update on log-ratio evidence; returns log(phi(+1)/phi(-1)) per step"""
    delta = _check_step_size(delta)
    statistics = np.asarray(statistics, dtype=float)
    num_agents = combination.num_agents
    if lambda0 is None:
        lambda0 = np.zeros(num_agents)
    state = BeliefState.from_log_ratios(lambda0)
    ratios = np.empty_like(statistics)
    for i, evidence in enumerate(statistics):
        state = _belief_update(state, evidence, combination, delta)
        ratios[i] = state.log_ratios()
    return ratios


def decision_accuracy(
    decisions: np.ndarray,
    labels: np.ndarray,
    windows: Optional[Iterable[Tuple[int, int]]] = None,
) -> np.ndarray:
    """Per-agent fraction of correct decisions over the union of [start, stop) windows"""
    decisions = np.asarray(decisions)
    labels = np.asarray(labels).reshape(-1)
    horizon = decisions.shape[0]
    mask = np.zeros(horizon, dtype=bool)
    if windows is None:
        mask[:] = True
    else:
        for start, stop in windows:
            mask[max(start, 0):min(stop, horizon)] = True
    if not mask.any():
        return np.full(decisions.shape[1] if decisions.ndim == 2 else 0, np.nan)
    return (decisions[mask] == labels[mask, np.newaxis]).mean(axis=0)
