"""
Agent graphs, averaging-rule combination matrices and their Perron eigenvector
"""
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple
import logging

import networkx as nx
import numpy as np
import pandas as pd

from sml.exceptions import ConvergenceError, InvalidGraphError, ShapeError

logger = logging.getLogger(__name__)

STOCHASTIC_TOL = 1e-12
PERRON_CHECK_TOL = 1e-10


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class AgentGraph:
    """
    Directed agent graph. adjacency[l, k] is True when agent l belongs to
    the neighborhood of agent k (k listens to l); the diagonal holds the
    self-loop flags.
    """
    adjacency: np.ndarray

    def __post_init__(self):
        adjacency = np.asarray(self.adjacency)
        if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1] or adjacency.shape[0] < 1:
            raise InvalidGraphError(f"Adjacency must be a non-empty square matrix, got shape {adjacency.shape}")
        if adjacency.dtype != bool:
            if not np.isin(adjacency, (0, 1)).all():
                raise InvalidGraphError("Adjacency entries must be boolean")
            adjacency = adjacency.astype(bool)
        object.__setattr__(self, "adjacency", _frozen(adjacency))

    @property
    def num_agents(self) -> int:
        return self.adjacency.shape[0]

    @property
    def self_loops(self) -> np.ndarray:
        return np.diag(self.adjacency).copy()

    def neighborhood(self, k: int) -> np.ndarray:
        """Indices l with l in N_k"""
        return np.flatnonzero(self.adjacency[:, k])

    def to_digraph(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        graph.add_nodes_from(range(self.num_agents))
        sources, targets = np.nonzero(self.adjacency)
        graph.add_edges_from(zip(sources.tolist(), targets.tolist()))
        return graph


@dataclass(frozen=True, eq=False)
class CombinationMatrix:
    """Left-stochastic weights a_{lk}; perron is filled by with_perron()"""
    weights: np.ndarray
    perron: Optional[np.ndarray] = None

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float)
        if weights.ndim != 2 or weights.shape[0] != weights.shape[1] or weights.shape[0] < 1:
            raise InvalidGraphError(f"Combination matrix must be square, got shape {weights.shape}")
        if not np.isfinite(weights).all() or (weights < 0).any():
            raise InvalidGraphError("Combination weights must be finite and nonnegative")
        column_error = np.abs(weights.sum(axis=0) - 1.0).max()
        if column_error > STOCHASTIC_TOL:
            raise InvalidGraphError(f"Columns must sum to 1 (max deviation {column_error:.3e})")
        object.__setattr__(self, "weights", _frozen(weights))

        if self.perron is not None:
            perron = np.asarray(self.perron, dtype=float)
            if perron.shape != (weights.shape[0],):
                raise InvalidGraphError(f"Perron vector has shape {perron.shape}, expected ({weights.shape[0]},)")
            if (perron <= 0).any():
                raise InvalidGraphError("Perron vector entries must be positive")
            if abs(perron.sum() - 1.0) > STOCHASTIC_TOL:
                raise InvalidGraphError("Perron vector must sum to 1")
            residual = np.abs(weights @ perron - perron).max()
            if residual > PERRON_CHECK_TOL:
                raise InvalidGraphError(f"A pi != pi (residual {residual:.3e})")
            object.__setattr__(self, "perron", _frozen(perron))

    @property
    def num_agents(self) -> int:
        return self.weights.shape[0]

    def support(self) -> AgentGraph:
        return AgentGraph(self.weights > 0)


def graph_from_edges(
    num_agents: int,
    edges: Iterable[Tuple[int, int]],
    self_loops: Iterable[int],
    directed: bool = False,
) -> AgentGraph:
    """
    Build an AgentGraph from index pairs. A pair (l, k) puts l in N_k;
    undirected pairs are inserted both ways.
    """
    if num_agents < 1:
        raise InvalidGraphError(f"Number of agents must be positive, got {num_agents}")
    adjacency = np.zeros((num_agents, num_agents), dtype=bool)
    for source, target in edges:
        for index in (source, target):
            if not 0 <= index < num_agents:
                raise InvalidGraphError(f"Edge ({source}, {target}) references agent outside 0..{num_agents - 1}")
        adjacency[source, target] = True
        if not directed:
            adjacency[target, source] = True
    for agent in self_loops:
        if not 0 <= agent < num_agents:
            raise InvalidGraphError(f"Self-loop on unknown agent {agent}")
        adjacency[agent, agent] = True
    return AgentGraph(adjacency)


def random_strongly_connected_graph(
    num_agents: int,
    edge_probability: float,
    seed: int,
    max_attempts: int = 10_000,
) -> AgentGraph:
    """Erdos-Renyi digraph, rejection-sampled until strongly connected, with one forced self-loop"""
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        digraph = nx.gnp_random_graph(
            num_agents, edge_probability, seed=int(rng.integers(2**32)), directed=True
        )
        if not nx.is_strongly_connected(digraph):
            continue
        adjacency = nx.to_numpy_array(digraph, nodelist=range(num_agents), dtype=bool)
        loop = int(rng.integers(num_agents))
        adjacency[loop, loop] = True
        return AgentGraph(adjacency)
    raise InvalidGraphError(
        f"No strongly connected graph with p={edge_probability} after {max_attempts} draws"
    )


def check_strong_connectivity(graph: AgentGraph) -> bool:
    """Strongly connected with at least one self-loop (primitivity)"""
    if not graph.self_loops.any():
        return False
    return nx.is_strongly_connected(graph.to_digraph())


def build_averaging_matrix(graph: AgentGraph) -> CombinationMatrix:
    """a_{lk} = 1/|N_k| for l in N_k, zero elsewhere"""
    degrees = graph.adjacency.sum(axis=0)
    empty = np.flatnonzero(degrees == 0)
    if empty.size:
        raise InvalidGraphError(f"Agents with empty neighborhood: {empty.tolist()}")
    weights = graph.adjacency / degrees[np.newaxis, :]
    return CombinationMatrix(weights)


def perron_eigenvector(
    matrix: CombinationMatrix,
    tol: float = 1e-12,
    max_iters: int = 1_000_000,
) -> np.ndarray:
    """
    Power iteration with sum-normalization at every step. Returns pi with
    ||A pi - pi||_inf < tol, positive entries summing to one.
    """
    if not check_strong_connectivity(matrix.support()):
        raise InvalidGraphError("Perron vector requires a strongly connected support with a self-loop")

    weights = matrix.weights
    pi = np.full(matrix.num_agents, 1.0 / matrix.num_agents)
    residual = np.inf
    for iteration in range(max_iters):
        nxt = weights @ pi
        nxt /= nxt.sum()
        residual = np.abs(weights @ nxt - nxt).max()
        pi = nxt
        if residual < tol:
            logger.debug(f"Perron iteration converged after {iteration + 1} steps")
            return pi
    logger.error(f"Perron iteration did not converge in {max_iters} steps")
    raise ConvergenceError(f"Power iteration did not converge in {max_iters} iterations", float(residual))


def with_perron(matrix: CombinationMatrix, tol: float = 1e-12, max_iters: int = 1_000_000) -> CombinationMatrix:
    return replace(matrix, perron=perron_eigenvector(matrix, tol=tol, max_iters=max_iters))


def combination_matrix(graph: AgentGraph, tol: float = 1e-12, max_iters: int = 1_000_000) -> CombinationMatrix:
    """Averaging-rule matrix with its Perron vector, after checking connectivity"""
    if not check_strong_connectivity(graph):
        raise InvalidGraphError("Graph must be strongly connected with at least one self-loop")
    return with_perron(build_averaging_matrix(graph), tol=tol, max_iters=max_iters)


def export_matrix_csv(matrix: CombinationMatrix, path: Path, extra_columns: Optional[dict] = None) -> Path:
    """Row-major weights plus the Perron entry of each row's agent"""
    frame = pd.DataFrame(
        matrix.weights,
        columns=[f"a_{k}" for k in range(matrix.num_agents)],
    )
    frame.insert(0, "agent", np.arange(matrix.num_agents))
    if matrix.perron is not None:
        frame["perron"] = matrix.perron
    for name, value in (extra_columns or {}).items():
        frame[name] = value
    frame.to_csv(path, index=False, float_format="%.17g")
    return Path(path)


def network_average(values: Sequence[float], perron: np.ndarray) -> float:
    """Perron-weighted sum over agents"""
    values = np.asarray(values, dtype=float)
    if values.shape != perron.shape:
        raise ShapeError(f"Expected {perron.shape[0]} per-agent values, got {values.shape}")
    return float(values @ perron)
