"""
End-to-end runs: graph, data, per-agent training, class means, bounds and
the streaming prediction phase, with every artifact written to one directory
"""
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple
import hashlib
import logging
import math

import numpy as np
import pandas as pd

from sml import artifacts
from sml.config import config_hash, parse_experiment_config
from sml.core.bounds import BoundReport, ConsistencyVerdict, class_means, consistency_condition, evaluate_bounds, logit_bound
from sml.core.classifier import LabeledDataset, TrainConfig, TrainResult, init_net, load_checkpoint, save_checkpoint, train
from sml.core.data_pipeline import (
    AgentDataAssignment,
    GaussianSourceSpec,
    build_binary_task,
    corrupt_agent,
    draw_prediction_streams,
    export_assignment_csv,
    gaussian_stream,
    gaussian_training_set,
    load_mnist,
    partition_agents,
    prediction_schedule,
    split_holdout,
)
from sml.core.engine import build_ensemble, run_belief_oracle, run_prediction
from sml.core.topology import (
    CombinationMatrix,
    combination_matrix,
    export_matrix_csv,
    graph_from_edges,
    random_strongly_connected_graph,
)
from sml.exceptions import BoundsDomainError, ConfigError, HashMismatchError, StageError
from sml.models import ExperimentConfig
from sml.utils.parallel import map_agents
from sml.utils.seeding import agent_rngs, derive_seed

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.npz"


@dataclass(frozen=True, eq=False)
class ExperimentData:
    training: Tuple[LabeledDataset, ...]
    holdouts: Tuple[LabeledDataset, ...]
    streams: Tuple[np.ndarray, ...]
    labels: np.ndarray
    assignment: AgentDataAssignment


@dataclass(frozen=True, eq=False)
class RunArtifacts:
    """Where a run wrote its outputs, plus the headline results"""
    output_dir: Path
    config_hash: str
    seed: int
    files: Dict[str, Path]
    verdict: Optional[ConsistencyVerdict] = None
    bound_report: Optional[BoundReport] = None
    accuracy: Optional[pd.DataFrame] = None


@contextmanager
def _stage(name: str, output_dir: Path):
    logger.info(f"Stage '{name}' started")
    try:
        yield
    except Exception as e:
        artifacts.mark_failed(output_dir, name, e)
        raise StageError(name, e) from e
    logger.info(f"Stage '{name}' finished")


def build_combination(cfg: ExperimentConfig) -> CombinationMatrix:
    g = cfg.graph
    if g.kind == "random":
        graph = random_strongly_connected_graph(g.num_agents, g.edge_probability, derive_seed(cfg.run.seed, "graph"))
    else:
        graph = graph_from_edges(g.num_agents, g.edges, g.loop_agents(), directed=g.directed)
    return combination_matrix(graph)


def _draw_streams(pool: LabeledDataset, schedule: np.ndarray, cfg: ExperimentConfig) -> Tuple[np.ndarray, ...]:
    k = cfg.graph.num_agents
    if cfg.data.independent_streams:
        return draw_prediction_streams(pool, schedule, agent_rngs(cfg.run.seed, "streams", k))
    shared = draw_prediction_streams(pool, schedule, agent_rngs(cfg.run.seed, "streams", 1))[0]
    return (shared,) * k


def _corrupt(assignment: AgentDataAssignment, cfg: ExperimentConfig) -> AgentDataAssignment:
    for k in cfg.data.corrupt_agents:
        assignment = corrupt_agent(assignment, k, derive_seed(cfg.run.seed, "corruption", k))
    return assignment


def prepare_mnist_data(cfg: ExperimentConfig, schedule: np.ndarray) -> ExperimentData:
    """
    Training sets come from the MNIST training split; the test split is
    divided into the shared holdout and the pool prediction streams draw from.
    """
    d = cfg.data
    root = Path(d.mnist_dir)
    images, labels = load_mnist(root / d.train_images, root / d.train_labels)
    task = build_binary_task(images, labels, d.digit_neg, d.digit_pos, d.normalization)
    assignment = partition_agents(task, cfg.graph.num_agents, d.per_class, derive_seed(cfg.run.seed, "partition"))
    assignment = _corrupt(assignment, cfg)

    test_images, test_labels = load_mnist(root / d.test_images, root / d.test_labels)
    test_task = build_binary_task(test_images, test_labels, d.digit_neg, d.digit_pos, d.normalization)
    holdout, pool = split_holdout(test_task, d.holdout_fraction, derive_seed(cfg.run.seed, "holdout"))
    streams = _draw_streams(pool, schedule, cfg)

    assignment = replace(assignment, holdout=holdout, streams=streams)
    return ExperimentData(
        training=assignment.training,
        holdouts=(holdout,) * cfg.graph.num_agents,
        streams=streams,
        labels=schedule,
        assignment=assignment,
    )


def prepare_gaussian_data(cfg: ExperimentConfig, schedule: np.ndarray) -> ExperimentData:
    """One Gaussian source per agent, mean along the diagonal with the agent's norm"""
    s = cfg.synth
    training, holdouts, streams = [], [], []
    for k, norm in enumerate(cfg.mean_norms()):
        spec = GaussianSourceSpec.along_diagonal(s.dimension, norm, s.sigma, derive_seed(cfg.run.seed, "synthetic", k, 0))
        training.append(gaussian_training_set(spec, s.train_per_class))
        holdout_spec = replace(spec, seed=derive_seed(cfg.run.seed, "synthetic", k, 1))
        holdouts.append(gaussian_training_set(holdout_spec, s.holdout_per_class))
        stream_spec = replace(spec, seed=derive_seed(cfg.run.seed, "synthetic", k, 2))
        streams.append(gaussian_stream(stream_spec, schedule).features)

    assignment = _corrupt(AgentDataAssignment(training=tuple(training)), cfg)
    assignment = replace(assignment, streams=tuple(streams))
    return ExperimentData(
        training=assignment.training,
        holdouts=tuple(holdouts),
        streams=tuple(streams),
        labels=schedule,
        assignment=assignment,
    )


def prepare_data(cfg: ExperimentConfig) -> ExperimentData:
    schedule = prediction_schedule(cfg.predict.horizon, cfg.predict.switch_at)
    if cfg.data.source == "gaussian":
        return prepare_gaussian_data(cfg, schedule)
    return prepare_mnist_data(cfg, schedule)


def train_agents(cfg: ExperimentConfig, training: Tuple[LabeledDataset, ...], workers: int = 1) -> List[TrainResult]:
    """Independent initialization and shuffling streams per agent, so results do not depend on workers"""
    input_dim = training[0].features.shape[1]
    layer_sizes = (input_dim, *cfg.model.hidden_sizes, 2)
    init_streams = agent_rngs(cfg.run.seed, "init", len(training))

    def fit(k: int) -> TrainResult:
        net = init_net(layer_sizes, cfg.model.activation, init_streams[k])
        train_cfg = TrainConfig(
            batch_size=cfg.train.batch_size,
            epochs=cfg.train.epochs,
            learning_rate=cfg.train.learning_rate,
            seed=derive_seed(cfg.run.seed, "shuffle", k),
            shuffle=cfg.train.shuffle,
        )
        result = train(net, training[k], train_cfg)
        logger.info(f"Agent {k}: final training risk {result.risk_trace[-1]:.6f}")
        return result

    return map_agents(fit, range(len(training)), workers)


def input_inf_bound(cfg: ExperimentConfig, data: ExperimentData) -> float:
    """Configured feature bound, raised to the observed one when the data exceed it"""
    observed = max(float(np.abs(t.features).max()) for t in data.training)
    return max(cfg.bounds.input_inf_bound, observed)


def run_experiment(cfg: ExperimentConfig, output_dir: Path, workers: int = 1) -> RunArtifacts:
    """
    Run every stage and write the artifacts. A failing stage leaves the
    snapshot, whatever was already written and a FAILED marker, then raises
    StageError.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    (output_dir / artifacts.FAILED_MARKER).unlink(missing_ok=True)

    digest = config_hash(cfg)
    seed = cfg.run.seed
    stamp = {"config_hash": digest, "seed": seed}
    snapshot, record = artifacts.write_snapshot(cfg, output_dir)
    files = {"snapshot": snapshot, "seed_record": record}
    logger.info(f"Run {digest[:12]} with seed {seed} into {output_dir}")

    with _stage("graph", output_dir):
        combination = build_combination(cfg)
        files["combination_matrix"] = export_matrix_csv(
            combination, output_dir / "combination_matrix.csv", stamp
        )
        logger.info(f"Perron vector: {np.array2string(combination.perron, precision=4)}")

    with _stage("data", output_dir):
        data = prepare_data(cfg)
        files["assignment"] = export_assignment_csv(data.assignment, output_dir / "assignment.csv", stamp)

    with _stage("training", output_dir):
        results = train_agents(cfg, data.training, workers)
        nets = [r.net for r in results]
        train_features = [t.features for t in data.training]
        ensemble = build_ensemble(nets, train_features, combination)
        files["risk_curves"] = artifacts.emit_risk_curves(
            [r.risk_trace for r in results], combination.perron, output_dir / "risk_curves.csv", stamp
        )

    with _stage("means", output_dir):
        means = class_means(ensemble, data.holdouts, combination.perron)
        verdict = consistency_condition(means)
        logger.info(
            f"Network means: mu+ {means.network_plus:.6f}, mu- {means.network_minus:.6f}, "
            f"training {means.network_training:.6f}, consistent={verdict.consistent}"
        )

    report = None
    with _stage("bounds", output_dir):
        c = input_inf_bound(cfg, data)
        sample_counts = [len(t) for t in data.training]
        training_risks = [float(r.risk_trace[-1]) for r in results]
        logit_bounds = [
            logit_bound(net, [t.features, h.features]) for net, t, h in zip(nets, data.training, data.holdouts)
        ]
        rademacher_seed = derive_seed(seed, "rademacher")
        try:
            report = evaluate_bounds(
                nets,
                sample_counts,
                training_risks,
                logit_bounds,
                combination.perron,
                input_inf_bound=c,
                d=cfg.bounds.margin,
                train_features=train_features,
                rademacher_draws=cfg.bounds.rademacher_draws,
                seed=rademacher_seed,
                means=means,
            )
            files.update(artifacts.write_bound_report(report, output_dir, stamp))
            logger.info(f"Consistency probability bound {report.result.bound:.6f}")
        except BoundsDomainError as e:
            logger.warning(f"Consistency bound not evaluated: {e}")
            files["bound_report"] = artifacts.write_bound_error(str(e), output_dir, stamp)

        margin = cfg.bounds.margin if cfg.bounds.margin is not None else math.nan
        files["checkpoint"] = save_checkpoint(
            output_dir / CHECKPOINT_NAME,
            nets,
            training_means=ensemble.training_means,
            combination=combination.weights,
            perron=combination.perron,
            sample_counts=np.array(sample_counts),
            training_risks=np.array(training_risks),
            logit_bounds=np.array(logit_bounds),
            input_inf_bound=np.array(c),
            margin=np.array(margin),
            rademacher_draws=np.array(cfg.bounds.rademacher_draws),
            rademacher_seed=np.array(rademacher_seed),
            config_hash=np.array(digest),
            seed=np.array(seed),
            **{f"features{k}": x for k, x in enumerate(train_features)},
        )

    with _stage("prediction", output_dir):
        lambda0 = np.array(cfg.initial_lambdas(), dtype=float)
        trajectory = run_prediction(
            ensemble, combination, cfg.diffusion.step_size, data.streams, lambda0=lambda0, workers=workers
        )
        if trajectory.horizon:
            oracle = run_belief_oracle(trajectory.statistics, combination, cfg.diffusion.step_size, lambda0)
            logger.info(f"Belief-form cross-check: max |gap| {np.abs(oracle - trajectory.lambdas).max():.3e}")
        files["lambda_trajectory"] = artifacts.write_csv(
            artifacts.trajectory_frame(trajectory, data.labels), output_dir / "lambda_trajectory.csv", stamp
        )
        accuracy = artifacts.accuracy_frame(
            trajectory, data.labels, cfg.predict.accuracy_windows, cfg.graph.num_agents
        )
        files["decision_accuracy"] = artifacts.write_csv(accuracy, output_dir / "decision_accuracy.csv", stamp)
        if trajectory.horizon:
            logger.info(
                f"Mean windowed accuracy: diffusion {accuracy['sml_accuracy'].mean():.4f}, "
                f"stand-alone {accuracy['local_accuracy'].mean():.4f}"
            )

    return RunArtifacts(
        output_dir=output_dir,
        config_hash=digest,
        seed=seed,
        files=files,
        verdict=verdict,
        bound_report=report,
        accuracy=accuracy,
    )


def replay(snapshot_path: Path, output_dir: Path, workers: int = 1) -> RunArtifacts:
    """Re-run from a snapshot after checking it against its seed record"""
    snapshot_path = Path(snapshot_path)
    if not snapshot_path.is_file():
        raise ConfigError(f"Snapshot not found: {snapshot_path}")
    text = snapshot_path.read_text(encoding="utf-8")
    try:
        record = artifacts.read_seed_record(snapshot_path)
    except (OSError, ValueError) as e:
        raise ConfigError(f"Seed record unreadable next to {snapshot_path}: {e}") from e

    actual = hashlib.sha256(text.encode("utf-8")).hexdigest()
    if actual != record.get("config_hash"):
        logger.error(f"Snapshot {snapshot_path} was modified after the run")
        raise HashMismatchError(str(record.get("config_hash")), actual)
    cfg = parse_experiment_config(text)
    if cfg.run.seed != record.get("master_seed"):
        raise ConfigError(f"Seed record says {record.get('master_seed')}, snapshot says {cfg.run.seed}")
    return run_experiment(cfg, output_dir, workers)


def bounds_from_checkpoint(
    checkpoint_path: Path,
    output_dir: Path,
    margin: Optional[float] = None,
    rademacher_draws: Optional[int] = None,
) -> BoundReport:
    """Recompute the bound report from saved nets without retraining"""
    checkpoint_path = Path(checkpoint_path)
    if not checkpoint_path.is_file():
        raise ConfigError(f"Checkpoint not found: {checkpoint_path}")
    nets, stored = load_checkpoint(checkpoint_path)
    if margin is None and not math.isnan(float(stored["margin"])):
        margin = float(stored["margin"])
    draws = int(stored["rademacher_draws"]) if rademacher_draws is None else rademacher_draws
    report = evaluate_bounds(
        nets,
        stored["sample_counts"].tolist(),
        stored["training_risks"].tolist(),
        stored["logit_bounds"].tolist(),
        stored["perron"],
        input_inf_bound=float(stored["input_inf_bound"]),
        d=margin,
        train_features=[stored[f"features{k}"] for k in range(len(nets))],
        rademacher_draws=draws,
        seed=int(stored["rademacher_seed"]),
    )
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    stamp = {"config_hash": str(stored["config_hash"]), "seed": int(stored["seed"])}
    artifacts.write_bound_report(report, output_dir, stamp)
    return report
