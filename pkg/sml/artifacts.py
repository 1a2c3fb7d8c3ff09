"""
CSV, JSON and snapshot artifacts written by an experiment run
"""
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Tuple
import json
import logging

import numpy as np
import pandas as pd

from sml.config import config_hash, dump_experiment_config
from sml.core.bounds import BoundReport
from sml.core.engine import PredictionTrajectory, decision_accuracy, local_decisions
from sml.models import ExperimentConfig

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
SNAPSHOT_NAME = "config.snapshot.env"
SEED_RECORD_NAME = "seed_record.json"
FAILED_MARKER = "FAILED"


def write_csv(frame: pd.DataFrame, path: Path, stamp: Optional[Dict[str, object]] = None) -> Path:
    """Header row, 17 significant digits, stamped with config hash and seed"""
    frame = frame.copy()
    for column, value in (stamp or {}).items():
        frame[column] = value
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return Path(path)


def risk_curves_frame(traces: Sequence[np.ndarray], perron: np.ndarray) -> pd.DataFrame:
    """One row per (epoch, agent) with the Perron-weighted network risk of that epoch"""
    if len(traces) == 0:
        raise ValueError("No risk traces to export")
    matrix = np.column_stack([np.asarray(trace, dtype=float) for trace in traces])
    network = matrix @ np.asarray(perron, dtype=float)
    epochs, agents = matrix.shape
    return pd.DataFrame({
        "epoch": np.repeat(np.arange(1, epochs + 1), agents),
        "agent": np.tile(np.arange(agents), epochs),
        "risk": matrix.reshape(-1),
        "network_risk": np.repeat(network, agents),
    })


def emit_risk_curves(
    traces: Sequence[np.ndarray],
    perron: np.ndarray,
    path: Path,
    stamp: Optional[Dict[str, object]] = None,
) -> Path:
    return write_csv(risk_curves_frame(traces, perron), path, stamp)


def trajectory_frame(trajectory: PredictionTrajectory, labels: np.ndarray) -> pd.DataFrame:
    horizon, agents = trajectory.lambdas.shape
    local = local_decisions(trajectory.statistics)
    return pd.DataFrame({
        "time": np.repeat(np.arange(horizon), agents),
        "agent": np.tile(np.arange(agents), horizon),
        "lambda": trajectory.lambdas.reshape(-1),
        "decision": trajectory.decisions.reshape(-1),
        "true_label": np.repeat(np.asarray(labels, dtype=int), agents),
        "statistic": trajectory.statistics.reshape(-1),
        "local_decision": local.reshape(-1),
    })


def accuracy_frame(
    trajectory: PredictionTrajectory,
    labels: np.ndarray,
    windows: Iterable[Tuple[int, int]],
    num_agents: int,
) -> pd.DataFrame:
    """Diffusion vs. stand-alone accuracy per agent, over the windows and over the whole run"""
    windows = list(windows)
    local = local_decisions(trajectory.statistics)
    frame = pd.DataFrame({"agent": np.arange(num_agents)})
    if trajectory.horizon == 0:
        for column in ("sml_accuracy", "local_accuracy", "sml_accuracy_all", "local_accuracy_all"):
            frame[column] = np.nan
        return frame
    frame["sml_accuracy"] = decision_accuracy(trajectory.decisions, labels, windows)
    frame["local_accuracy"] = decision_accuracy(local, labels, windows)
    frame["sml_accuracy_all"] = decision_accuracy(trajectory.decisions, labels)
    frame["local_accuracy_all"] = decision_accuracy(local, labels)
    return frame


def bound_terms_frame(report: BoundReport) -> pd.DataFrame:
    result = report.result
    frame = pd.DataFrame({
        "agent": np.arange(len(report.rademacher_bounds)),
        "sample_count": report.inputs.sample_counts,
        "rademacher_bound": report.rademacher_bounds,
        "rho": report.inputs.complexities,
        "first_term": result.first_terms,
        "first_vacuous": result.first_vacuous,
        "second_term": result.second_terms,
        "second_vacuous": result.second_vacuous,
    })
    frame["bound"] = result.bound
    frame["bound_clamped"] = result.bound_clamped
    return frame


def write_bound_report(
    report: BoundReport,
    output_dir: Path,
    stamp: Optional[Dict[str, object]] = None,
) -> Dict[str, Path]:
    output_dir = Path(output_dir)
    payload = {**(stamp or {}), **report.model_dump(mode="json")}
    json_path = output_dir / "bound_report.json"
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    csv_path = write_csv(bound_terms_frame(report), output_dir / "bound_terms.csv", stamp)
    return {"bound_report": json_path, "bound_terms": csv_path}


def write_bound_error(message: str, output_dir: Path, stamp: Optional[Dict[str, object]] = None) -> Path:
    path = Path(output_dir) / "bound_report.json"
    path.write_text(json.dumps({**(stamp or {}), "error": message}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_snapshot(cfg: ExperimentConfig, output_dir: Path) -> Tuple[Path, Path]:
    """Resolved config (defaults included) and the seed record beside it"""
    output_dir = Path(output_dir)
    snapshot = output_dir / SNAPSHOT_NAME
    snapshot.write_text(dump_experiment_config(cfg), encoding="utf-8")
    record = output_dir / SEED_RECORD_NAME
    record.write_text(
        json.dumps({"config_hash": config_hash(cfg), "master_seed": cfg.run.seed}, indent=2) + "\n",
        encoding="utf-8",
    )
    return snapshot, record


def read_seed_record(snapshot_path: Path) -> Dict[str, object]:
    record = Path(snapshot_path).with_name(SEED_RECORD_NAME)
    return json.loads(record.read_text(encoding="utf-8"))


def mark_failed(output_dir: Path, stage: str, error: BaseException) -> Path:
    marker = Path(output_dir) / FAILED_MARKER
    marker.write_text(f"stage={stage}\nerror={type(error).__name__}: {error}\n", encoding="utf-8")
    logger.error(f"Run failed in stage '{stage}': {error}")
    return marker
