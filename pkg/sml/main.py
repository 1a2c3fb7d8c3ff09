"""
Command-line entry point: run, replay, bounds and inspect
"""
from pathlib import Path
from typing import List, Optional
import argparse
import json
import logging
import sys

import pandas as pd

from sml import __version__
from sml.config import dump_experiment_config, get_settings, load_experiment_config, with_seed
from sml.exceptions import (
    ConfigError,
    ConvergenceError,
    DataError,
    DivergenceError,
    InvalidGraphError,
    SignalError,
    StageError,
)
from sml.experiment import bounds_from_checkpoint, replay, run_experiment

logger = logging.getLogger("sml")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def setup_logging(level: str, output_dir: Optional[Path] = None) -> None:
    """Console handler always; run.log sidecar in the output directory when there is one"""
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if output_dir is not None:
        output_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(output_dir / "run.log", mode="w", encoding="utf-8"))
    logging.basicConfig(level=level.upper(), format=LOG_FORMAT, handlers=handlers, force=True)


def exit_code(error: BaseException) -> int:
    if isinstance(error, StageError):
        error = error.cause
    if isinstance(error, (ConfigError, InvalidGraphError)):
        return EXIT_CONFIG
    if isinstance(error, DataError):
        return EXIT_DATA
    if isinstance(error, (DivergenceError, ConvergenceError, SignalError)):
        return EXIT_NUMERIC
    return EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    settings = get_settings()
    parser = argparse.ArgumentParser(prog="sml", description="Social machine learning experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=settings.LOG_LEVEL, help="Logging level")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Train, evaluate bounds and run the prediction phase")
    run.add_argument("--config", default=settings.CONFIG_PATH, help="Experiment file (KEY=VALUE)")
    run.add_argument("--seed", type=int, default=None, help="Override the master seed")
    run.add_argument("--out", default=settings.OUTPUT_DIR, help="Output directory")
    run.add_argument("--workers", type=int, default=settings.WORKERS, help="Threads for per-agent work")

    rep = sub.add_parser("replay", help="Re-run from a config snapshot after checking its hash")
    rep.add_argument("snapshot", help="config.snapshot.env of a previous run")
    rep.add_argument("--out", default=settings.OUTPUT_DIR, help="Output directory")
    rep.add_argument("--workers", type=int, default=settings.WORKERS, help="Threads for per-agent work")

    bnd = sub.add_parser("bounds", help="Recompute the bound report from a checkpoint")
    bnd.add_argument("checkpoint", help="checkpoint.npz of a previous run")
    bnd.add_argument("--out", default=None, help="Output directory (defaults to the checkpoint's)")
    bnd.add_argument("--margin", type=float, default=None, help="Margin d; midpoint of its range if omitted")
    bnd.add_argument("--draws", type=int, default=None, help="Rademacher draws for the first-layer estimate")

    ins = sub.add_parser("inspect", help="Print the resolved config, or summarize a run directory")
    ins.add_argument("run_dir", nargs="?", default=None, help="Output directory of a run")
    ins.add_argument("--config", default=settings.CONFIG_PATH, help="Experiment file (KEY=VALUE)")
    ins.add_argument("--seed", type=int, default=None, help="Override the master seed")
    return parser


def inspect_run(run_dir: Path) -> str:
    """Human-readable summary of a finished (or failed) run"""
    lines = [f"Run directory: {run_dir}"]
    failed = run_dir / "FAILED"
    if failed.is_file():
        lines.append("FAILED: " + failed.read_text(encoding="utf-8").strip().replace("\n", ", "))
    record = run_dir / "seed_record.json"
    if record.is_file():
        seed_record = json.loads(record.read_text(encoding="utf-8"))
        lines.append(f"Config hash {seed_record['config_hash']}, seed {seed_record['master_seed']}")
    report_path = run_dir / "bound_report.json"
    if report_path.is_file():
        report = json.loads(report_path.read_text(encoding="utf-8"))
        if "error" in report:
            lines.append(f"Bounds: not evaluated ({report['error']})")
        else:
            lines.append(
                f"Bounds: R={report['inputs']['network_risk']:.6f} d={report['inputs']['d']:.6f} "
                f"bound={report['result']['bound']:.6f} clamped={report['result']['bound_clamped']:.6f}"
            )
            if report.get("verdict"):
                lines.append(f"Consistency condition holds: {report['verdict']['consistent']}")
    accuracy_path = run_dir / "decision_accuracy.csv"
    if accuracy_path.is_file():
        frame = pd.read_csv(accuracy_path)
        columns = ["agent", "sml_accuracy", "local_accuracy", "sml_accuracy_all", "local_accuracy_all"]
        lines.append(frame[columns].to_string(index=False))
    return "\n".join(lines)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            out = Path(args.out)
            setup_logging(args.log_level, out)
            cfg = load_experiment_config(args.config)
            if args.seed is not None:
                cfg = with_seed(cfg, args.seed)
            result = run_experiment(cfg, out, workers=args.workers)
            print(f"Artifacts written to {result.output_dir} (config {result.config_hash[:12]})")
        elif args.command == "replay":
            out = Path(args.out)
            setup_logging(args.log_level, out)
            result = replay(Path(args.snapshot), out, workers=args.workers)
            print(f"Replayed into {result.output_dir} (config {result.config_hash[:12]})")
        elif args.command == "bounds":
            checkpoint = Path(args.checkpoint)
            out = Path(args.out) if args.out else checkpoint.parent
            setup_logging(args.log_level)
            report = bounds_from_checkpoint(checkpoint, out, margin=args.margin, rademacher_draws=args.draws)
            print(f"Consistency bound {report.result.bound:.6f} (clamped {report.result.bound_clamped:.6f})")
        elif args.run_dir is not None:
            setup_logging(args.log_level)
            print(inspect_run(Path(args.run_dir)))
        else:
            setup_logging(args.log_level)
            cfg = load_experiment_config(args.config)
            if args.seed is not None:
                cfg = with_seed(cfg, args.seed)
            print(dump_experiment_config(cfg), end="")
    except Exception as e:
        code = exit_code(e)
        logger.error(f"{type(e).__name__}: {e}")
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
