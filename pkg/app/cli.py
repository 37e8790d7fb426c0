"""Command-line entry point: ``python -m app <command>``."""
import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import uvicorn

import config as settings
from app.database import sqlite_handler
from app.datasets import generate, write_dataset
from app.errors import NumericError, RoutedAttentionError
from app.models.experiment import ExperimentConfig, load_experiment_config, load_task_spec
from app.services.comparison import compare
from app.services.diagnostics import GRADCHECK_TOLERANCE, aggregation_gradcheck
from app.services.trainer import TrainResult, evaluate, train

logger = logging.getLogger(__name__)


def _emit(document) -> None:
    print(json.dumps(document, sort_keys=True))


async def _record(db_path: str, runs: Sequence[Tuple[ExperimentConfig, TrainResult]]) -> List[int]:
    await sqlite_handler.create_tables(db_path)
    ids = []
    for experiment, result in runs:
        run_id = await sqlite_handler.save_run(
            db_path, experiment.name, experiment.task.kind, experiment.aggregator_label,
            result.final, str(result.checkpoint),
        )
        await sqlite_handler.save_run_metrics(db_path, run_id, result.history)
        ids.append(run_id)
    return ids


def record_runs(db_path: Optional[str], runs: Sequence[Tuple[ExperimentConfig, TrainResult]]) -> None:
    """Store finished runs in the registry; a registry failure never fails the run."""
    if not db_path:
        return
    try:
        ids = asyncio.run(_record(db_path, runs))
        logger.info(f"Recorded runs {ids} in {db_path}")
    except Exception as e:
        logger.warning(f"Could not record runs in {db_path}: {e}")


def cmd_train(args) -> int:
    experiment = load_experiment_config(args.config)
    result = train(experiment)
    record_runs(args.registry, [(experiment, result)])
    _emit({"checkpoint": str(result.checkpoint), "final": result.final.model_dump()})
    return 0


def cmd_evaluate(args) -> int:
    record = evaluate(args.checkpoint, args.split)
    _emit(record.model_dump())
    return 0


def cmd_compare(args) -> int:
    experiments = [load_experiment_config(path) for path in args.configs]
    finished: List[Tuple[ExperimentConfig, TrainResult]] = []

    def run(experiment: ExperimentConfig) -> TrainResult:
        result = train(experiment)
        finished.append((experiment, result))
        return result

    output_dir = args.output_dir or str(Path(settings.RUNS_DIR) / "comparison")
    rows = compare(experiments, output_dir, run=run)
    record_runs(args.registry, finished)
    _emit({"comparison": str(Path(output_dir) / "comparison.csv"), "rows": [row.model_dump() for row in rows]})
    return 0


def cmd_gradcheck(args) -> int:
    errors = aggregation_gradcheck(args.kind, args.seed)
    worst = max(errors.values())
    _emit({"kind": args.kind, "seed": args.seed, "max_relative_error": worst, "errors": errors})
    if worst >= args.tolerance:
        raise NumericError(f"{args.kind} gradient check failed: max relative error {worst:.3e} >= {args.tolerance:.0e}")
    return 0


def cmd_gen_data(args) -> int:
    spec = load_task_spec(args.spec)
    output_dir = args.output_dir or str(Path(settings.RUNS_DIR) / "data" / f"{spec.kind}-{spec.seed}")
    paths = write_dataset(generate(spec), output_dir)
    _emit({name: str(path) for name, path in paths.items()})
    return 0


def cmd_serve(args) -> int:
    uvicorn.run("app.main:app", host=args.host, port=args.port, log_level=settings.LOG_LEVEL.lower())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="routed-attention", description="Routed multi-head attention experiments.")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("train", help="train one experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--registry", default=settings.RUNS_DB_PATH, help="sqlite run registry (default: RUNS_DB_PATH)")
    p.set_defaults(handler=cmd_train)

    p = commands.add_parser("evaluate", help="score a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.set_defaults(handler=cmd_evaluate)

    p = commands.add_parser("compare", help="train configs that differ in aggregation and tabulate them")
    p.add_argument("--configs", required=True, nargs="+")
    p.add_argument("--output-dir", default=None)
    p.add_argument("--registry", default=settings.RUNS_DB_PATH)
    p.set_defaults(handler=cmd_compare)

    p = commands.add_parser("gradcheck", help="finite-difference check of attention plus aggregation")
    p.add_argument("--kind", required=True, choices=["linear", "simple", "em"])
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)
    p.set_defaults(handler=cmd_gradcheck)

    p = commands.add_parser("gen-data", help="write the train/valid/test splits of a task spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--output-dir", default=None)
    p.set_defaults(handler=cmd_gen_data)

    p = commands.add_parser("serve", help="serve the results API")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(handler=cmd_serve)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=settings.LOG_LEVEL, format=settings.LOG_FORMAT)
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except RoutedAttentionError as e:
        logger.error(f"{args.command} failed: {e.detail}")
        print(json.dumps({"error": e.category, "message": e.detail}), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.error(f"{args.command} aborted: {e}", exc_info=True)
        print(json.dumps({"error": "internal", "message": str(e)}), file=sys.stderr)
        return 1
