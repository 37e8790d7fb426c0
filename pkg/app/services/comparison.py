"""Side-by-side training of configs that differ only in their aggregation."""
import csv
import logging
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

from rich.console import Console
from rich.table import Table

from app.errors import ConfigurationError
from app.models.experiment import ExperimentConfig
from app.models.metrics import ComparisonRow
from app.services.trainer import TrainResult, train

logger = logging.getLogger(__name__)

COMPARISON_FILE = "comparison.csv"


def check_comparable(configs: Sequence[ExperimentConfig]) -> None:
    if not configs:
        raise ConfigurationError("compare needs at least one config")
    reference = configs[0]
    for config in configs[1:]:
        if config.task != reference.task:
            raise ConfigurationError(
                f"config {config.name!r} uses task {config.task.kind} (seed {config.task.seed}), "
                f"{reference.name!r} uses {reference.task.kind} (seed {reference.task.seed})"
            )
        if config.seed != reference.seed:
            raise ConfigurationError(f"config {config.name!r} has seed {config.seed}, {reference.name!r} has {reference.seed}")
    names = [config.name for config in configs]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"compared configs need distinct names, got {names}")


def comparison_row(config: ExperimentConfig, result: TrainResult) -> ComparisonRow:
    return ComparisonRow(
        name=config.name,
        task=config.task.kind,
        aggregators=config.aggregator_label,
        test_accuracy=result.final.accuracy,
        test_loss=result.final.loss,
        parameter_count=result.final.parameter_count,
        steps_per_second=result.final.steps_per_second or 0.0,
    )


def write_comparison_csv(rows: Sequence[ComparisonRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(ComparisonRow.model_fields), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row.model_dump())
    return path


def render_table(rows: Sequence[ComparisonRow], console: Optional[Console] = None) -> Table:
    table = Table(title="Aggregator comparison")
    for column, justify in (
        ("name", "left"), ("task", "left"), ("aggregators", "left"), ("test accuracy", "right"),
        ("test loss", "right"), ("parameters", "right"), ("steps/s", "right"),
    ):
        table.add_column(column, justify=justify)
    for row in rows:
        table.add_row(
            row.name, row.task, row.aggregators, f"{row.test_accuracy:.4f}",
            f"{row.test_loss:.4f}", str(row.parameter_count), f"{row.steps_per_second:.1f}",
        )
    (console or Console()).print(table)
    return table


def compare(
    configs: Sequence[ExperimentConfig],
    output_dir: Union[str, Path],
    console: Optional[Console] = None,
    run: Callable[[ExperimentConfig], TrainResult] = train,
) -> List[ComparisonRow]:
    """Train every config, then write ``comparison.csv`` and print the aligned table."""
    check_comparable(configs)
    rows = []
    for config in configs:
        logger.info(f"Comparing: running {config.name!r} ({config.aggregator_label})")
        rows.append(comparison_row(config, run(config)))
    path = write_comparison_csv(rows, Path(output_dir) / COMPARISON_FILE)
    render_table(rows, console)
    logger.info(f"Wrote comparison of {len(rows)} runs to {path}")
    return rows
