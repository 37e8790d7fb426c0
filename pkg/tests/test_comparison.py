import csv
import io
from pathlib import Path

import pytest
from rich.console import Console

from app.errors import ConfigurationError
from app.models.metrics import ComparisonRow, MetricsRecord
from app.nn import aggregation_parameter_delta
from app.services.comparison import COMPARISON_FILE, check_comparable, compare, render_table
from app.services.trainer import TrainResult


def fake_run(accuracies):
    def run(config):
        final = MetricsRecord(
            epoch=3, split="test", loss=0.25, accuracy=accuracies[config.name],
            parameter_count=1000, steps_per_second=12.5,
        )
        return TrainResult(final=final, checkpoint=Path(config.output_dir) / "best.ckpt.json")

    return run


def quiet_console():
    return Console(file=io.StringIO(), width=160)


def test_compare_writes_csv_and_table(tmp_path, tiny_config):
    configs = [tiny_config(name="lin"), tiny_config(name="em", aggregator="em")]
    console = quiet_console()
    rows = compare(configs, tmp_path / "cmp", console=console, run=fake_run({"lin": 0.75, "em": 0.5}))
    assert [row.aggregators for row in rows] == ["linear", "em"]

    with open(tmp_path / "cmp" / COMPARISON_FILE, encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        assert reader.fieldnames == list(ComparisonRow.model_fields)
        written = list(reader)
    assert [r["name"] for r in written] == ["lin", "em"]
    assert float(written[0]["test_accuracy"]) == 0.75
    assert written[1]["task"] == "bigram_shift"

    text = console.file.getvalue()
    assert "Aggregator comparison" in text
    assert "0.7500" in text


def test_configs_must_share_task_and_seed(tiny_config):
    with pytest.raises(ConfigurationError):
        check_comparable([tiny_config(name="a"), tiny_config(name="b", task_seed=12)])
    with pytest.raises(ConfigurationError):
        check_comparable([tiny_config(name="a"), tiny_config(name="b", seed=4)])
    with pytest.raises(ConfigurationError):
        check_comparable([tiny_config(name="a"), tiny_config(name="a", aggregator="em")])
    with pytest.raises(ConfigurationError):
        check_comparable([])


def test_mismatch_is_rejected_before_training(tmp_path, tiny_config):
    calls = []

    def run(config):
        calls.append(config.name)
        raise AssertionError("should not train")

    with pytest.raises(ConfigurationError):
        compare([tiny_config(name="a"), tiny_config(name="b", task="token_count_parity")], tmp_path, run=run)
    assert calls == []


def test_render_table_rows():
    row = ComparisonRow(name="x", task="bigram_shift", aggregators="em,linear", test_accuracy=0.9,
                        test_loss=0.3, parameter_count=42, steps_per_second=7.0)
    table = render_table([row, row], quiet_console())
    assert table.row_count == 2
    assert len(table.columns) == 7


@pytest.mark.slow
def test_em_is_slower_than_linear(tmp_path, tiny_config):
    configs = [tiny_config(name="lin"), tiny_config(name="em", aggregator="em", iterations=3)]
    rows = compare(configs, tmp_path, console=quiet_console())
    linear, em = rows
    assert em.steps_per_second < linear.steps_per_second


def test_real_runs_share_task_and_differ_by_the_routing_delta(tmp_path, tiny_config):
    configs = [tiny_config(name=kind, aggregator=kind, epochs=1) for kind in ("linear", "simple", "em")]
    rows = compare(configs, tmp_path, console=quiet_console())
    assert len({row.task for row in rows}) == 1
    linear, simple, em = (row.parameter_count for row in rows)
    assert simple - linear == aggregation_parameter_delta(8, 2, 2, "simple")
    assert em - linear == aggregation_parameter_delta(8, 2, 2, "em")
