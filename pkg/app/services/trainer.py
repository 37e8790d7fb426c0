"""Training and evaluation of encoder classifiers on the synthetic tasks.

Randomness comes from one ``np.random.default_rng(config.seed)``: model
parameters are drawn first in registration order, then one permutation of
the training set per epoch. Task data has its own seed (``task.seed``).
"""
import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from app.datasets import Batch, Example, batch_order, batches, generate
from app.errors import ConfigurationError, NumericError
from app.models.experiment import ExperimentConfig
from app.models.metrics import MetricsRecord
from app.nn import EncoderModel
from app.numeric import Tape, cross_entropy
from app.services.checkpoint import load_checkpoint, save_checkpoint
from app.services.optimizer import Adam

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
TIMING_FILE = "timing.jsonl"
CHECKPOINT_FILE = "best.ckpt.json"
NONFINITE_DUMP = "nonfinite_batch.json"


@dataclass
class TrainResult:
    final: MetricsRecord
    checkpoint: Path
    history: List[MetricsRecord] = field(default_factory=list)

    @property
    def output_dir(self) -> Path:
        return self.checkpoint.parent


def build_model(config: ExperimentConfig, rng: np.random.Generator) -> EncoderModel:
    task = config.task
    return EncoderModel(config.model, task.vocab_size, task.max_len, task.num_classes, rng)


def _append_jsonl(path: Path, record: dict) -> None:
    with open(path, "a", encoding="utf-8", newline="\n") as handle:
        handle.write(json.dumps(record, sort_keys=True) + "\n")


def _dump_batch(path: Path, batch: Batch, epoch: int, step: int, reason: str) -> None:
    document = {
        "epoch": epoch,
        "step": step,
        "reason": reason,
        "tokens": batch.tokens.tolist(),
        "mask": batch.mask.astype(int).tolist(),
        "labels": batch.labels.tolist(),
    }
    path.write_text(json.dumps(document, sort_keys=True), encoding="utf-8")


def evaluate_examples(model: EncoderModel, examples: Sequence[Example], batch_size: int) -> Tuple[float, float]:
    """Mean loss and accuracy over ``examples`` in their stored order."""
    if not examples:
        raise ConfigurationError("cannot evaluate an empty split")
    total_loss, correct = 0.0, 0
    for batch in batches(examples, batch_order(len(examples), batch_size)):
        logits = model(batch.tokens, batch.mask)
        total_loss += cross_entropy(logits, batch.labels).item() * len(batch)
        correct += int(np.sum(np.argmax(logits.data, axis=-1) == batch.labels))
    return total_loss / len(examples), correct / len(examples)


def _train_epoch(
    model: EncoderModel,
    optimizer: Adam,
    examples: Sequence[Example],
    config: ExperimentConfig,
    rng: np.random.Generator,
    epoch: int,
    dump_path: Path,
) -> Tuple[float, float, int]:
    total_loss, correct, steps = 0.0, 0, 0
    for batch in batches(examples, batch_order(len(examples), config.batch_size, rng), config.prefetch):
        try:
            optimizer.zero_grad()
            with Tape() as tape:
                logits = model(batch.tokens, batch.mask)
                loss = cross_entropy(logits, batch.labels)
            tape.backward(loss)
            optimizer.step()
        except NumericError as exc:
            _dump_batch(dump_path, batch, epoch, steps, exc.detail)
            raise NumericError(f"epoch {epoch} step {steps}: {exc.detail}; offending batch written to {dump_path}") from exc
        total_loss += loss.item() * len(batch)
        correct += int(np.sum(np.argmax(logits.data, axis=-1) == batch.labels))
        steps += 1
    return total_loss / len(examples), correct / len(examples), steps


def train(config: ExperimentConfig) -> TrainResult:
    """Train, log per-epoch metrics, keep the best-validation checkpoint and score it on the test split."""
    output_dir = Path(config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    metrics_path, timing_path = output_dir / METRICS_FILE, output_dir / TIMING_FILE
    checkpoint_path = output_dir / CHECKPOINT_FILE
    for path in (metrics_path, timing_path):
        path.write_text("", encoding="utf-8")

    splits = generate(config.task)
    rng = np.random.default_rng(config.seed)
    model = build_model(config, rng)
    parameter_count = model.parameter_count()
    optimizer = Adam(model.named_parameters(), config.optimizer)
    logger.info(
        f"Training {config.name!r}: task {config.task.kind}, aggregators {config.aggregator_label}, "
        f"{parameter_count} parameters, {config.epochs} epochs"
    )

    history: List[MetricsRecord] = []
    rates: List[float] = []
    best_accuracy, best_epoch = -1.0, 0
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        train_loss, train_accuracy, steps = _train_epoch(
            model, optimizer, splits.train, config, rng, epoch, output_dir / NONFINITE_DUMP
        )
        elapsed = time.perf_counter() - started
        rate = steps / elapsed if elapsed > 0 else 0.0
        rates.append(rate)
        valid_loss, valid_accuracy = evaluate_examples(model, splits.valid, config.batch_size)

        for split, loss, accuracy in (("train", train_loss, train_accuracy), ("valid", valid_loss, valid_accuracy)):
            record = MetricsRecord(
                epoch=epoch, split=split, loss=loss, accuracy=accuracy,
                wall_clock_seconds=elapsed, parameter_count=parameter_count,
                steps_per_second=rate if split == "train" else None,
            )
            history.append(record)
            _append_jsonl(metrics_path, record.deterministic_fields())
            _append_jsonl(timing_path, record.timing_fields())

        if valid_accuracy > best_accuracy:
            best_accuracy, best_epoch = valid_accuracy, epoch
            save_checkpoint(checkpoint_path, config, model.state_arrays(), extra={"epoch": epoch, "valid_accuracy": valid_accuracy})
        logger.info(
            f"Epoch {epoch}/{config.epochs}: train loss {train_loss:.4f} acc {train_accuracy:.4f}, "
            f"valid loss {valid_loss:.4f} acc {valid_accuracy:.4f}, {rate:.1f} steps/s"
        )

    _, arrays, _ = load_checkpoint(checkpoint_path)
    model.load_state(arrays)
    test_loss, test_accuracy = evaluate_examples(model, splits.test, config.batch_size)
    final = MetricsRecord(
        epoch=best_epoch, split="test", loss=test_loss, accuracy=test_accuracy,
        wall_clock_seconds=0.0, parameter_count=parameter_count,
        steps_per_second=statistics.median(rates),
    )
    history.append(final)
    _append_jsonl(metrics_path, final.deterministic_fields())
    _append_jsonl(timing_path, final.timing_fields())
    logger.info(f"Finished {config.name!r}: best epoch {best_epoch}, test accuracy {test_accuracy:.4f}")
    return TrainResult(final=final, checkpoint=checkpoint_path, history=history)


def evaluate(checkpoint: Union[str, Path], split: str = "test", batch_size: Optional[int] = None) -> MetricsRecord:
    """Rebuild the model and data from the checkpoint's own config and score one split."""
    config, arrays, extra = load_checkpoint(checkpoint)
    model = build_model(config, np.random.default_rng(config.seed))
    model.load_state(arrays)
    examples = generate(config.task).split(split)
    loss, accuracy = evaluate_examples(model, examples, batch_size or config.batch_size)
    logger.info(f"Evaluated {checkpoint} on {split}: loss {loss:.4f}, accuracy {accuracy:.4f}")
    return MetricsRecord(
        epoch=int(extra.get("epoch", 0)), split=split, loss=loss, accuracy=accuracy,
        parameter_count=model.parameter_count(),
    )


def evaluate_untrained(config: ExperimentConfig, split: str = "test") -> MetricsRecord:
    """Score a freshly initialized model; the chance-level reference for a task."""
    model = build_model(config, np.random.default_rng(config.seed))
    examples = generate(config.task).split(split)
    loss, accuracy = evaluate_examples(model, examples, config.batch_size)
    return MetricsRecord(epoch=0, split=split, loss=loss, accuracy=accuracy, parameter_count=model.parameter_count())
