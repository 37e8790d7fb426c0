import pytest

from app.models.experiment import TaskSpec, experiment_from_flat

TINY_EXPERIMENT = {
    "name": "tiny",
    "task": "bigram_shift",
    "vocab_size": 16,
    "min_len": 4,
    "max_len": 8,
    "train_size": 64,
    "valid_size": 32,
    "test_size": 32,
    "task_seed": 11,
    "layers": 1,
    "d_model": 8,
    "heads": 2,
    "ffn_width": 16,
    "aggregator": "linear",
    "output_capsules": 2,
    "iterations": 2,
    "batch_size": 16,
    "epochs": 2,
    "seed": 3,
}


@pytest.fixture
def tiny_config(tmp_path):
    """Factory for small experiment configs writing under ``tmp_path``; keyword overrides use the flat keys."""

    def make(**overrides):
        flat = {**TINY_EXPERIMENT, "output_dir": str(tmp_path / overrides.get("name", "tiny")), **overrides}
        return experiment_from_flat(flat)

    return make


@pytest.fixture
def task_spec():
    def make(kind, **overrides):
        fields = {"kind": kind, "vocab_size": 16, "min_len": 4, "max_len": 8,
                  "train_size": 200, "valid_size": 50, "test_size": 50, "seed": 5}
        fields.update(overrides)
        return TaskSpec(**fields)

    return make
