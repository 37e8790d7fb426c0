import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Set, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.errors import ConfigurationError

logger = logging.getLogger(__name__)


class Aggregator(str, Enum):
    LINEAR = "linear"
    SIMPLE = "simple"
    EM = "em"

    @classmethod
    def _missing_(cls, value):
        aliases = {"simple_routing": cls.SIMPLE, "em_routing": cls.EM, "concat_linear": cls.LINEAR}
        if isinstance(value, str):
            return aliases.get(value.lower())
        return None

    @property
    def routed(self) -> bool:
        return self is not Aggregator.LINEAR


def parse_aggregator(value: Union[str, Aggregator]) -> Aggregator:
    try:
        return Aggregator(value)
    except ValueError:
        raise ConfigurationError(f"unknown aggregator {value!r}; expected one of linear, simple, em") from None


class RoutingConfig(BaseModel):
    """Shape and numeric safeguards of one routed aggregation step."""

    model_config = ConfigDict(extra="forbid")

    kind: Aggregator = Aggregator.EM
    input_capsules: int = Field(gt=0)
    output_capsules: int = Field(gt=0)
    iterations: int = Field(3, ge=1)
    d_model: int = Field(gt=0)
    epsilon_var: float = Field(1e-6, gt=0)
    lambda_schedule: List[float] = Field(default_factory=list)
    em_density: Literal["product", "sum"] = "product"
    granularity: Literal["position"] = "position"

    @model_validator(mode="before")
    @classmethod
    def _default_schedule(cls, data: Any) -> Any:
        if isinstance(data, dict) and not data.get("lambda_schedule"):
            iterations = int(data.get("iterations", 3))
            data = {**data, "lambda_schedule": [float(t) for t in range(1, iterations + 1)]}
        return data

    @model_validator(mode="after")
    def _check_shapes(self) -> "RoutingConfig":
        if not self.kind.routed:
            raise ValueError("routing kind must be simple or em")
        if self.d_model % self.input_capsules:
            raise ValueError(f"{self.input_capsules} input capsules do not divide d_model={self.d_model}")
        if self.d_model % self.output_capsules:
            raise ValueError(f"{self.output_capsules} output capsules do not divide d_model={self.d_model}")
        if len(self.lambda_schedule) != self.iterations:
            raise ValueError(f"lambda_schedule has {len(self.lambda_schedule)} values for {self.iterations} iterations")
        if any(value <= 0 for value in self.lambda_schedule):
            raise ValueError("lambda_schedule values must be positive")
        return self

    @property
    def d_in(self) -> int:
        return self.d_model // self.input_capsules

    @property
    def d_out(self) -> int:
        return self.d_model // self.output_capsules


class EncoderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    layers: int = Field(2, ge=1)
    d_model: int = Field(32, gt=0)
    heads: int = Field(4, gt=0)
    ffn_width: int = Field(64, gt=0)
    positional_embeddings: bool = True
    per_layer_aggregator: List[Aggregator]
    routing: Optional[RoutingConfig] = None

    @model_validator(mode="after")
    def _check_layers(self) -> "EncoderConfig":
        if len(self.per_layer_aggregator) != self.layers:
            raise ValueError(f"per_layer_aggregator has {len(self.per_layer_aggregator)} entries for {self.layers} layers")
        if self.d_model % self.heads:
            raise ValueError(f"{self.heads} heads do not divide d_model={self.d_model}")
        if any(kind.routed for kind in self.per_layer_aggregator):
            if self.routing is None:
                raise ValueError("routed layers need a routing section")
            if self.routing.input_capsules != self.heads or self.routing.d_model != self.d_model:
                raise ValueError("routing input capsules and width must equal heads and d_model")
        return self

    def routing_for(self, layer: int) -> Optional[RoutingConfig]:
        kind = self.per_layer_aggregator[layer]
        if not kind.routed:
            return None
        return self.routing.model_copy(update={"kind": kind})


TaskKind = Literal["seq_len_bucket", "word_content", "bigram_shift", "token_count_parity", "coordination_inversion"]


class TaskSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: TaskKind
    vocab_size: int = Field(64, gt=0)
    min_len: int = Field(4, ge=1)
    max_len: int = Field(16, ge=1)
    num_classes: int = Field(2, ge=2)
    train_size: int = Field(10000, ge=1)
    valid_size: int = Field(1000, ge=1)
    test_size: int = Field(1000, ge=1)
    seed: int

    @model_validator(mode="after")
    def _check_lengths(self) -> "TaskSpec":
        if self.max_len < self.min_len:
            raise ValueError(f"max_len={self.max_len} is below min_len={self.min_len}")
        return self


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(1e-3, ge=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    epsilon: float = Field(1e-8, gt=0)
    clip_norm: float = Field(1.0, gt=0)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "experiment"
    task: TaskSpec
    model: EncoderConfig
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    batch_size: int = Field(64, gt=0)
    epochs: int = Field(20, ge=1)
    seed: int
    output_dir: str
    prefetch: int = Field(0, ge=0)

    @field_validator("name")
    @classmethod
    def _check_name(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("name must not be blank")
        return value

    @property
    def aggregator_label(self) -> str:
        return ",".join(kind.value for kind in self.model.per_layer_aggregator)


def parse_layer_subset(value: Union[str, int, List[int], None], layers: int) -> Set[int]:
    """Parse "1-6", "1,2", "all", "none" or a list of 1-based layer numbers into 0-based indices."""
    if value is None or value == "all":
        return set(range(layers))
    if value == "none":
        return set()
    if isinstance(value, int):
        numbers = [value]
    elif isinstance(value, list):
        numbers = [int(v) for v in value]
    else:
        numbers = []
        try:
            for part in str(value).strip("[] ").split(","):
                part = part.strip()
                if not part:
                    continue
                if "-" in part:
                    start, end = (int(p) for p in part.split("-", 1))
                    numbers.extend(range(start, end + 1))
                else:
                    numbers.append(int(part))
        except ValueError:
            raise ConfigurationError(f"cannot parse layer subset {value!r}") from None
    if any(not 1 <= n <= layers for n in numbers):
        raise ConfigurationError(f"layer subset {value!r} falls outside layers 1..{layers}")
    return {n - 1 for n in numbers}


_TASK_KEYS = {
    "task": "kind", "vocab_size": "vocab_size", "min_len": "min_len", "max_len": "max_len",
    "num_classes": "num_classes", "train_size": "train_size", "valid_size": "valid_size",
    "test_size": "test_size", "task_seed": "seed",
}
_MODEL_KEYS = {"layers", "d_model", "heads", "ffn_width", "positional_embeddings"}
_ROUTING_KEYS = {
    "output_capsules": "output_capsules", "iterations": "iterations", "lambda_schedule": "lambda_schedule",
    "epsilon_var": "epsilon_var", "em_density": "em_density", "routing_granularity": "granularity",
}
_OPTIMIZER_KEYS = {
    "learning_rate": "learning_rate", "beta1": "beta1", "beta2": "beta2",
    "adam_epsilon": "epsilon", "clip_norm": "clip_norm",
}
_RUN_KEYS = {"name", "batch_size", "epochs", "seed", "output_dir", "prefetch"}
_LAYOUT_KEYS = {"aggregator", "per_layer_aggregator", "routing_layers"}


def experiment_from_flat(flat: Dict[str, Any]) -> ExperimentConfig:
    """Build the nested config from the flat one-key-per-line document."""
    unknown = set(flat) - set(_TASK_KEYS) - _MODEL_KEYS - set(_ROUTING_KEYS) - set(_OPTIMIZER_KEYS) - _RUN_KEYS - _LAYOUT_KEYS
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(sorted(unknown))}")
    if "seed" not in flat:
        raise ConfigurationError("seed is mandatory")

    task = {_TASK_KEYS[k]: v for k, v in flat.items() if k in _TASK_KEYS}
    task.setdefault("seed", flat["seed"])
    model = {k: v for k, v in flat.items() if k in _MODEL_KEYS}
    model.setdefault("layers", 2)
    model.setdefault("d_model", 32)
    model.setdefault("heads", 4)
    layers = int(model["layers"])

    if "per_layer_aggregator" in flat:
        kinds = [parse_aggregator(k) for k in flat["per_layer_aggregator"]]
    else:
        kind = parse_aggregator(flat.get("aggregator", "linear"))
        subset = parse_layer_subset(flat.get("routing_layers"), layers)
        kinds = [kind if layer in subset else Aggregator.LINEAR for layer in range(layers)]
    model["per_layer_aggregator"] = kinds

    if any(kind.routed for kind in kinds):
        routing = {_ROUTING_KEYS[k]: v for k, v in flat.items() if k in _ROUTING_KEYS}
        routing.setdefault("output_capsules", 8)
        routing["kind"] = next(kind for kind in kinds if kind.routed)
        routing["input_capsules"] = model["heads"]
        routing["d_model"] = model["d_model"]
        model["routing"] = routing

    data = {k: v for k, v in flat.items() if k in _RUN_KEYS}
    data.setdefault("output_dir", str(Path("runs") / str(flat.get("name", "experiment"))))
    data.update(
        task=task,
        model=model,
        optimizer={_OPTIMIZER_KEYS[k]: v for k, v in flat.items() if k in _OPTIMIZER_KEYS},
    )
    return validated(ExperimentConfig, data)


def validated(model_cls, data: Dict[str, Any]):
    try:
        return model_cls.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(f"invalid {model_cls.__name__}: {exc}") from None


def _read_yaml(path: Union[str, Path]) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            document = yaml.safe_load(handle)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config {path} is not valid YAML: {exc}") from None
    if not isinstance(document, dict):
        raise ConfigurationError(f"config {path} must be a key-value document")
    return document


def load_experiment_config(path: Union[str, Path]) -> ExperimentConfig:
    config = experiment_from_flat(_read_yaml(path))
    logger.info(f"Loaded experiment {config.name!r} from {path} (aggregators {config.aggregator_label})")
    return config


def load_task_spec(path: Union[str, Path]) -> TaskSpec:
    flat = _read_yaml(path)
    unknown = set(flat) - set(_TASK_KEYS)
    if unknown:
        raise ConfigurationError(f"unknown task keys: {', '.join(sorted(unknown))}")
    if "task_seed" not in flat:
        raise ConfigurationError("task_seed is mandatory")
    return validated(TaskSpec, {_TASK_KEYS[k]: v for k, v in flat.items()})
