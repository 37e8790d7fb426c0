from typing import Any, Dict, Optional

from pydantic import BaseModel, Field

TIMING_FIELDS = {"wall_clock_seconds", "steps_per_second"}


class MetricsRecord(BaseModel):
    epoch: int = Field(ge=0)
    split: str
    loss: float = Field(ge=0)
    accuracy: float = Field(ge=0, le=1)
    wall_clock_seconds: float = Field(0.0, ge=0)
    parameter_count: int = Field(ge=0)
    steps_per_second: Optional[float] = None

    def deterministic_fields(self) -> Dict[str, Any]:
        """Everything except timing, so reruns of one config write identical bytes."""
        return self.model_dump(exclude=TIMING_FIELDS)

    def timing_fields(self) -> Dict[str, Any]:
        return self.model_dump(include=TIMING_FIELDS | {"epoch", "split"})


class ComparisonRow(BaseModel):
    name: str
    task: str
    aggregators: str
    test_accuracy: float
    test_loss: float
    parameter_count: int
    steps_per_second: float
