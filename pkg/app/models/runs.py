from pydantic import BaseModel
from typing import List, Optional


class RunSummary(BaseModel):
    id: int
    name: str
    task: str
    aggregators: str
    parameter_count: int
    test_accuracy: float
    test_loss: float
    steps_per_second: Optional[float]
    checkpoint_path: str
    finished_at: str


class RunListResponse(BaseModel):
    runs: List[RunSummary]


class RunMetric(BaseModel):
    epoch: int
    split: str
    loss: float
    accuracy: float


class RunMetricsResponse(BaseModel):
    run_id: int
    metrics: List[RunMetric]


class LeaderboardEntry(BaseModel):
    aggregators: str
    name: str
    test_accuracy: float
    parameter_count: int


class LeaderboardResponse(BaseModel):
    task: str
    leaderboard: List[LeaderboardEntry]
