from fastapi import APIRouter, HTTPException, Query
from ...models import runs as run_models
from ...database import sqlite_handler
import logging
import config

logger = logging.getLogger(__name__)

router = APIRouter()


def _db_path() -> str:
    if not config.RUNS_DB_PATH:
        raise HTTPException(status_code=503, detail="Run registry is not configured (set RUNS_DB_PATH).")
    return config.RUNS_DB_PATH


@router.get("/runs", response_model=run_models.RunListResponse)
async def list_runs(limit: int = Query(100, ge=1, le=1000)):
    db_path = _db_path()
    await sqlite_handler.create_tables(db_path)
    runs = await sqlite_handler.get_runs(db_path, limit)
    return {"runs": runs}


@router.get("/runs/{run_id}/metrics", response_model=run_models.RunMetricsResponse)
async def run_metrics(run_id: int):
    db_path = _db_path()
    await sqlite_handler.create_tables(db_path)
    if await sqlite_handler.get_run(db_path, run_id) is None:
        logger.info(f"Metrics requested for unknown run {run_id}")
        raise HTTPException(status_code=404, detail=f"Run {run_id} not found.")
    metrics = await sqlite_handler.get_run_metrics(db_path, run_id)
    return {"run_id": run_id, "metrics": metrics}


@router.get("/leaderboard", response_model=run_models.LeaderboardResponse)
async def leaderboard(task: str, limit: int = Query(10, ge=1, le=100)):
    db_path = _db_path()
    await sqlite_handler.create_tables(db_path)
    entries = await sqlite_handler.get_leaderboard(db_path, task, limit)
    return {"task": task, "leaderboard": entries}
