import aiosqlite
from datetime import datetime
from typing import Iterable, List, Optional

from app.models.metrics import MetricsRecord

async def create_tables(db_path: str):
    async with aiosqlite.connect(db_path) as db:
        await db.execute("""
            CREATE TABLE IF NOT EXISTS runs (
              id INTEGER PRIMARY KEY AUTOINCREMENT,
              name TEXT NOT NULL,
              task TEXT NOT NULL,
              aggregators TEXT NOT NULL,
              parameter_count INTEGER,
              test_accuracy REAL,
              test_loss REAL,
              steps_per_second REAL,
              checkpoint_path TEXT,
              finished_at TIMESTAMP
            );
        """)
        await db.execute("""
            CREATE TABLE IF NOT EXISTS run_metrics (
              run_id INTEGER,
              epoch INTEGER,
              split TEXT,
              loss REAL,
              accuracy REAL,
              FOREIGN KEY (run_id) REFERENCES runs(id)
            );
        """)
        await db.commit()

async def save_run(db_path: str, name: str, task: str, aggregators: str, final: MetricsRecord, checkpoint_path: str) -> int:
    async with aiosqlite.connect(db_path) as db:
        cursor = await db.execute("""
            INSERT INTO runs (name, task, aggregators, parameter_count, test_accuracy, test_loss, steps_per_second, checkpoint_path, finished_at)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)
        """, (name, task, aggregators, final.parameter_count, final.accuracy, final.loss,
              final.steps_per_second, checkpoint_path, datetime.now().isoformat(timespec="seconds")))
        await db.commit()
        return cursor.lastrowid

async def save_run_metrics(db_path: str, run_id: int, records: Iterable[MetricsRecord]):
    async with aiosqlite.connect(db_path) as db:
        await db.executemany("""
            INSERT INTO run_metrics (run_id, epoch, split, loss, accuracy)
            VALUES (?, ?, ?, ?, ?)
        """, [(run_id, r.epoch, r.split, r.loss, r.accuracy) for r in records])
        await db.commit()

async def get_runs(db_path: str, limit: int = 100) -> List[dict]:
    async with aiosqlite.connect(db_path) as db:
        db.row_factory = aiosqlite.Row
        cursor = await db.execute("SELECT * FROM runs ORDER BY id DESC LIMIT ?", (limit,))
        rows = await cursor.fetchall()
        return [dict(row) for row in rows]

async def get_run(db_path: str, run_id: int) -> Optional[dict]:
    async with aiosqlite.connect(db_path) as db:
        db.row_factory = aiosqlite.Row
        cursor = await db.execute("SELECT * FROM runs WHERE id = ?", (run_id,))
        row = await cursor.fetchone()
        return dict(row) if row else None

async def get_run_metrics(db_path: str, run_id: int) -> List[dict]:
    async with aiosqlite.connect(db_path) as db:
        db.row_factory = aiosqlite.Row
        cursor = await db.execute(
            "SELECT epoch, split, loss, accuracy FROM run_metrics WHERE run_id = ? ORDER BY rowid", (run_id,)
        )
        rows = await cursor.fetchall()
        return [dict(row) for row in rows]

# Best run per aggregator layout on one task
async def get_leaderboard(db_path: str, task: str, limit: int = 10) -> List[dict]:
    async with aiosqlite.connect(db_path) as db:
        db.row_factory = aiosqlite.Row
        cursor = await db.execute("""
            SELECT aggregators, name, test_accuracy, parameter_count FROM (
                SELECT aggregators, name, test_accuracy, parameter_count,
                       ROW_NUMBER() OVER (PARTITION BY aggregators ORDER BY test_accuracy DESC, id ASC) AS rank
                FROM runs WHERE task = ?
            ) WHERE rank = 1
            ORDER BY test_accuracy DESC LIMIT ?
        """, (task, limit))
        rows = await cursor.fetchall()
        return [{"aggregators": row["aggregators"], "name": row["name"],
                 "test_accuracy": row["test_accuracy"], "parameter_count": row["parameter_count"]} for row in rows]
