from __future__ import annotations
import time
from pathlib import Path
from typing import Mapping, Optional

import aiosqlite

from metrics import AggregateReport
from training import TrainingHistory

SCHEMA = r'''
PRAGMA journal_mode=WAL;

CREATE TABLE IF NOT EXISTS runs (
    run_id TEXT NOT NULL,
    fold INTEGER NOT NULL,
    method TEXT NOT NULL,
    pipeline TEXT NOT NULL,
    ts INTEGER NOT NULL,
    config TEXT,
    PRIMARY KEY (run_id, fold)
);

CREATE TABLE IF NOT EXISTS epochs (
    run_id TEXT NOT NULL,
    fold INTEGER NOT NULL,
    stage TEXT NOT NULL,
    epoch INTEGER NOT NULL,
    train_loss REAL,
    val_mean_dice REAL,
    val_true_flt_dice REAL,
    val_accuracy REAL,
    lr REAL,
    seconds REAL,
    PRIMARY KEY (run_id, fold, stage, epoch)
);

CREATE TABLE IF NOT EXISTS case_metrics (
    run_id TEXT NOT NULL,
    fold INTEGER NOT NULL,
    phase TEXT NOT NULL,
    method TEXT NOT NULL,
    case_id TEXT NOT NULL,
    dice_tl REAL,
    dice_fl REAL,
    dice_flt REAL,
    hd_tl REAL,
    hd_fl REAL,
    hd_flt REAL,
    gt_has_flt INTEGER NOT NULL,
    pred_has_flt INTEGER NOT NULL,
    inference_seconds REAL,
    PRIMARY KEY (run_id, fold, phase, case_id)
);
'''


class Database:
    """Run ledger: one row per run/fold, per training epoch and per evaluated case."""

    def __init__(self, path: str | Path = "runs/ledger.db"):
        self.path = str(path)
        self._conn: Optional[aiosqlite.Connection] = None

    async def connect(self):
        Path(self.path).parent.mkdir(parents=True, exist_ok=True)
        self._conn = await aiosqlite.connect(self.path)
        await self._conn.executescript(SCHEMA)
        await self._conn.commit()

    async def close(self):
        if self._conn is not None:
            await self._conn.close()
            self._conn = None

    async def __aenter__(self) -> "Database":
        await self.connect()
        return self

    async def __aexit__(self, *exc):
        await self.close()

    @property
    def conn(self) -> aiosqlite.Connection:
        if not self._conn:
            raise RuntimeError("DB not connected")
        return self._conn

    async def record_run(self, *, run_id: str, fold: int, method: str, pipeline: str, config: str | None = None):
        await self.conn.execute(
            "INSERT INTO runs (run_id, fold, method, pipeline, ts, config) VALUES (?, ?, ?, ?, ?, ?) "
            "ON CONFLICT(run_id, fold) DO UPDATE SET method=excluded.method, pipeline=excluded.pipeline, "
            "ts=excluded.ts, config=excluded.config",
            (run_id, fold, method, pipeline, int(time.time()), config),
        )
        await self.conn.commit()

    async def record_history(self, *, run_id: str, fold: int, stage: str, history: TrainingHistory):
        await self.conn.executemany(
            "INSERT OR REPLACE INTO epochs (run_id, fold, stage, epoch, train_loss, val_mean_dice, "
            "val_true_flt_dice, val_accuracy, lr, seconds) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?)",
            [(run_id, fold, stage, r.epoch, r.train_loss, r.val_mean_dice, r.val_true_flt_dice,
              r.val_accuracy, r.lr, r.seconds) for r in history.records],
        )
        await self.conn.commit()

    async def record_report(self, *, run_id: str, fold: int, report: AggregateReport,
                            timings: Mapping[str, float] | None = None):
        timings = timings or {}
        rows = []
        for c in report.cases:
            rows.append((
                run_id, fold, report.phase, report.method, c.case_id,
                c.dice[1], c.dice[2], c.dice[3], c.hd[1], c.hd[2], c.hd[3],
                int(c.gt_has_flt), int(c.pred_has_flt), timings.get(c.case_id),
            ))
        await self.conn.executemany(
            "INSERT OR REPLACE INTO case_metrics (run_id, fold, phase, method, case_id, dice_tl, dice_fl, dice_flt, "
            "hd_tl, hd_fl, hd_flt, gt_has_flt, pred_has_flt, inference_seconds) "
            "VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)",
            rows,
        )
        await self.conn.commit()

    async def get_method_leaderboard(self, phase: str = "test", limit: int = 15) -> list[dict]:
        """Mean DC per method over every recorded case of a phase, best mean of TL/FL/True-FLT first."""
        q = """
        SELECT
            method,
            COUNT(*) AS n,
            AVG(dice_tl) AS tl,
            AVG(dice_fl) AS fl,
            AVG(dice_flt) AS flt,
            AVG(CASE WHEN gt_has_flt = 1 THEN dice_flt END) AS true_flt,
            AVG(inference_seconds) AS seconds
        FROM case_metrics
        WHERE phase = ?
        GROUP BY method
        ORDER BY (AVG(dice_tl) + AVG(dice_fl) + COALESCE(AVG(CASE WHEN gt_has_flt = 1 THEN dice_flt END), 0)) / 3 DESC,
                 method ASC
        LIMIT ?
        """
        cur = await self.conn.execute(q, (phase, limit))
        rows = await cur.fetchall()
        return [
            {"method": r[0], "n": int(r[1]), "tl": r[2], "fl": r[3], "flt": r[4], "true_flt": r[5], "seconds": r[6]}
            for r in rows
        ]

    async def get_epochs(self, run_id: str, fold: int, stage: str) -> list[dict]:
        cur = await self.conn.execute(
            "SELECT epoch, train_loss, val_mean_dice, val_true_flt_dice, lr FROM epochs "
            "WHERE run_id=? AND fold=? AND stage=? ORDER BY epoch",
            (run_id, fold, stage),
        )
        rows = await cur.fetchall()
        return [{"epoch": r[0], "train_loss": r[1], "val_mean_dice": r[2], "val_true_flt_dice": r[3], "lr": r[4]}
                for r in rows]

    async def get_run_config(self, run_id: str, fold: int) -> dict | None:
        cur = await self.conn.execute("SELECT method, pipeline, config FROM runs WHERE run_id=? AND fold=?", (run_id, fold))
        row = await cur.fetchone()
        if not row:
            return None
        return {"method": row[0], "pipeline": row[1], "config": row[2]}
