from __future__ import annotations
import logging

from db import Database
from formatters import format_leaderboard

log = logging.getLogger("tbadseg.leaderboard")


class MethodLeaderboard:
    def __init__(self, db: Database, phase: str = "test", limit: int = 15):
        self.db = db
        self.phase = phase
        self.limit = limit
        self.items: list[dict] = []
        self.rank_map: dict[str, int] = {}

    async def update_once(self) -> str:
        self.items = await self.db.get_method_leaderboard(self.phase, limit=self.limit)
        self.rank_map = {it["method"]: i for i, it in enumerate(self.items, start=1)}
        log.debug("leaderboard %s: %s", self.phase, self.rank_map)
        return format_leaderboard(self.items, phase=self.phase)

    def rank_of(self, method: str) -> int | None:
        return self.rank_map.get(method)
