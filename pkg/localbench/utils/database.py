"""
Database utilities for SQL execution scoring
"""

import logging
from pathlib import Path
from typing import Any, List, Tuple

import aiosqlite

logger = logging.getLogger(__name__)


class SqlDatabaseError(Exception):
    """Embedded database missing or unreadable, or gold query broken"""


def _readonly_uri(db_path: str) -> str:
    return f"{Path(db_path).resolve().as_uri()}?mode=ro"


async def check_readable(db_path: str) -> None:
    """Raise SqlDatabaseError unless the database opens and has a schema"""

    if not Path(db_path).is_file():
        raise SqlDatabaseError(f"database not found: {db_path}")
    try:
        async with aiosqlite.connect(_readonly_uri(db_path), uri=True) as db:
            async with db.execute("SELECT COUNT(*) FROM sqlite_master") as cursor:
                await cursor.fetchone()
    except aiosqlite.Error as e:
        raise SqlDatabaseError(f"database unreadable: {db_path}: {e}") from e


async def fetch_rows(db_path: str, sql: str) -> List[Tuple[Any, ...]]:
    """Execute a query on a private read-only connection and return all rows"""

    async with aiosqlite.connect(_readonly_uri(db_path), uri=True) as db:
        async with db.execute(sql) as cursor:
            rows = await cursor.fetchall()
            return [tuple(row) for row in rows]
