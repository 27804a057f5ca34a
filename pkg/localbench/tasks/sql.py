"""
Text-to-SQL (execution accuracy)
"""

import asyncio
import collections
import logging
import re
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Tuple

from localbench.models import QualityScore, TaskInstance
from localbench.tasks.base import BaseTask, Output, index_instances
from localbench.utils.database import SqlDatabaseError, check_readable, fetch_rows

logger = logging.getLogger(__name__)

MAX_OPEN_CONNECTIONS = 8

_FENCE = re.compile(r"```(?:[A-Za-z0-9_-]*[ \t]*\n)?(.*?)```", re.DOTALL)
_STATEMENT = re.compile(
    r"\b(?:SELECT\b|WITH\s+\w+\s+AS\s*\(|INSERT\s+INTO\b|UPDATE\s+\w+\s+SET\b|DELETE\s+FROM\b)[^;]*;?",
    re.IGNORECASE | re.DOTALL,
)
_STRING_LITERAL = re.compile(r"'(?:[^']|'')*'|\"(?:[^\"]|\"\")*\"")
_INNERMOST_PARENS = re.compile(r"\([^()]*\)")
_ORDER_BY = re.compile(r"\border\s+by\b", re.IGNORECASE)


def extract_sql(text: str) -> str:
    """Pull the query out of prose or a fenced code block"""

    fence = _FENCE.search(text)
    if fence:
        return fence.group(1).strip()
    statement = _STATEMENT.search(text)
    if statement:
        return statement.group(0).strip()
    return text.strip()


def has_top_level_order_by(sql: str) -> bool:
    """ORDER BY outside string literals and parenthesized subqueries"""

    stripped = _STRING_LITERAL.sub("''", sql)
    while True:
        reduced = _INNERMOST_PARENS.sub(" ", stripped)
        if reduced == stripped:
            break
        stripped = reduced
    return bool(_ORDER_BY.search(stripped))


def results_match(predicted: List[Tuple[Any, ...]], gold: List[Tuple[Any, ...]], ordered: bool) -> bool:
    if ordered:
        return predicted == gold
    return collections.Counter(predicted) == collections.Counter(gold)


async def check_databases(instances: Iterable[TaskInstance]) -> None:
    """Every referenced database must open read-only"""
    for db_path in sorted({instance.aux["db_path"] for instance in instances}):
        await check_readable(db_path)


async def check_gold_queries(instances: Sequence[TaskInstance]) -> None:
    """Databases readable and every gold query executes"""

    await check_databases(instances)
    for instance in instances:
        try:
            await fetch_rows(instance.aux["db_path"], instance.aux["gold_sql"])
        except Exception as e:
            raise SqlDatabaseError(f"gold query for {instance.id} failed: {e}") from e


async def score_sql_execution(outputs: Sequence[Output], instances: Sequence[TaskInstance]) -> QualityScore:
    """1 iff the predicted query runs and returns the gold result multiset"""

    paired = index_instances(outputs, instances)
    await check_databases(instance for _, _, instance in paired)

    semaphore = asyncio.Semaphore(MAX_OPEN_CONNECTIONS)
    gold_cache: Dict[str, List[Tuple[Any, ...]]] = {}

    async def gold_rows(instance: TaskInstance) -> List[Tuple[Any, ...]]:
        if instance.id not in gold_cache:
            try:
                gold_cache[instance.id] = await fetch_rows(instance.aux["db_path"], instance.aux["gold_sql"])
            except Exception as e:
                raise SqlDatabaseError(f"gold query for {instance.id} failed: {e}") from e
        return gold_cache[instance.id]

    async def score_one(instance_id: str, text: str, instance: TaskInstance) -> Tuple[str, float]:
        async with semaphore:
            gold = await gold_rows(instance)
            try:
                predicted = await fetch_rows(instance.aux["db_path"], extract_sql(text))
            except Exception as e:
                logger.debug(f"predicted SQL for {instance_id} failed: {e}")
                return instance_id, 0.0
        ordered = has_top_level_order_by(instance.aux["gold_sql"])
        return instance_id, 1.0 if results_match(predicted, gold, ordered) else 0.0

    per_instance = await asyncio.gather(*(score_one(*item) for item in paired))
    return QualityScore.from_values("execution_accuracy", list(per_instance))


class SqlTask(BaseTask):
    name = "sql"
    metric_names = ("execution_accuracy",)
    required_fields = ("question", "db_path", "gold_sql")

    def build_instance(self, instance_id: str, record: Dict[str, Any], dataset_dir: Path) -> TaskInstance:
        db_path = Path(record["db_path"])
        if not db_path.is_absolute():
            db_path = dataset_dir / db_path
        schema = record.get("schema", "")
        fields = {"question": record["question"], "schema": f"Schema:\n{schema}\n" if schema else ""}
        return TaskInstance(
            id=instance_id,
            prompt=self.render(instance_id, fields),
            references=[str(record["gold_sql"])],
            aux={"db_path": str(db_path), "gold_sql": str(record["gold_sql"])},
        )

    async def preflight(self, instances: Sequence[TaskInstance]) -> None:
        await check_gold_queries(instances)
        logger.info(f"🗄️ {len(instances)} gold queries verified")

    async def quality_metrics(self, outputs: Sequence[Output], instances: Sequence[TaskInstance]) -> List[QualityScore]:
        return [await score_sql_execution(outputs, instances)]
