"""
Task engine: plugin registry, prompt generation and run scoring
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Type

from localbench.models import QualityScore, RequestRecord, TaskInstance
from localbench.tasks.base import BaseTask, DatasetError
from localbench.tasks.custom import CustomTask
from localbench.tasks.mmlu import MmluTask, extract_choice, score_mmlu
from localbench.tasks.qa import QaTask, score_qa_exact_match, score_qa_f1
from localbench.tasks.sql import SqlTask, extract_sql, score_sql_execution
from localbench.tasks.summarization import ROUGE_VARIANT, SummarizationTask, score_rouge_l

logger = logging.getLogger(__name__)

TASKS: Dict[str, Type[BaseTask]] = {
    "mmlu": MmluTask,
    "qa": QaTask,
    "summarization": SummarizationTask,
    "sql": SqlTask,
}


def get_task(name: str, template_path: Optional[str] = None, custom_metric: str = "rouge_l") -> BaseTask:
    """Instantiate a task plugin, optionally with a template override"""

    template = None
    if template_path:
        try:
            template = Path(template_path).read_text(encoding="utf-8")
        except OSError as e:
            raise DatasetError(f"cannot read prompt template {template_path}: {e}", path=template_path) from e

    if name == "custom":
        if template is None:
            raise DatasetError("task=custom needs a prompt template")
        return CustomTask(template, metric=custom_metric)
    if name not in TASKS:
        raise DatasetError(f"unknown task {name!r}")
    return TASKS[name](template)


def generate_prompts(task: str, dataset_path: str, samples: int, seed: int,
                     template_path: Optional[str] = None,
                     custom_metric: str = "rouge_l") -> Tuple[List[TaskInstance], List[str]]:
    """Prompts + references for a task; deterministic given (file bytes, samples, seed)"""
    plugin = get_task(task, template_path, custom_metric)
    return plugin.generate_prompts(dataset_path, samples, seed)


async def score_run(plugin: BaseTask, records: Sequence[RequestRecord],
                    instances: Sequence[TaskInstance]) -> List[QualityScore]:
    """Score ok records with the plugin; failed requests score 0 on every metric"""

    outputs = [(r.instance_id, r.output_text) for r in records if r.ok]
    failed = [r.instance_id for r in records if not r.ok]

    if outputs:
        scores = await plugin.quality_metrics(outputs, instances)
    else:
        scores = [QualityScore.from_values(name, []) for name in plugin.metric_names]

    if failed:
        logger.info(f"{len(failed)} failed request(s) scored as 0")
        scores = [
            QualityScore.from_values(s.metric_name, s.per_instance + [(i, 0.0) for i in failed])
            for s in scores
        ]
    return scores


__all__ = [
    "BaseTask", "DatasetError", "ROUGE_VARIANT", "TASKS",
    "extract_choice", "extract_sql", "generate_prompts", "get_task",
    "score_mmlu", "score_qa_exact_match", "score_qa_f1", "score_rouge_l",
    "score_run", "score_sql_execution",
]
