"""
User-defined task rendered through a user-supplied template
"""

from pathlib import Path
from typing import Any, Dict, List, Sequence

from localbench.models import QualityScore, TaskInstance
from localbench.tasks.base import BaseTask, Output, index_instances
from localbench.tasks.qa import exact_match_score, f1_score
from localbench.tasks.summarization import score_rouge_l


class CustomTask(BaseTask):
    name = "custom"

    def __init__(self, template: str, metric: str = "rouge_l"):
        super().__init__(template)
        self.metric = metric
        self.metric_names = (metric,)

    def build_instance(self, instance_id: str, record: Dict[str, Any], dataset_dir: Path) -> TaskInstance:
        if "references" in record:
            references = [str(r) for r in record["references"]]
        elif "reference" in record:
            references = [str(record["reference"])]
        else:
            references = []
        fields = {k: v for k, v in record.items() if k not in ("references", "reference")}
        return TaskInstance(id=instance_id, prompt=self.render(instance_id, fields), references=references)

    async def quality_metrics(self, outputs: Sequence[Output], instances: Sequence[TaskInstance]) -> List[QualityScore]:
        if self.metric == "rouge_l":
            return [score_rouge_l(outputs, instances)]

        metric_fn = f1_score if self.metric == "f1" else exact_match_score
        per_instance = []
        for instance_id, text, instance in index_instances(outputs, instances):
            per_instance.append((instance_id, max((metric_fn(text, ref) for ref in instance.references or [""]))))
        return [QualityScore.from_values(self.metric, per_instance)]
