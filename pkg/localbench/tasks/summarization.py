"""
News summarization (ROUGE-L)
"""

from pathlib import Path
from typing import Any, Dict, List, Sequence

from localbench.models import QualityScore, TaskInstance
from localbench.tasks.base import BaseTask, Output, index_instances

# Recorded in the report next to the score
ROUGE_VARIANT = "rouge-l f-measure, beta=1, lowercased whitespace tokens, no stemming"


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Longest common subsequence length"""
    if not a or not b:
        return 0
    previous = [0] * (len(b) + 1)
    for token_a in a:
        current = [0]
        for j, token_b in enumerate(b, start=1):
            if token_a == token_b:
                current.append(previous[j - 1] + 1)
            else:
                current.append(max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def rouge_l(hypothesis: str, reference: str) -> float:
    hyp = hypothesis.lower().split()
    ref = reference.lower().split()
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(hyp)
    recall = lcs / len(ref)
    return 2 * precision * recall / (precision + recall)


def score_rouge_l(outputs: Sequence[Output], instances: Sequence[TaskInstance]) -> QualityScore:
    """ROUGE-L F1, max over references"""

    per_instance = []
    for instance_id, text, instance in index_instances(outputs, instances):
        best = max((rouge_l(text, ref) for ref in instance.references), default=0.0)
        per_instance.append((instance_id, best))
    return QualityScore.from_values("rouge_l", per_instance)


class SummarizationTask(BaseTask):
    name = "summarization"
    metric_names = ("rouge_l",)
    required_fields = ("article", "highlights")

    def build_instance(self, instance_id: str, record: Dict[str, Any], dataset_dir: Path) -> TaskInstance:
        return TaskInstance(
            id=instance_id,
            prompt=self.render(instance_id, {"article": record["article"]}),
            references=[str(record["highlights"])],
        )

    async def quality_metrics(self, outputs: Sequence[Output], instances: Sequence[TaskInstance]) -> List[QualityScore]:
        return [score_rouge_l(outputs, instances)]
