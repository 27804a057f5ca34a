"""
Multiple choice knowledge task (accuracy)
"""

import re
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from localbench.models import QualityScore, TaskInstance
from localbench.tasks.base import BaseTask, Output, index_instances

LETTERS = "ABCD"

_CHOICE = re.compile(r"\b([A-D])\b", re.IGNORECASE)


def extract_choice(text: str) -> Optional[str]:
    """First standalone A-D letter in the text, case-insensitive"""

    match = _CHOICE.search(text)
    return match.group(1).upper() if match else None


def score_mmlu(outputs: Sequence[Output], instances: Sequence[TaskInstance]) -> QualityScore:
    """Accuracy of extracted choice letters against the gold letter"""

    per_instance = []
    for instance_id, text, instance in index_instances(outputs, instances):
        gold = instance.references[0].strip().upper() if instance.references else ""
        per_instance.append((instance_id, 1.0 if extract_choice(text) == gold else 0.0))
    return QualityScore.from_values("accuracy", per_instance)


class MmluTask(BaseTask):
    name = "mmlu"
    metric_names = ("accuracy",)
    required_fields = ("question", "choices", "answer")

    def build_instance(self, instance_id: str, record: Dict[str, Any], dataset_dir: Path) -> TaskInstance:
        choices = record["choices"]
        if not isinstance(choices, list) or len(choices) != 4:
            raise ValueError("choices must be a list of 4 strings")

        answer = record["answer"]
        if isinstance(answer, int) and 0 <= answer < 4:
            answer = LETTERS[answer]
        answer = str(answer).strip().upper()
        if answer not in LETTERS:
            raise ValueError(f"answer must be one of A-D, got {record['answer']!r}")

        fields = {"question": record["question"]}
        fields.update({f"choice_{letter.lower()}": str(choice) for letter, choice in zip(LETTERS, choices)})
        return TaskInstance(id=instance_id, prompt=self.render(instance_id, fields), references=[answer])

    async def quality_metrics(self, outputs: Sequence[Output], instances: Sequence[TaskInstance]) -> List[QualityScore]:
        return [score_mmlu(outputs, instances)]
