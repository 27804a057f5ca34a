"""
Extractive question answering (SQuAD v2 F1 and exact match)
"""

import collections
import re
import string
from pathlib import Path
from typing import Any, Dict, List, Sequence

from localbench.models import QualityScore, TaskInstance
from localbench.tasks.base import BaseTask, Output, index_instances

NO_ANSWER = "unanswerable"


def normalize_answer(s: str) -> str:
    """Lower text and remove punctuation, articles and extra whitespace"""

    def remove_articles(text):
        return re.sub(r"\b(a|an|the)\b", " ", text)

    def white_space_fix(text):
        return " ".join(text.split())

    def remove_punc(text):
        exclude = set(string.punctuation)
        return "".join(ch for ch in text if ch not in exclude)

    return white_space_fix(remove_articles(remove_punc(s.lower())))


def prediction_text(text: str) -> str:
    """Map the abstention token to the empty prediction"""
    if text.strip().strip('."\'').lower() == NO_ANSWER:
        return ""
    return text


def f1_score(prediction: str, ground_truth: str) -> float:
    prediction_tokens = normalize_answer(prediction).split()
    ground_truth_tokens = normalize_answer(ground_truth).split()
    # both empty counts as agreement on "no answer"
    if not prediction_tokens or not ground_truth_tokens:
        return float(prediction_tokens == ground_truth_tokens)

    common = collections.Counter(prediction_tokens) & collections.Counter(ground_truth_tokens)
    num_same = sum(common.values())
    if num_same == 0:
        return 0.0
    precision = num_same / len(prediction_tokens)
    recall = num_same / len(ground_truth_tokens)
    return (2 * precision * recall) / (precision + recall)


def exact_match_score(prediction: str, ground_truth: str) -> float:
    return float(normalize_answer(prediction) == normalize_answer(ground_truth))


def _score(metric_name: str, metric_fn, outputs: Sequence[Output], instances: Sequence[TaskInstance]) -> QualityScore:
    per_instance = []
    for instance_id, text, instance in index_instances(outputs, instances):
        references = instance.references or [""]
        prediction = prediction_text(text)
        per_instance.append((instance_id, max(metric_fn(prediction, ref) for ref in references)))
    return QualityScore.from_values(metric_name, per_instance)


def score_qa_f1(outputs: Sequence[Output], instances: Sequence[TaskInstance]) -> QualityScore:
    """Token F1, max over references"""
    return _score("f1", f1_score, outputs, instances)


def score_qa_exact_match(outputs: Sequence[Output], instances: Sequence[TaskInstance]) -> QualityScore:
    """Normalized exact match, max over references"""
    return _score("exact_match", exact_match_score, outputs, instances)


class QaTask(BaseTask):
    name = "qa"
    metric_names = ("f1", "exact_match")
    required_fields = ("question", "context", "answers")

    def build_instance(self, instance_id: str, record: Dict[str, Any], dataset_dir: Path) -> TaskInstance:
        answers = record["answers"]
        if not isinstance(answers, list):
            raise ValueError("answers must be a list of strings")
        fields = {"question": record["question"], "context": record["context"]}
        return TaskInstance(
            id=instance_id,
            prompt=self.render(instance_id, fields),
            references=[str(a) for a in answers],
        )

    async def quality_metrics(self, outputs: Sequence[Output], instances: Sequence[TaskInstance]) -> List[QualityScore]:
        return [score_qa_f1(outputs, instances), score_qa_exact_match(outputs, instances)]
