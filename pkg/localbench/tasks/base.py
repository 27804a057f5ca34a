"""
Task plugin contract and dataset loading
"""

import json
import logging
from abc import ABC, abstractmethod
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from localbench.models import QualityScore, TaskInstance

logger = logging.getLogger(__name__)

Output = Tuple[str, str]


class DatasetError(Exception):
    """Dataset file missing, malformed or empty"""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        super().__init__(message)


def read_template(name: str) -> str:
    """Read a shipped prompt template"""
    return resources.files("localbench.tasks").joinpath("templates", f"{name}.txt").read_text(encoding="utf-8")


def read_records(dataset_path: str) -> List[Tuple[int, Dict[str, Any]]]:
    """Read a line-delimited JSON dataset as (line number, record) pairs"""

    path = Path(dataset_path)
    if not path.is_file():
        raise DatasetError(f"dataset not found: {dataset_path}", path=dataset_path)

    records = []
    with path.open(encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{dataset_path}:{line_no}: malformed record: {e.msg}",
                                   path=dataset_path, line=line_no) from e
            if not isinstance(record, dict):
                raise DatasetError(f"{dataset_path}:{line_no}: record is not an object",
                                   path=dataset_path, line=line_no)
            records.append((line_no, record))

    if not records:
        raise DatasetError(f"dataset is empty: {dataset_path}", path=dataset_path)
    return records


def index_instances(outputs: Sequence[Output], instances: Sequence[TaskInstance]) -> List[Tuple[str, str, TaskInstance]]:
    """Pair every output with its instance; unknown ids are a caller bug"""

    by_id = {instance.id: instance for instance in instances}
    paired = []
    for instance_id, text in outputs:
        if instance_id not in by_id:
            raise ValueError(f"output for unknown instance id {instance_id!r}")
        paired.append((instance_id, text, by_id[instance_id]))
    return paired


class BaseTask(ABC):
    """A task turns dataset records into prompts and scores generated outputs"""

    name: str = ""
    metric_names: Tuple[str, ...] = ()
    required_fields: Tuple[str, ...] = ()

    def __init__(self, template: Optional[str] = None):
        self.template = template if template is not None else read_template(self.name)

    @abstractmethod
    def build_instance(self, instance_id: str, record: Dict[str, Any], dataset_dir: Path) -> TaskInstance:
        """Render one validated record into a TaskInstance"""

    @abstractmethod
    async def quality_metrics(self, outputs: Sequence[Output], instances: Sequence[TaskInstance]) -> List[QualityScore]:
        """Score (instance id, generated text) pairs"""

    async def preflight(self, instances: Sequence[TaskInstance]) -> None:
        """Check scoring resources before any request is sent; raises on problems"""

    def render(self, instance_id: str, fields: Dict[str, Any]) -> str:
        try:
            return self.template.format_map(fields).strip() + "\n"
        except (KeyError, IndexError) as e:
            raise DatasetError(f"instance {instance_id}: template placeholder {e} has no value") from e

    def validate(self, dataset_path: str, line_no: int, record: Dict[str, Any]) -> None:
        missing = [name for name in self.required_fields if name not in record]
        if missing:
            raise DatasetError(
                f"{dataset_path}:{line_no}: {self.name} record missing field(s) {', '.join(missing)}",
                path=dataset_path, line=line_no,
            )

    def generate_prompts(self, dataset_path: str, samples: int, seed: int) -> Tuple[List[TaskInstance], List[str]]:
        """Seeded shuffle of the dataset, then the first `samples` records rendered"""

        warnings: List[str] = []
        records = read_records(dataset_path)
        dataset_dir = Path(dataset_path).parent

        seen = set()
        keyed = []
        for line_no, record in records:
            self.validate(dataset_path, line_no, record)
            instance_id = str(record.get("id", f"{self.name}-{line_no}"))
            if instance_id in seen:
                raise DatasetError(f"{dataset_path}:{line_no}: duplicate id {instance_id!r}",
                                   path=dataset_path, line=line_no)
            seen.add(instance_id)
            keyed.append((line_no, instance_id, record))

        if samples > len(keyed):
            message = f"dataset has {len(keyed)} records, fewer than samples={samples}; using all"
            logger.warning(message)
            warnings.append(message)

        order = np.random.default_rng(seed).permutation(len(keyed))[:samples]
        instances = []
        for index in order:
            line_no, instance_id, record = keyed[int(index)]
            try:
                instances.append(self.build_instance(instance_id, record, dataset_dir))
            except (TypeError, ValueError) as e:
                raise DatasetError(f"{dataset_path}:{line_no}: {e}", path=dataset_path, line=line_no) from e
        return instances, warnings
