"""
Configuration settings and benchmark run configuration
"""

from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

# Defaults
DEFAULT_TELEMETRY_INTERVAL_S = 0.1
DEFAULT_QOS_TTFT_S = 2.0
DEFAULT_QOS_E2E_S = 6.0
DEFAULT_MAX_OUTPUT_TOKENS = 512
DEFAULT_READY_PATH = "/health"
FALLBACK_READY_PATH = "/v1/models"
DEFAULT_READY_TIMEOUT_S = 600.0
DEFAULT_ENDPOINT_URL = "http://127.0.0.1:8000"

# Workload scheduler step
SCHEDULER_TICK_S = 0.01
SATURATION_TICKS = 10

# Environment
API_KEY_ENV = "BENCH_API_KEY"
MODEL_ID_ENV = "BENCH_MODEL_ID"
QUANTIZATION_ENV = "BENCH_QUANTIZATION"

# Report Settings
SCHEMA_VERSION = "1.0"
REPORT_FILE = "report.json"
RECORDS_FILE = "records.csv"
SUMMARY_FILE = "summary.txt"
TELEMETRY_FILE = "telemetry.csv"
COMPARISON_FILE = "comparison.json"
LOG_FILE = "localbench.log"
LOG_FORMAT = "[%(asctime)s] %(levelname)s %(name)s - %(message)s"

# GPU management CLI query; prints "mem,util,power" with memory in MiB
NVIDIA_SMI_QUERY = (
    "nvidia-smi --query-gpu=memory.used,utilization.gpu,power.draw "
    "--format=csv,noheader,nounits"
)

KNOWN_QUANTIZATIONS = ("fp16", "int8", "4bit", "awq", "gptq")


class ConfigError(Exception):
    """Invalid benchmark configuration"""

    def __init__(self, kind: str, message: str, field: Optional[str] = None,
                 line: Optional[int] = None, column: Optional[int] = None):
        self.kind = kind
        self.field = field
        self.line = line
        self.column = column
        super().__init__(message)


class Backend(str, Enum):
    """Inference engine selection"""
    TGI = "tgi"
    VLLM = "vllm"
    SGLANG = "sglang"
    LMDEPLOY = "lmdeploy"
    CUSTOM = "custom"


class Task(str, Enum):
    """Evaluation task type"""
    MMLU = "mmlu"
    SUMMARIZATION = "summarization"
    QA = "qa"
    SQL = "sql"
    CUSTOM = "custom"


class Scenario(str, Enum):
    """Serving scenario"""
    SINGLE = "single"
    BATCH = "batch"
    SERVER = "server"


class LaunchSpec(BaseModel):
    """How to start a local backend process"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    command: List[str] = Field(min_length=1)
    env: Dict[str, str] = Field(default_factory=dict)
    ready_path: str = DEFAULT_READY_PATH
    ready_timeout_s: float = Field(default=DEFAULT_READY_TIMEOUT_S, gt=0)


class TelemetrySpec(BaseModel):
    """Telemetry provider selection"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    provider: Literal["null", "command", "replay", "nvml"] = "null"
    interval_s: float = Field(default=DEFAULT_TELEMETRY_INTERVAL_S, gt=0)
    command: str = NVIDIA_SMI_QUERY
    mem_unit: Literal["MB", "MiB"] = "MB"
    trace_path: Optional[str] = None
    gpu_index: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _replay_needs_trace(self) -> "TelemetrySpec":
        if self.provider == "replay" and not self.trace_path:
            raise ValueError("trace_path: telemetry provider=replay requires trace_path")
        return self


class BenchmarkConfig(BaseModel):
    """Validated benchmark run configuration"""

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    model_id: str = Field(alias="hf_model", min_length=1)
    backend: Backend
    backend_launch: Optional[LaunchSpec] = None
    endpoint_url: Optional[str] = None
    quantization: str = "fp16"
    task: Task
    dataset_path: str
    scenario: Scenario
    samples: int = Field(default=64, gt=0)
    batch_size: int = Field(default=1, gt=0)
    run_time_s: Optional[int] = Field(default=None, gt=0)
    concurrent_users: int = Field(default=1, gt=0)
    requests_per_user_per_min: Optional[float] = Field(default=None, gt=0)
    max_output_tokens: int = Field(default=DEFAULT_MAX_OUTPUT_TOKENS, gt=0)
    telemetry: TelemetrySpec = Field(default_factory=TelemetrySpec)
    seed: int = Field(default=0, ge=0)
    qos_ttft_s: float = Field(default=DEFAULT_QOS_TTFT_S, ge=0)
    qos_e2e_s: float = Field(default=DEFAULT_QOS_E2E_S, ge=0)
    qos_max_violation_rate: float = Field(default=0.0, ge=0, le=1)

    model_path: Optional[str] = None
    model_size_glob: str = "*"
    prompt_template: Optional[str] = None
    custom_metric: Literal["exact_match", "f1", "rouge_l"] = "rouge_l"
    request_timeout_s: float = Field(default=600.0, gt=0)
    attach_timeout_s: float = Field(default=30.0, gt=0)

    @model_validator(mode="after")
    def _check_scenario(self) -> "BenchmarkConfig":
        if self.scenario is Scenario.BATCH and self.samples < self.batch_size:
            raise ValueError("batch_size: scenario=batch requires samples >= batch_size")
        if self.scenario is Scenario.SERVER:
            if self.run_time_s is None:
                raise ValueError("run_time_s: scenario=server requires run_time_s >= 1")
            if self.requests_per_user_per_min is None:
                raise ValueError(
                    "requests_per_user_per_min: scenario=server requires "
                    "requests_per_user_per_min > 0"
                )
        if self.backend_launch is None and not self.endpoint_url:
            raise ValueError("endpoint_url: required when backend_launch is absent")
        if self.task is Task.CUSTOM and not self.prompt_template:
            raise ValueError("prompt_template: task=custom requires prompt_template")
        return self

    @property
    def base_url(self) -> str:
        """Endpoint base URL without trailing slash"""
        return (self.endpoint_url or DEFAULT_ENDPOINT_URL).rstrip("/")

    def to_dict(self) -> Dict[str, Any]:
        """Plain snapshot using the YAML key names"""
        return self.model_dump(mode="json", by_alias=True, exclude_none=True)


def apply_overrides(document: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
    """Apply dotted key=value overrides onto a raw config document"""

    result = dict(document)
    for item in overrides:
        if "=" not in item:
            raise ConfigError("syntax", f"override '{item}' is not of the form key=value")
        key, raw_value = item.split("=", 1)
        parts = key.strip().split(".")
        if not all(parts):
            raise ConfigError("syntax", f"override '{item}' has an empty key segment")
        try:
            value = yaml.safe_load(raw_value) if raw_value else ""
        except yaml.YAMLError as e:
            raise ConfigError("syntax", f"override '{item}': {e}", field=key) from e

        target = result
        for part in parts[:-1]:
            child = target.get(part)
            child = dict(child) if isinstance(child, dict) else {}
            target[part] = child
            target = child
        target[parts[-1]] = value
    return result


def _load_document(text: str) -> Dict[str, Any]:
    try:
        document = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        column = mark.column + 1 if mark is not None else None
        where = f" at line {line}, column {column}" if mark is not None else ""
        problem = getattr(e, "problem", None) or str(e)
        raise ConfigError("syntax", f"syntax error{where}: {problem}",
                          line=line, column=column) from e

    if document is None:
        document = {}
    if not isinstance(document, dict):
        raise ConfigError("syntax", "configuration must be a key-value mapping")
    return document


def _translate_validation_error(error: ValidationError) -> ConfigError:
    first = error.errors()[0]
    field = ".".join(str(part) for part in first["loc"]) or None

    if first["type"] == "extra_forbidden":
        return ConfigError("unknown_field", f"unknown field '{field}'", field=field)

    message = first["msg"].removeprefix("Value error, ")
    if field is None and ":" in message:
        # cross-field invariants name their field before the colon
        field = message.split(":", 1)[0]
        return ConfigError("constraint", f"constraint violation: {message}", field=field)
    if first["type"] == "missing":
        return ConfigError("constraint", f"constraint violation: {field}: field required", field=field)
    return ConfigError("constraint", f"constraint violation: {field}: {message}", field=field)


def parse_config(text: str, overrides: Optional[List[str]] = None) -> BenchmarkConfig:
    """Parse and validate a YAML configuration document"""

    document = _load_document(text)
    if overrides:
        document = apply_overrides(document, overrides)

    try:
        return BenchmarkConfig.model_validate(document)
    except ValidationError as e:
        raise _translate_validation_error(e) from None


def load_config(path: str, overrides: Optional[List[str]] = None) -> BenchmarkConfig:
    """Read and parse a configuration file"""

    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError("syntax", f"cannot read configuration {path}: {e}") from e
    return parse_config(text, overrides)


def dump_config(config: BenchmarkConfig) -> str:
    """Serialize a config back to YAML"""
    return yaml.safe_dump(config.to_dict(), sort_keys=False)
