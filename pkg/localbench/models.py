"""
Request, task and telemetry models
"""

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple


class RequestStatus(Enum):
    """Request outcome enumeration"""
    OK = "ok"
    HTTP_ERROR = "http_error"
    STREAM_ERROR = "stream_error"
    EMPTY_OUTPUT = "empty_output"


class TokenCountMethod(Enum):
    """Where N_t came from"""
    USAGE = "usage"
    CHUNKS = "chunks"


@dataclass
class RequestRecord:
    """One streamed chat completion with its timing hooks"""
    seq: int
    instance_id: str
    arrival_time: float
    dispatch_time: float
    first_token_time: Optional[float] = None
    completion_time: Optional[float] = None
    prompt_tokens: Optional[int] = None
    completion_tokens: int = 0
    sentence_count: int = 0
    output_text: str = ""
    status: RequestStatus = RequestStatus.OK
    token_count_method: TokenCountMethod = TokenCountMethod.CHUNKS
    http_status: Optional[int] = None
    error: str = ""
    chunk_times: List[float] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status is RequestStatus.OK

    def shifted(self, origin: float) -> 'RequestRecord':
        """Copy with every timestamp taken relative to origin"""
        shift = lambda t: None if t is None else t - origin
        return replace(
            self,
            arrival_time=self.arrival_time - origin,
            dispatch_time=self.dispatch_time - origin,
            first_token_time=shift(self.first_token_time),
            completion_time=shift(self.completion_time),
            chunk_times=[t - origin for t in self.chunk_times],
        )

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary"""
        return {
            'seq': self.seq,
            'instance_id': self.instance_id,
            'arrival_time': self.arrival_time,
            'dispatch_time': self.dispatch_time,
            'first_token_time': self.first_token_time,
            'completion_time': self.completion_time,
            'prompt_tokens': self.prompt_tokens,
            'completion_tokens': self.completion_tokens,
            'sentence_count': self.sentence_count,
            'output_text': self.output_text,
            'status': self.status.value,
            'token_count_method': self.token_count_method.value,
            'http_status': self.http_status,
            'error': self.error,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RequestRecord':
        """Create from dictionary"""
        return cls(
            seq=data['seq'],
            instance_id=data['instance_id'],
            arrival_time=data['arrival_time'],
            dispatch_time=data['dispatch_time'],
            first_token_time=data.get('first_token_time'),
            completion_time=data.get('completion_time'),
            prompt_tokens=data.get('prompt_tokens'),
            completion_tokens=data.get('completion_tokens', 0),
            sentence_count=data.get('sentence_count', 0),
            output_text=data.get('output_text', ''),
            status=RequestStatus(data.get('status', 'ok')),
            token_count_method=TokenCountMethod(data.get('token_count_method', 'chunks')),
            http_status=data.get('http_status'),
            error=data.get('error', ''),
        )


@dataclass
class ColdStartReport:
    """Cold start decomposition: T_cold = T_startup + T_load + probe TTFT"""
    t_startup_s: float
    t_load_s: float
    probe_ttft_s: float
    t_cold_s: float = 0.0
    attached: bool = False

    def __post_init__(self):
        self.t_cold_s = self.t_startup_s + self.t_load_s + self.probe_ttft_s

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary"""
        return {
            't_startup_s': self.t_startup_s,
            't_load_s': self.t_load_s,
            'probe_ttft_s': self.probe_ttft_s,
            't_cold_s': self.t_cold_s,
            'attached': self.attached,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ColdStartReport':
        """Create from dictionary"""
        return cls(
            t_startup_s=data['t_startup_s'],
            t_load_s=data['t_load_s'],
            probe_ttft_s=data['probe_ttft_s'],
            attached=data.get('attached', False),
        )


@dataclass
class TaskInstance:
    """Rendered prompt plus gold references"""
    id: str
    prompt: str
    references: List[str] = field(default_factory=list)
    aux: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.prompt:
            raise ValueError(f"instance {self.id}: prompt must be non-empty")


@dataclass
class QualityScore:
    """Task quality metric with per-instance values"""
    metric_name: str
    value: float
    per_instance: List[Tuple[str, float]] = field(default_factory=list)

    @classmethod
    def from_values(cls, metric_name: str, per_instance: List[Tuple[str, float]]) -> 'QualityScore':
        """Build a score whose value is the mean of the per-instance values"""
        value = sum(v for _, v in per_instance) / len(per_instance) if per_instance else 0.0
        return cls(metric_name=metric_name, value=value, per_instance=list(per_instance))

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary"""
        return {
            'metric_name': self.metric_name,
            'value': self.value,
            'n': len(self.per_instance),
            'per_instance': [[i, v] for i, v in self.per_instance],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'QualityScore':
        """Create from dictionary"""
        return cls(
            metric_name=data['metric_name'],
            value=data['value'],
            per_instance=[(i, v) for i, v in data.get('per_instance', [])],
        )


@dataclass
class TelemetrySample:
    """One resource reading; None marks an invalid field"""
    t: float
    gpu_mem_mb: Optional[float] = None
    gpu_util_pct: Optional[float] = None
    power_w: Optional[float] = None
    cpu_pct: Optional[float] = None
    ram_mb: Optional[float] = None

    FIELDS = ('gpu_mem_mb', 'gpu_util_pct', 'power_w', 'cpu_pct', 'ram_mb')

    def __post_init__(self):
        for name in self.FIELDS:
            value = getattr(self, name)
            if value is not None and value < 0:
                setattr(self, name, None)
        if self.gpu_util_pct is not None and self.gpu_util_pct > 100:
            self.gpu_util_pct = None

    def valid(self, name: str) -> bool:
        return getattr(self, name) is not None

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary"""
        return {'t': self.t, **{name: getattr(self, name) for name in self.FIELDS}}
