"""
Resource telemetry: pluggable GPU providers, backend process sampling and a background sampler
"""

import logging
import shlex
import subprocess
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional

import pandas as pd
import psutil

from localbench.config import TelemetrySpec
from localbench.models import TelemetrySample
from localbench.utils.clock import now

logger = logging.getLogger(__name__)

MIB_TO_MB = 1.048576
TRACE_COLUMNS = ("t_s", "mem_mb", "util_pct", "power_w", "cpu_pct", "ram_mb")
_TRACE_TO_SAMPLE = {
    "mem_mb": "gpu_mem_mb",
    "util_pct": "gpu_util_pct",
    "power_w": "power_w",
    "cpu_pct": "cpu_pct",
    "ram_mb": "ram_mb",
}

Reading = Dict[str, Optional[float]]


class TelemetryError(Exception):
    """Provider could not be initialized"""


class TraceExhausted(Exception):
    """Replay provider has no more rows"""


class NullProvider:
    """No hardware readings; the series still records ticks"""
    label = "null"

    def read(self) -> Reading:
        return {}

    def close(self) -> None:
        pass


def _parse_number(text: str) -> Optional[float]:
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        # "[N/A]", "[Not Supported]" and the like
        return None


class CommandProvider:
    """Runs a GPU management CLI printing 'mem,util,power' per invocation.

    Utilization is whatever the command reports; the shipped nvidia-smi query forwards
    utilization.gpu, the SM busy fraction over the driver's last sample period.
    """
    label = "command"

    def __init__(self, command: str, mem_unit: str = "MB", timeout_s: float = 5.0):
        self.argv = shlex.split(command)
        self.mem_scale = MIB_TO_MB if mem_unit == "MiB" else 1.0
        self.timeout_s = timeout_s
        self._failures = 0

    def parse(self, output: str) -> Reading:
        lines = [line for line in output.splitlines() if line.strip()]
        if not lines:
            raise ValueError("command printed nothing")
        values = [_parse_number(part) for part in lines[0].split(",")]
        if len(values) < 3:
            raise ValueError(f"expected 'mem,util,power', got {lines[0]!r}")
        mem, util, power = values[:3]
        return {
            "gpu_mem_mb": mem * self.mem_scale if mem is not None else None,
            "gpu_util_pct": util,
            "power_w": power,
        }

    def read(self) -> Reading:
        result = subprocess.run(self.argv, capture_output=True, text=True, timeout=self.timeout_s, check=True)
        return self.parse(result.stdout)

    def close(self) -> None:
        pass


class ReplayProvider:
    """Replays a recorded trace, one row per tick"""
    label = "replay"

    def __init__(self, rows: List[Reading]):
        self._rows: Iterator[Reading] = iter(rows)

    def read(self) -> Reading:
        try:
            return next(self._rows)
        except StopIteration:
            raise TraceExhausted() from None

    def close(self) -> None:
        pass


class NvmlProvider:
    """Direct management-library readings (optional pynvml extra)"""
    label = "nvml"

    def __init__(self, gpu_index: int = 0):
        try:
            import pynvml
        except ImportError as e:
            raise TelemetryError("telemetry provider 'nvml' needs the pynvml package (pip install localbench[nvml])") from e
        self._nvml = pynvml
        try:
            pynvml.nvmlInit()
            self._handle = pynvml.nvmlDeviceGetHandleByIndex(gpu_index)
        except pynvml.NVMLError as e:
            raise TelemetryError(f"NVML initialization failed: {e}") from e

    def read(self) -> Reading:
        memory = self._nvml.nvmlDeviceGetMemoryInfo(self._handle)
        utilization = self._nvml.nvmlDeviceGetUtilizationRates(self._handle)
        power_mw = self._nvml.nvmlDeviceGetPowerUsage(self._handle)
        return {
            "gpu_mem_mb": memory.used / 1e6,
            "gpu_util_pct": float(utilization.gpu),
            "power_w": power_mw / 1000.0,
        }

    def close(self) -> None:
        try:
            self._nvml.nvmlShutdown()
        except self._nvml.NVMLError:
            pass


def load_trace(path: str) -> List[Reading]:
    """Read a replay trace CSV (header t_s,mem_mb,util_pct,power_w,cpu_pct,ram_mb)"""

    frame = pd.read_csv(path)
    missing = [c for c in TRACE_COLUMNS if c not in frame.columns]
    if missing:
        raise TelemetryError(f"trace {path} lacks columns: {', '.join(missing)}")
    frame = frame.sort_values("t_s", kind="stable")

    rows = []
    for record in frame.to_dict(orient="records"):
        rows.append({
            sample_field: None if pd.isna(record[column]) else float(record[column])
            for column, sample_field in _TRACE_TO_SAMPLE.items()
        })
    return rows


def make_provider(spec: TelemetrySpec):
    if spec.provider == "command":
        return CommandProvider(spec.command, spec.mem_unit)
    if spec.provider == "replay":
        return ReplayProvider(load_trace(spec.trace_path))
    if spec.provider == "nvml":
        return NvmlProvider(spec.gpu_index)
    return NullProvider()


class ProcessTreeMonitor:
    """CPU and RSS of a process and all its descendants"""

    def __init__(self, pid: int):
        self.root = psutil.Process(pid)
        self._procs: Dict[int, psutil.Process] = {}

    def read(self) -> Reading:
        try:
            current = [self.root] + self.root.children(recursive=True)
        except psutil.NoSuchProcess:
            return {}

        cpu = 0.0
        rss = 0
        alive = {}
        for proc in current:
            # reuse handles: cpu_percent is measured since the previous call on the same object
            proc = self._procs.get(proc.pid, proc)
            try:
                cpu += proc.cpu_percent(None)
                rss += proc.memory_info().rss
            except (psutil.NoSuchProcess, psutil.AccessDenied):
                continue
            alive[proc.pid] = proc
        self._procs = alive
        return {"cpu_pct": cpu, "ram_mb": rss / 1e6}


@dataclass
class TelemetrySeries:
    """Ordered samples from one sampler"""
    samples: List[TelemetrySample] = field(default_factory=list)
    interval_s: float = 0.1
    provider: str = "null"

    def window(self, t0: float, t1: float) -> "TelemetrySeries":
        return window(self, t0, t1)

    def values(self, name: str) -> List[float]:
        """Valid readings of one field"""
        return [getattr(s, name) for s in self.samples if s.valid(name)]

    def shifted(self, origin: float) -> "TelemetrySeries":
        """Copy with sample times taken relative to origin"""
        return TelemetrySeries(
            samples=[replace(s, t=s.t - origin) for s in self.samples],
            interval_s=self.interval_s,
            provider=self.provider,
        )

    def to_frame(self) -> pd.DataFrame:
        """Samples in the replay trace layout"""
        rows = [{"t_s": s.t, **{column: getattr(s, name) for column, name in _TRACE_TO_SAMPLE.items()}}
                for s in self.samples]
        return pd.DataFrame(rows, columns=list(TRACE_COLUMNS))


def write_series(series: TelemetrySeries, path: Path) -> None:
    """Persist a series as CSV; the file doubles as a replay trace"""
    series.to_frame().to_csv(path, index=False)


def read_series(path: str, interval_s: float = 0.1, provider: str = "replay") -> TelemetrySeries:
    """Load a series written by write_series, keeping exact sample times"""

    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise TelemetryError(f"cannot read telemetry series {path}: {e}") from e
    missing = [c for c in TRACE_COLUMNS if c not in frame.columns]
    if missing:
        raise TelemetryError(f"telemetry series {path} lacks columns: {', '.join(missing)}")

    samples = []
    for record in frame.to_dict(orient="records"):
        values = {name: None if pd.isna(record[column]) else float(record[column])
                  for column, name in _TRACE_TO_SAMPLE.items()}
        samples.append(TelemetrySample(t=float(record["t_s"]), **values))
    return TelemetrySeries(samples=samples, interval_s=interval_s, provider=provider)


def window(series: TelemetrySeries, t0: float, t1: float) -> TelemetrySeries:
    """Samples with t0 <= t <= t1 (closed interval)"""
    return TelemetrySeries(
        samples=[s for s in series.samples if t0 <= s.t <= t1],
        interval_s=series.interval_s,
        provider=series.provider,
    )


class TelemetrySampler:
    """Background thread appending one sample per interval"""

    def __init__(self, provider, interval_s: float, process: Optional[ProcessTreeMonitor] = None):
        self.provider = provider
        self.interval_s = interval_s
        self.process = process
        self.series = TelemetrySeries(interval_s=interval_s, provider=provider.label)
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self._warned = False

    def start(self) -> "TelemetrySampler":
        self._thread = threading.Thread(target=self._loop, name="telemetry-sampler", daemon=True)
        self._thread.start()
        logger.info(f"telemetry sampler started ({self.provider.label}, every {self.interval_s * 1000:.0f} ms)")
        return self

    def _take(self) -> Optional[TelemetrySample]:
        t = now()
        try:
            reading = dict(self.provider.read())
        except TraceExhausted:
            return None
        except Exception as e:
            if not self._warned:
                logger.warning(f"telemetry provider {self.provider.label} failed, marking samples invalid: {e}")
                self._warned = True
            reading = {}
        if self.process is not None:
            reading.update(self.process.read())
        return TelemetrySample(t=t, **{k: v for k, v in reading.items() if k in TelemetrySample.FIELDS})

    def _loop(self) -> None:
        next_tick = now()
        while not self._stop.is_set():
            sample = self._take()
            if sample is None:
                logger.info("telemetry trace exhausted")
                break
            if not self.series.samples or sample.t > self.series.samples[-1].t:
                self.series.samples.append(sample)

            next_tick += self.interval_s
            delay = next_tick - now()
            if delay < 0:
                # fell behind; restart the grid instead of bursting
                next_tick = now()
                delay = 0
            self._stop.wait(delay)

    def stop(self) -> TelemetrySeries:
        """Stop sampling and return the series; safe to call more than once"""
        if self._thread is not None:
            self._stop.set()
            self._thread.join()
            self._thread = None
            self.provider.close()
            logger.info(f"telemetry sampler stopped with {len(self.series.samples)} samples")
        return self.series


def start_sampler(provider, interval_s: float, process: Optional[ProcessTreeMonitor] = None) -> TelemetrySampler:
    """Begin background sampling on the shared monotonic clock"""
    return TelemetrySampler(provider, interval_s, process).start()
