"""Ingestion benchmark: throughput, per-100K latency, consumer lag, full vs chunked pushes."""
from __future__ import annotations

import csv
import io
import math
import os
import shutil
import tempfile
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .datagen import GeneratorConfig, TrafficRecordRaw, generate
from .errors import BackpressureError, ConfigError, InvariantViolation
from .mlog import Broker, BrokerConfig, Consumer, Producer, now_ms
from .streamproc import (
    DEFAULT_FLUSH_THRESHOLD, MicroBatchProcessor, TempStore, Warehouse, encode_record, record_key,
)

TOPIC = "raw-traffic-data"
GROUP = "stream-processor"
LATENCY_UNIT = 100_000
DRAIN_FRACTION = 0.10

# reference figures reported next to measured ones, never asserted
REFERENCE_RECORDS = 11_000_000
REFERENCE_THROUGHPUT_RPM = 320_000
REFERENCE_LATENCY_MS_PER_100K = 3_200
REFERENCE_FULL_VS_CHUNKED_RATIO = 1.10


@dataclass(frozen=True)
class Full:
    name = "full"


@dataclass(frozen=True)
class Chunked:
    chunk_size: int = 500_000
    name = "chunked"

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be positive")


Ingestion = Full | Chunked


@dataclass(frozen=True)
class PipelineConfig:
    broker: BrokerConfig = BrokerConfig()
    consumer_batch_size: int = 500
    flush_threshold: int = DEFAULT_FLUSH_THRESHOLD
    temp_on_disk: bool = True
    lag_interval_s: float = 0.1
    resource_interval_s: float = 0.25
    missing_prob: float = 0.02


@dataclass
class PipelineMetrics:
    strategy: str
    chunk_size: int | None
    records_total: int
    elapsed_ms: float = 0.0
    throughput_rpm: float = 0.0
    batch_latencies_ms: list[int] = field(default_factory=list)
    lag_series: list[tuple[int, int]] = field(default_factory=list)
    peak_buffer_occupancy: int = 0
    resource_samples: list[tuple[int, int]] = field(default_factory=list)
    resource_status: str = "unavailable"
    warehouse_rows: int = 0
    dead_letters: int = 0
    final_lag: int = 0
    content_hash: str = ""
    failed: bool = False
    error: str = ""

    @property
    def mean_batch_latency_ms(self) -> float:
        return float(np.mean(self.batch_latencies_ms)) if self.batch_latencies_ms else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_batch_latency_ms"] = self.mean_batch_latency_ms
        return d


@dataclass
class StressComparison:
    full_run: PipelineMetrics
    chunked_run: PipelineMetrics
    chunk_size: int

    @property
    def time_ratio(self) -> float:
        return self.full_run.elapsed_ms / self.chunked_run.elapsed_ms if self.chunked_run.elapsed_ms else math.nan


@dataclass
class PipelineRun:
    metrics: PipelineMetrics
    warehouse: Warehouse
    processors: list[MicroBatchProcessor]


def throughput_rpm(records: int, elapsed_ms: float) -> float:
    return records / (elapsed_ms / 60_000.0) if elapsed_ms > 0 else 0.0


def batch_latencies(ingest_ts: Sequence[int], commit_ts: Sequence[int], unit: int = LATENCY_UNIT) -> list[int]:
    """max(commit) - min(ingest) over consecutive ``unit``-row slices in commit order."""
    ingest = np.asarray(ingest_ts, dtype=np.int64)
    commit = np.asarray(commit_ts, dtype=np.int64)
    return [int(commit[i:i + unit].max() - ingest[i:i + unit].min()) for i in range(0, len(ingest), unit)]


# -- resource sampling ---------------------------------------------------

def _rss_bytes() -> int | None:
    try:
        with open("/proc/self/statm") as fh:
            return int(fh.read().split()[1]) * os.sysconf("SC_PAGE_SIZE")
    except (OSError, ValueError, IndexError):
        return None


class ResourceSampler:
    """Background resident-memory sampler; ``status`` is "unavailable" where /proc is missing."""

    def __init__(self, interval_s: float = 0.25, probe: Callable[[], int | None] = _rss_bytes,
                 clock: Callable[[], int] = now_ms):
        self.interval_s = interval_s
        self.probe = probe
        self.clock = clock
        self.samples: list[tuple[int, int]] = []
        self.status = "ok" if probe() is not None else "unavailable"
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def _sample(self) -> None:
        value = self.probe()
        if value is not None:
            self.samples.append((self.clock(), value))

    def _loop(self) -> None:
        while not self._stop.wait(self.interval_s):
            self._sample()

    def __enter__(self):
        if self.status == "ok":
            self._sample()
            self._thread = threading.Thread(target=self._loop, daemon=True)
            self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
            self._sample()
        return False


def sample_resources(run: Callable[[], object], interval_s: float = 0.25) -> tuple[object, ResourceSampler]:
    with ResourceSampler(interval_s) as sampler:
        result = run()
    return result, sampler


# -- pipeline ------------------------------------------------------------

class _LagMonitor:
    def __init__(self, broker: Broker, producer: Producer, clock=now_ms):
        self.broker = broker
        self.producer = producer
        self.clock = clock
        self.series: list[tuple[int, int]] = []
        self.peak = 0
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def occupancy(self) -> tuple[int, int]:
        lag = sum(self.broker.lag(GROUP).values())
        return lag, lag + self.producer.pending

    def sample(self) -> int:
        lag, occupancy = self.occupancy()
        with self._lock:
            self.series.append((self.clock(), lag))
            self.peak = max(self.peak, occupancy)
        return lag

    def start(self, interval_s: float) -> None:
        def loop():
            while not self._stop.wait(interval_s):
                self.sample()
        self._thread = threading.Thread(target=loop, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()


def _produce(producer: Producer, records: Sequence[TrafficRecordRaw], monitor: _LagMonitor) -> None:
    batch_size = producer.config.batch_size
    for i, r in enumerate(records, 1):
        producer.produce(TOPIC, record_key(r), encode_record(r))
        if i % batch_size == 0:
            monitor.sample()
    producer.flush()
    monitor.sample()


def run_pipeline(
    total_records: int,
    ingestion: Ingestion = Full(),
    seed: int = 42,
    config: PipelineConfig = PipelineConfig(),
    workdir: str | Path | None = None,
    records: Sequence[TrafficRecordRaw] | None = None,
    labeler: Callable[[np.ndarray], np.ndarray] | None = None,
) -> PipelineRun:
    """Generate, produce, process and warehouse ``total_records`` records.

    Full pushes every record before processing starts.  Chunked pushes
    ``chunk_size`` records, waits until lag falls below 10% of a chunk, and
    repeats; processors run concurrently throughout.
    """
    if total_records < 1:
        raise ConfigError("total_records must be at least 1")
    if records is None:
        records = generate(GeneratorConfig(num_records=total_records, seed=seed,
                                           missing_prob=config.missing_prob))
    elif len(records) != total_records:
        raise ConfigError(f"got {len(records)} records for total_records={total_records}")
    workdir = Path(workdir or tempfile.mkdtemp(prefix="citypulse-run-"))
    if workdir.exists():
        shutil.rmtree(workdir)

    broker = Broker(config.broker)
    broker.create_topic(TOPIC)
    producer = Producer(broker)
    warehouse = Warehouse(workdir / "warehouse")
    processors = [
        MicroBatchProcessor(
            Consumer(broker, GROUP, TOPIC, [p]),
            TempStore(workdir / f"temp-{p}" if config.temp_on_disk else None, config.flush_threshold),
            warehouse, config.consumer_batch_size, labeler)
        for p in range(config.broker.partitions_per_topic)
    ]
    chunked = isinstance(ingestion, Chunked)
    metrics = PipelineMetrics(ingestion.name, ingestion.chunk_size if chunked else None, total_records)
    monitor = _LagMonitor(broker, producer)
    producing_done = threading.Event()
    errors: list[BaseException] = []

    def work(proc: MicroBatchProcessor) -> None:
        try:
            while True:
                staged = proc.process_micro_batch()
                if proc.temp.should_flush:
                    proc.commit_to_warehouse()
                if staged is None and proc.lag() == 0:
                    if producing_done.is_set() and proc.lag() == 0:
                        break
                    time.sleep(0.001)
            proc.commit_to_warehouse()
        except BaseException as exc:  # surfaced after join
            errors.append(exc)

    threads = [threading.Thread(target=work, args=(p,), daemon=True) for p in processors]
    sampler = ResourceSampler(config.resource_interval_s)
    t0 = time.perf_counter()
    with sampler:
        monitor.sample()
        monitor.start(config.lag_interval_s)
        try:
            if chunked:
                for t in threads:
                    t.start()
                threshold = DRAIN_FRACTION * ingestion.chunk_size
                for start in range(0, total_records, ingestion.chunk_size):
                    _produce(producer, records[start:start + ingestion.chunk_size], monitor)
                    while monitor.sample() >= threshold and not errors:
                        time.sleep(0.002)
            else:
                _produce(producer, records, monitor)
                for t in threads:
                    t.start()
        except BackpressureError as exc:
            metrics.failed = True
            metrics.error = f"{ingestion.name}: {type(exc).__name__}: {exc}"
        finally:
            producing_done.set()
            for t in threads:
                if t.ident is None:
                    t.start()
                t.join()
            monitor.sample()
            monitor.stop()
    elapsed = (time.perf_counter() - t0) * 1000.0
    if errors:
        metrics.failed = True
        metrics.error = f"{ingestion.name}: {errors[0]!r}"

    metrics.elapsed_ms = elapsed
    metrics.throughput_rpm = throughput_rpm(total_records, elapsed)
    metrics.batch_latencies_ms = batch_latencies(warehouse.ingest_ts, warehouse.commit_ts)
    metrics.lag_series = list(monitor.series)
    metrics.peak_buffer_occupancy = monitor.peak
    metrics.resource_samples = list(sampler.samples)
    metrics.resource_status = sampler.status
    metrics.warehouse_rows = warehouse.row_count
    metrics.dead_letters = sum(len(p.dead_letters) for p in processors)
    metrics.final_lag = sum(broker.lag(GROUP).values())
    metrics.content_hash = warehouse.content_hash()
    return PipelineRun(metrics, warehouse, processors)


def check_invariants(m: PipelineMetrics, queue_capacity: int | None = None) -> list[str]:
    """Structural properties every completed run must satisfy; returns violations."""
    problems = []
    if m.failed:
        return [f"run failed: {m.error}"]
    if m.warehouse_rows + m.dead_letters != m.records_total:
        problems.append(f"conservation: {m.warehouse_rows} rows + {m.dead_letters} dead letters "
                        f"!= {m.records_total} records")
    if m.final_lag != 0:
        problems.append(f"final lag {m.final_lag} != 0")
    if any(lag < 0 for _, lag in m.lag_series):
        problems.append("negative lag sample")
    if m.lag_series and m.lag_series[-1][1] != 0:
        problems.append("lag series does not end at 0")
    if any(lag > m.records_total for _, lag in m.lag_series):
        problems.append("lag exceeds records produced")
    if len(m.batch_latencies_ms) != math.ceil(m.warehouse_rows / LATENCY_UNIT):
        problems.append("batch latency count does not match 100K units")
    if not math.isclose(m.throughput_rpm, throughput_rpm(m.records_total, m.elapsed_ms)):
        problems.append("throughput does not match records / elapsed")
    if m.chunk_size is not None and queue_capacity is not None:
        if m.peak_buffer_occupancy > m.chunk_size + queue_capacity:
            problems.append(f"chunked occupancy {m.peak_buffer_occupancy} exceeds chunk + capacity")
    return problems


def compare_strategies(total_records: int, chunk_size: int = 500_000, seed: int = 42,
                       config: PipelineConfig = PipelineConfig(), workdir: str | Path | None = None,
                       full_run: PipelineMetrics | None = None) -> StressComparison:
    """Run Full and Chunked over identical data; ``full_run`` reuses an earlier Full run of the same seed."""
    if total_records < 2 * chunk_size:
        raise ConfigError("total_records must be at least two chunks for a meaningful comparison")
    base = Path(workdir or tempfile.mkdtemp(prefix="citypulse-cmp-"))
    records = generate(GeneratorConfig(num_records=total_records, seed=seed, missing_prob=config.missing_prob))
    if full_run is None:
        full_run = run_pipeline(total_records, Full(), seed, config, base / "full", records).metrics
    chunked = run_pipeline(total_records, Chunked(chunk_size), seed, config, base / "chunked", records).metrics
    comparison = StressComparison(full_run, chunked, chunk_size)
    for run in (full_run, chunked):
        if run.failed:
            raise InvariantViolation(f"{run.strategy} run failed: {run.error}")
    if full_run.content_hash != chunked.content_hash:
        raise InvariantViolation("full and chunked ingestion produced different warehouse content")
    if full_run.peak_buffer_occupancy < chunked.peak_buffer_occupancy:
        raise InvariantViolation("full ingestion peaked below chunked ingestion")
    return comparison


# -- reports -------------------------------------------------------------

def _summary_rows(m: PipelineMetrics) -> list[tuple[str, object]]:
    return [
        ("strategy", m.strategy),
        ("chunk_size", "" if m.chunk_size is None else m.chunk_size),
        ("records_total", m.records_total),
        ("elapsed_ms", repr(float(m.elapsed_ms))),
        ("throughput_rpm", repr(float(m.throughput_rpm))),
        ("mean_batch_latency_ms", repr(m.mean_batch_latency_ms)),
        ("peak_buffer_occupancy", m.peak_buffer_occupancy),
        ("warehouse_rows", m.warehouse_rows),
        ("dead_letters", m.dead_letters),
        ("final_lag", m.final_lag),
        ("content_hash", m.content_hash),
        ("resource_status", m.resource_status),
        ("failed", int(m.failed)),
        ("error", m.error),
        ("reference_records", REFERENCE_RECORDS),
        ("reference_throughput_rpm", REFERENCE_THROUGHPUT_RPM),
        ("reference_latency_ms_per_100k", REFERENCE_LATENCY_MS_PER_100K),
    ]


def _metrics_csv(m: PipelineMetrics, w) -> None:
    w.writerow(["# summary"])
    w.writerow(["key", "value"])
    w.writerows(_summary_rows(m))
    w.writerow(["# batch_latency"])
    w.writerow(["unit", "latency_ms"])
    w.writerows(enumerate(m.batch_latencies_ms))
    w.writerow(["# lag"])
    w.writerow(["timestamp_ms", "total_lag"])
    w.writerows(m.lag_series)
    w.writerow(["# resources"])
    w.writerow(["timestamp_ms", "rss_bytes"])
    w.writerows(m.resource_samples)


def _metrics_text(m: PipelineMetrics) -> list[str]:
    label = m.strategy + (f" (chunks of {m.chunk_size:,})" if m.chunk_size else "")
    lines = [
        f"Ingestion: {label}",
        f"  Total Records Processed:  {m.records_total:,}   (reference run: {REFERENCE_RECORDS:,})",
        f"  Peak Throughput:          {m.throughput_rpm:,.0f} records/min   (reference: ~{REFERENCE_THROUGHPUT_RPM:,})",
        f"  Average Batch Latency:    {m.mean_batch_latency_ms / 1000:.3f} s per {LATENCY_UNIT:,} records"
        f"   (reference: {REFERENCE_LATENCY_MS_PER_100K / 1000:.1f} s)",
        f"  Elapsed:                  {m.elapsed_ms / 1000:.2f} s",
        f"  Peak buffer occupancy:    {m.peak_buffer_occupancy:,} records",
        f"  Warehouse rows:           {m.warehouse_rows:,} (+{m.dead_letters} dead letters)",
        f"  Final consumer lag:       {m.final_lag}",
        f"  Content hash:             {m.content_hash}",
    ]
    if m.resource_status == "ok" and m.resource_samples:
        peak = max(v for _, v in m.resource_samples)
        lines.append(f"  Peak resident memory:     {peak / 2**20:,.1f} MiB")
    else:
        lines.append("  Resident memory:          unavailable")
    if m.failed:
        lines.append(f"  FAILED: {m.error}")
    return lines


def emit_report(result: PipelineMetrics | StressComparison, format: str = "text") -> str:
    if format not in ("text", "csv"):
        raise ConfigError(f"unknown report format {format!r}")
    runs = [result] if isinstance(result, PipelineMetrics) else [result.full_run, result.chunked_run]
    if format == "text":
        lines = []
        for m in runs:
            lines += _metrics_text(m) + [""]
        if isinstance(result, StressComparison):
            lines.append(f"Full / chunked time ratio: {result.time_ratio:.3f}   "
                         f"(reference: {REFERENCE_FULL_VS_CHUNKED_RATIO:.2f}, hardware dependent)")
        return "\n".join(lines).rstrip() + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for i, m in enumerate(runs):
        w.writerow([f"# run {i}"])
        _metrics_csv(m, w)
    if isinstance(result, StressComparison):
        w.writerow(["# comparison"])
        w.writerow(["key", "value"])
        w.writerow(["time_ratio", repr(result.time_ratio)])
        w.writerow(["reference_time_ratio", REFERENCE_FULL_VS_CHUNKED_RATIO])
    return buf.getvalue()


def parse_report_csv(text: str) -> list[dict]:
    """Inverse of the CSV report: one dict per run with summary, batch_latency, lag, resources."""
    runs: list[dict] = []
    section = None
    header_pending = False
    for row in csv.reader(io.StringIO(text)):
        if len(row) == 1 and row[0].startswith("# "):
            section = row[0][2:]
            if section.startswith("run "):
                runs.append({"summary": {}, "batch_latency": [], "lag": [], "resources": []})
                section = None
            header_pending = section is not None
            continue
        if header_pending:
            header_pending = False
            continue
        if section == "summary":
            runs[-1]["summary"][row[0]] = row[1]
        elif section == "batch_latency":
            runs[-1]["batch_latency"].append(int(row[1]))
        elif section in ("lag", "resources"):
            runs[-1][section].append((int(row[0]), int(row[1])))
        elif section == "comparison":
            runs[-1].setdefault("comparison", {})[row[0]] = row[1]
    return runs
