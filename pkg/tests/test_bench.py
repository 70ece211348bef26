import math
import time

import numpy as np
import pytest

from citypulse.bench import (
    LATENCY_UNIT, REFERENCE_THROUGHPUT_RPM, Chunked, Full, PipelineConfig, PipelineMetrics, ResourceSampler,
    batch_latencies, check_invariants, compare_strategies, emit_report, parse_report_csv, run_pipeline,
    throughput_rpm,
)
from citypulse.errors import ConfigError
from citypulse.mlog import BrokerConfig

FAST = PipelineConfig(flush_threshold=5_000, lag_interval_s=0.02, resource_interval_s=0.05)


@pytest.fixture(scope="module")
def comparison(tmp_path_factory):
    return compare_strategies(20_000, chunk_size=5_000, seed=42, config=FAST,
                              workdir=tmp_path_factory.mktemp("cmp"))


def test_throughput_identity():
    assert throughput_rpm(320_000, 60_000) == 320_000
    assert throughput_rpm(10, 0) == 0.0


def test_latency_units_use_ceiling():
    ingest = np.arange(250_000)
    commit = ingest + 7
    lat = batch_latencies(ingest, commit)
    assert len(lat) == 3
    assert lat == [LATENCY_UNIT - 1 + 7, LATENCY_UNIT - 1 + 7, 50_000 - 1 + 7]


def test_zero_records_rejected():
    with pytest.raises(ConfigError):
        run_pipeline(0)
    with pytest.raises(ConfigError):
        Chunked(0)


def test_strategies_equivalent(comparison):
    full, chunked = comparison.full_run, comparison.chunked_run
    assert full.content_hash == chunked.content_hash
    assert full.peak_buffer_occupancy >= chunked.peak_buffer_occupancy
    assert chunked.peak_buffer_occupancy <= 5_000 + FAST.broker.queue_capacity
    for m in (full, chunked):
        assert check_invariants(m, FAST.broker.queue_capacity) == []
        assert m.warehouse_rows + m.dead_letters == 20_000
        assert m.lag_series[0][1] >= 0 and m.lag_series[-1][1] == 0
        assert all(lag <= 20_000 for _, lag in m.lag_series)
        ts = [t for t, _ in m.lag_series]
        assert ts == sorted(ts)
    assert full.peak_buffer_occupancy == 20_000


def test_metrics_identities(comparison):
    m = comparison.full_run
    assert m.throughput_rpm == throughput_rpm(m.records_total, m.elapsed_ms)
    assert m.mean_batch_latency_ms == np.mean(m.batch_latencies_ms)


def test_report_round_trip_and_reference_figures(comparison):
    text = emit_report(comparison, "csv")
    runs = parse_report_csv(text)
    assert len(runs) == 2
    for parsed, m in zip(runs, (comparison.full_run, comparison.chunked_run)):
        assert float(parsed["summary"]["throughput_rpm"]) == m.throughput_rpm
        assert parsed["batch_latency"] == m.batch_latencies_ms
        assert parsed["lag"] == [tuple(x) for x in m.lag_series]
        assert int(parsed["summary"]["reference_throughput_rpm"]) == REFERENCE_THROUGHPUT_RPM
    assert float(runs[-1]["comparison"]["time_ratio"]) == comparison.time_ratio
    human = emit_report(comparison, "text")
    assert "records/min" in human and "320,000" in human
    mean_col = np.mean(runs[0]["batch_latency"]) / 1000
    assert f"{mean_col:.3f} s per 100,000 records" in human


def test_empty_lag_series_is_header_only():
    m = PipelineMetrics("full", None, 1)
    runs = parse_report_csv(emit_report(m, "csv"))
    assert runs[0]["lag"] == []
    assert "# lag\ntimestamp_ms,total_lag\n# resources" in emit_report(m, "csv")
    with pytest.raises(ConfigError):
        emit_report(m, "xml")


def test_backpressure_yields_failed_partial_metrics(tmp_path):
    tight = PipelineConfig(broker=BrokerConfig(queue_capacity=1_000, max_retries=1, retry_backoff_ms=0))
    m = run_pipeline(5_000, Full(), seed=1, config=tight, workdir=tmp_path).metrics
    assert m.failed and "BackpressureError" in m.error
    assert check_invariants(m)[0].startswith("run failed")


def test_chunked_survives_capacity_below_total(tmp_path):
    config = PipelineConfig(broker=BrokerConfig(queue_capacity=3_000), flush_threshold=1_000)
    m = run_pipeline(8_000, Chunked(2_000), seed=2, config=config, workdir=tmp_path).metrics
    assert check_invariants(m, 3_000) == []


def test_sampler_unavailable_platform():
    with ResourceSampler(0.01, probe=lambda: None) as sampler:
        time.sleep(0.05)
    assert sampler.status == "unavailable" and sampler.samples == []


def test_sampler_timing():
    start = time.monotonic()
    with ResourceSampler(0.05) as sampler:
        time.sleep(0.5)
    elapsed = time.monotonic() - start
    ts = [t for t, _ in sampler.samples]
    assert sampler.status == "ok"
    assert ts == sorted(ts)
    expected = elapsed / 0.05
    assert expected - 1 <= len(ts) <= expected + 1
