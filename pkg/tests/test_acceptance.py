"""Acceptance criteria 1-9 at desk scale.

Each test prints one ``criterion N: PASS|FAIL`` line; the lines are repeated in
the pytest terminal summary.  Run standalone with ``python tests/test_acceptance.py``.
Expect several minutes: two 1M-record pipeline runs and a 100-tree forest.
"""
import sys

import numpy as np
import pytest

from citypulse.bench import (
    REFERENCE_LATENCY_MS_PER_100K, REFERENCE_RECORDS, REFERENCE_THROUGHPUT_RPM, Full, PipelineConfig, check_invariants,
    compare_strategies, emit_report, parse_report_csv, run_pipeline,
)
from citypulse.learner import TrainConfig, evaluate, train_congestion_model
from citypulse.stability import StabilityConfig, adjacency_holds, run_stability

import test_datagen
import test_forest
import test_kmeans
import test_mlog
from conftest import ACCEPTANCE_LINES

pytestmark = pytest.mark.slow

DESK_RECORDS = 1_000_000
DESK_CHUNK = 100_000
ML_RECORDS = 200_000
SEED = 42
QUALITY_FLOOR = 0.95
CONFIG = PipelineConfig()


def verdict(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def desk_full(tmp_path_factory):
    return run_pipeline(DESK_RECORDS, Full(), SEED, CONFIG, tmp_path_factory.mktemp("full")).metrics


@pytest.fixture(scope="module")
def desk_comparison(desk_full, tmp_path_factory):
    return compare_strategies(DESK_RECORDS, DESK_CHUNK, SEED, CONFIG, tmp_path_factory.mktemp("cmp"),
                              full_run=desk_full)


@pytest.fixture(scope="module")
def reference_training(tmp_path_factory):
    run = run_pipeline(ML_RECORDS, Full(), SEED, CONFIG, tmp_path_factory.mktemp("ml"))
    return train_congestion_model(run.warehouse.features(), TrainConfig())


@pytest.fixture(scope="module")
def stability_series(reference_training):
    return run_stability(reference_training.model, StabilityConfig())


def test_criterion_1_conservation(desk_full):
    m = desk_full
    ok = m.warehouse_rows + m.dead_letters == DESK_RECORDS and m.final_lag == 0 and not m.failed
    problems = check_invariants(m, CONFIG.broker.queue_capacity)
    verdict(1, ok and not problems,
            f"rows {m.warehouse_rows:,} + dead letters {m.dead_letters} = {m.warehouse_rows + m.dead_letters:,} "
            f"(target {DESK_RECORDS:,}); final lag {m.final_lag}; invariants {problems or 'ok'}")


def test_criterion_2_strategy_equivalence(desk_comparison):
    full, chunked = desk_comparison.full_run, desk_comparison.chunked_run
    bound = DESK_CHUNK + CONFIG.broker.queue_capacity
    same = full.content_hash == chunked.content_hash
    ok = same and chunked.peak_buffer_occupancy <= bound and full.peak_buffer_occupancy >= chunked.peak_buffer_occupancy
    verdict(2, ok,
            f"hash equal {same}; chunked peak {chunked.peak_buffer_occupancy:,} <= {bound:,}; "
            f"full peak {full.peak_buffer_occupancy:,}; time ratio {desk_comparison.time_ratio:.3f} (reported only)")


def test_criterion_3_ml_quality(reference_training):
    report = reference_training.report
    ok = report.accuracy >= QUALITY_FLOOR and report.macro_f1 >= QUALITY_FLOOR
    verdict(3, ok, f"held-out accuracy {report.accuracy:.4f}, macro F1 {report.macro_f1:.4f} "
                   f"(floor {QUALITY_FLOOR}) on {report.total:,} rows")


def test_criterion_4_velocity_dominance(reference_training):
    imp = reference_training.report.feature_importances
    verdict(4, imp[0] > 0.5, "importances v_Vel {:.3f}, v_Acc {:.3f}, Space_Headway {:.3f}, "
                             "Time_Headway {:.3f}".format(*imp))


def test_criterion_5_batch_stability(stability_series):
    f1 = stability_series.macro_f1()
    others = [v for i, v in enumerate(f1, start=1) if i != 14]
    ok = len(f1) == 20 and min(others) >= QUALITY_FLOOR and f1[13] < min(others)
    verdict(5, ok, f"batch 14 macro F1 {f1[13]:.4f}; others min {min(others):.4f}; "
                   f"series minimum at batch {stability_series.worst_batch()}")


def test_criterion_6_adjacent_confusion(stability_series):
    cm = stability_series.combined_confusion
    low_high, low_med, med_high = cm[0, 2] + cm[2, 0], cm[0, 1] + cm[1, 0], cm[1, 2] + cm[2, 1]
    verdict(6, adjacency_holds(cm), f"Low<->High {low_high} vs Low<->Medium {low_med}, Medium<->High {med_high}")


def test_criterion_7_oracle_suites(tmp_path_factory):
    km_misses = test_kmeans.kmeans_oracle_failures(50)
    vote_misses = test_forest.forest_vote_oracle_failures(100)
    worked = evaluate(pred=[0, 2, 2, 2], truth=[0, 0, 2, 2])
    worked_ok = worked.accuracy == 0.75 and abs(worked.macro_f1 - 0.4889) < 1e-4
    test_mlog.test_codec_round_trip()
    test_mlog.test_block_payload_decompresses_to_original()
    test_datagen.test_csv_round_trip_property(tmp_path_factory)
    ok = not km_misses and vote_misses == 0 and worked_ok
    verdict(7, ok, f"kmeans exhaustive misses {len(km_misses)}/50; forest tally misses {vote_misses}/100; "
                   f"worked example macro F1 {worked.macro_f1:.4f}; codec and CSV round-trips held")


def test_criterion_8_broker_properties():
    assert test_mlog.PROPERTY_CASES >= 1000
    checks = [
        test_mlog.test_property_per_partition_fifo,
        test_mlog.test_property_monotone_offsets,
        test_mlog.test_property_lag_identity,
        test_mlog.test_property_retry_with_faults_equivalent,
    ]
    failures = []
    for check in checks:
        try:
            check()
        except AssertionError as exc:
            failures.append(f"{check.__name__}: {exc}")
    verdict(8, not failures, f"{len(checks)} properties x {test_mlog.PROPERTY_CASES} cases; "
                             f"failures {failures or 'none'}")


def test_criterion_9_throughput_report(desk_comparison):
    csv_text = emit_report(desk_comparison, "csv")
    text = emit_report(desk_comparison, "text")
    summary = parse_report_csv(csv_text)[0]["summary"]
    ok = (float(summary["throughput_rpm"]) > 0
          and int(summary["reference_throughput_rpm"]) == REFERENCE_THROUGHPUT_RPM
          and int(summary["reference_records"]) == REFERENCE_RECORDS
          and int(summary["reference_latency_ms_per_100k"]) == REFERENCE_LATENCY_MS_PER_100K
          and "records/min" in text and f"{REFERENCE_THROUGHPUT_RPM:,}" in text)
    full = desk_comparison.full_run
    verdict(9, ok, f"measured {full.throughput_rpm:,.0f} records/min, "
                   f"{full.mean_batch_latency_ms / 1000:.3f} s per 100K "
                   f"(reference ~{REFERENCE_THROUGHPUT_RPM:,} records/min, {REFERENCE_LATENCY_MS_PER_100K / 1000} s)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s", "-p", "no:cacheprovider"]))
