import json
import re

import pytest

from citypulse.cli import (
    EXIT_BACKPRESSURE, EXIT_CONFIG, EXIT_INSUFFICIENT, EXIT_OK, EXIT_STORAGE, EXIT_USAGE, main,
)
from citypulse.config import Settings, load_settings
from citypulse.errors import ConfigError


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def hash_in(text):
    return re.search(r"[Cc]ontent hash:?\s+([0-9a-f]{64})", text).group(1)


def test_no_args_is_usage(capsys):
    code, _, err = run(capsys)
    assert code == EXIT_USAGE and "usage" in err


def test_unknown_flag_is_usage(capsys):
    code, _, err = run(capsys, "generate", "--bogus")
    assert code == EXIT_USAGE and "usage" in err


def test_generate_writes_rows(tmp_path, capsys):
    out = tmp_path / "d.csv"
    assert run(capsys, "generate", "--records", 1000, "--seed", 42, "--out", out)[0] == EXIT_OK
    assert len(out.read_text().splitlines()) == 1001


def test_chained_commands_equal_single_bench_run(tmp_path, capsys):
    data, log, wh = tmp_path / "d.csv", tmp_path / "log", tmp_path / "wh"
    assert run(capsys, "generate", "--records", 6000, "--seed", 42, "--out", data)[0] == EXIT_OK
    assert run(capsys, "ingest", "--input", data, "--log", log)[0] == EXIT_OK
    code, processed, _ = run(capsys, "process", "--log", log, "--warehouse", wh)
    assert code == EXIT_OK and "committed 6000 rows" in processed
    report = tmp_path / "r.csv"
    code, bench, _ = run(capsys, "bench", "--records", 6000, "--seed", 42, "--strategy", "chunked",
                         "--chunk-size", 2000, "--workdir", tmp_path / "b", "--report", report,
                         "--metrics-json", tmp_path / "m.json")
    assert code == EXIT_OK
    assert hash_in(processed) == hash_in(bench)
    assert "throughput_rpm" in report.read_text()
    assert json.loads((tmp_path / "m.json").read_text())["warehouse_rows"] == 6000
    code, again, _ = run(capsys, "process", "--log", log, "--warehouse", wh)
    assert "committed 0 rows" in again and hash_in(again) == hash_in(processed)


def test_train_evaluate_and_labelled_process(tmp_path, capsys):
    data = tmp_path / "d.csv"
    run(capsys, "generate", "--records", 3000, "--seed", 1, "--out", data)
    model = tmp_path / "m.npz"
    code, out, _ = run(capsys, "train", "--input", data, "--model-out", model, "--trees", 5,
                       "--report", tmp_path / "train.csv")
    assert code == EXIT_OK and "macro F1" in out
    run(capsys, "ingest", "--input", data, "--log", tmp_path / "log")
    code, out, _ = run(capsys, "process", "--log", tmp_path / "log", "--warehouse", tmp_path / "wh",
                       "--model", model)
    assert code == EXIT_OK and "Unlabeled" not in out
    code, out, _ = run(capsys, "evaluate", "--model", model, "--warehouse", tmp_path / "wh")
    assert code == EXIT_OK and "accuracy" in out
    code, out, _ = run(capsys, "train", "--warehouse", tmp_path / "wh", "--model-out", tmp_path / "m2.npz",
                       "--trees", 3)
    assert code == EXIT_OK


def test_config_file_overrides(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"generator": {"num_records": 12, "missing_prob": 0.0}}))
    out = tmp_path / "d.csv"
    assert run(capsys, "--config", cfg, "generate", "--out", out)[0] == EXIT_OK
    assert len(out.read_text().splitlines()) == 13


@pytest.mark.parametrize("content", ["{not json", '{"broker": {"partitions": 3}}', '{"extra": {}}',
                                     '{"broker": {"partitions_per_topic": 0}}'])
def test_config_errors_exit_code(tmp_path, capsys, content):
    cfg = tmp_path / "c.json"
    cfg.write_text(content)
    assert run(capsys, "--config", cfg, "generate", "--out", tmp_path / "d.csv")[0] == EXIT_CONFIG


def test_storage_and_parse_exit_code(tmp_path, capsys):
    assert run(capsys, "ingest", "--input", tmp_path / "missing.csv", "--log", tmp_path / "l")[0] == EXIT_STORAGE
    bad = tmp_path / "bad.csv"
    bad.write_text("nope\n")
    assert run(capsys, "ingest", "--input", bad, "--log", tmp_path / "l")[0] == EXIT_STORAGE


def test_backpressure_exit_code(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"broker": {"queue_capacity": 500, "max_retries": 0}}))
    code, _, err = run(capsys, "--config", cfg, "bench", "--records", 3000, "--workdir", tmp_path / "w")
    assert code == EXIT_BACKPRESSURE and "Backpressure" in err


def test_insufficient_data_exit_code(tmp_path, capsys):
    data = tmp_path / "d.csv"
    run(capsys, "generate", "--records", 2, "--out", data)
    assert run(capsys, "train", "--input", data, "--model-out", tmp_path / "m.npz")[0] == EXIT_INSUFFICIENT


def test_settings_defaults_and_tuples(tmp_path):
    assert load_settings(None) == Settings()
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"learner": {"cluster_features": ["v_vel", "v_acc"]},
                               "bench": {"records": 10}, "stream": {"consumer_batch_size": 50}}))
    s = load_settings(cfg)
    assert s.learner.cluster_features == ("v_vel", "v_acc")
    assert s.bench.records == 10
    assert s.pipeline().consumer_batch_size == 50 and s.pipeline().broker == s.broker
    cfg.write_text(json.dumps({"stream": {"broker": {}}}))
    with pytest.raises(ConfigError):
        load_settings(cfg)


def test_evaluate_stability_from_config(tmp_path, capsys):
    data, model = tmp_path / "d.csv", tmp_path / "m.npz"
    run(capsys, "generate", "--records", 5000, "--seed", 3, "--out", data)
    run(capsys, "train", "--input", data, "--model-out", model, "--trees", 5)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"stability": {"n_batches": 4, "batch_size": 1000, "noisy_batch": 2}}))
    code, out, _ = run(capsys, "--config", cfg, "evaluate", "--model", model, "--stability",
                       "--report", tmp_path / "s.csv")
    assert code == EXIT_OK
    assert "lowest macro F1 in batch 2" in out
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 5
