import json
import math
import threading
import urllib.error
import urllib.request
from collections import Counter

import numpy as np
import pytest

from citypulse.bench import Full, PipelineConfig, run_pipeline
from citypulse.datagen import GeneratorConfig, generate
from citypulse.learner import TrainConfig, rf_predict, train_congestion_model
from citypulse.serve import CityPulseService, RoadDirectory, ServiceError, make_server
from citypulse.streamproc import TempStore, Warehouse, aggregate_by_lane, clean, feature_matrix

from oracles import scan_warehouse_csv

FEATURES = {"v_Vel": 3.0, "v_Acc": -0.2, "Space_Headway": 7.0, "Time_Headway": 2.3}


@pytest.fixture(scope="module")
def model():
    X = feature_matrix(clean(r) for r in generate(GeneratorConfig(num_records=20_000, seed=42)))
    return train_congestion_model(X, TrainConfig(n_trees=15)).model


@pytest.fixture(scope="module")
def labeled_run(model, tmp_path_factory):
    config = PipelineConfig(flush_threshold=20_000)
    return run_pipeline(100_000, Full(), seed=42, config=config,
                        workdir=tmp_path_factory.mktemp("labeled"), labeler=model.labeler.label)


@pytest.fixture
def http(model):
    service = CityPulseService(model=model)
    server = make_server(service, port=0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{server.server_address[1]}"

    def call(method, path, body=None):
        data = None if body is None else (body if isinstance(body, bytes) else json.dumps(body).encode())
        req = urllib.request.Request(base + path, data=data, method=method)
        try:
            with urllib.request.urlopen(req) as resp:
                return resp.status, json.loads(resp.read())
        except urllib.error.HTTPError as err:
            return err.code, json.loads(err.read())

    yield service, call
    server.shutdown()
    server.server_close()


def test_road_directory_is_total():
    roads = RoadDirectory.load()
    for lane in [-1, *range(1, 9)]:
        for section in [-1, *range(1, 21)]:
            assert roads.lookup(lane, section).road
    assert roads.lookup(-1, -1).road == "Unknown Road"
    assert roads.lookup(1, 3).city == "Douala"
    assert roads.lookup(1, 13).city == "Yaounde"


def test_predict_matches_direct_forest(http, model):
    _, call = http
    status, body = call("POST", "/predict", FEATURES)
    assert status == 200
    direct = rf_predict(model.forest, np.array(list(FEATURES.values())))
    assert body["Congestion_Label"] == direct.name == "High"
    assert math.isclose(sum(body["votes"].values()), 1.0, abs_tol=1e-9)


def test_predict_with_location(http):
    _, call = http
    status, body = call("POST", "/predict", {**FEATURES, "Lane_ID": 2, "Section_ID": 4})
    assert status == 200 and body["Road"] == "Avenue 4, Douala"


@pytest.mark.parametrize("body,field", [
    ({k: v for k, v in FEATURES.items() if k != "v_Acc"}, "v_Acc"),
    ({**FEATURES, "v_Vel": None}, "v_Vel"),
    ({**FEATURES, "Time_Headway": "slow"}, "Time_Headway"),
])
def test_predict_validation(http, body, field):
    _, call = http
    status, err = call("POST", "/predict", body)
    assert status == 400 and err["field"] == field


def test_predict_nan_and_bad_json(http):
    _, call = http
    status, err = call("POST", "/predict", b'{"v_Vel": NaN, "v_Acc": 0, "Space_Headway": 1, "Time_Headway": 1}')
    assert status == 400 and err["field"] == "v_Vel"
    assert call("POST", "/predict", b"{oops")[0] == 400
    assert call("GET", "/nowhere")[0] == 404


def test_predict_without_model():
    with pytest.raises(ServiceError) as info:
        CityPulseService().predict(FEATURES)
    assert info.value.status == 503


def test_health_and_metrics_lifecycle(http):
    service, call = http
    assert call("GET", "/health") == (200, {"status": "ok", "model_loaded": True, "warehouse_rows": 0})
    assert call("GET", "/metrics") == (200, {"status": "no runs"})
    service.board.publish({"throughput_rpm": 123.0})
    assert call("GET", "/metrics") == (200, {"throughput_rpm": 123.0})


def test_metrics_poll_sees_only_completed_runs(tmp_path):
    service = CityPulseService()
    first = run_pipeline(2_000, Full(), seed=1, workdir=tmp_path / "a").metrics.to_dict()
    service.board.publish(first)
    done = threading.Event()

    def second_run():
        m = run_pipeline(20_000, Full(), seed=2, workdir=tmp_path / "b").metrics
        service.board.publish(m.to_dict())
        done.set()

    worker = threading.Thread(target=second_run)
    worker.start()
    seen = []
    while not done.is_set():
        seen.append(service.metrics()["records_total"])
    worker.join()
    seen.append(service.metrics()["records_total"])
    assert set(seen) <= {2_000, 20_000}
    assert seen[0] == 2_000 and seen[-1] == 20_000


def test_congestion_empty_and_single_lane(tmp_path, http):
    assert CityPulseService(warehouse=Warehouse(tmp_path / "e")).congestion() == []
    records = [clean(r) for r in generate(GeneratorConfig(num_records=200, seed=3, missing_prob=0.0, lanes=1))]
    records = [r for r in records if r.section_id == 5]
    temp = TempStore()
    temp.stage("b", records)
    wh = Warehouse(tmp_path / "one")
    wh.commit(temp.batches)
    (entry,) = CityPulseService(warehouse=wh).congestion()
    assert sum(entry["counts"].values()) == len(records) == entry["records"]
    assert entry["counts"]["Unlabeled"] == len(records)


def test_congestion_matches_scan_oracle(labeled_run, http):
    wh = labeled_run.warehouse
    service, call = http
    service.warehouse = wh
    status, summary = call("GET", "/congestion")
    assert status == 200
    rows = scan_warehouse_csv(wh.data_path)
    brute = Counter((int(r["Lane_ID"]), int(r["Section_ID"]), r["Congestion_Label"]) for r in rows)
    for entry in summary:
        for label, n in entry["counts"].items():
            assert brute[(entry["Lane_ID"], entry["Section_ID"], label)] == n
    assert sum(sum(e["counts"].values()) for e in summary) == wh.row_count == 100_000
    lanes = aggregate_by_lane(wh).lanes
    for lane, stats in lanes.items():
        entries = [e for e in summary if e["Lane_ID"] == lane]
        assert sum(e["records"] for e in entries) == stats.count
        weighted = math.fsum(e["mean_v_Vel"] * e["records"] for e in entries) / stats.count
        assert math.isclose(weighted, stats.mean_v_vel, rel_tol=1e-9)
    status, filtered = call("GET", "/congestion?lane=3&section=7")
    assert status == 200 and len(filtered) == 1 and filtered[0]["Road"] == "Avenue 7, Douala"
    assert call("GET", "/congestion?lane=x")[0] == 400


def test_unlabeled_rows_use_model_labeler(tmp_path, model):
    records = [clean(r) for r in generate(GeneratorConfig(num_records=300, seed=4))]
    temp = TempStore()
    temp.stage("b", records)
    wh = Warehouse(tmp_path)
    wh.commit(temp.batches)
    summary = CityPulseService(model=model, warehouse=wh).congestion()
    expected = Counter(model.labeler.label(feature_matrix(records)).tolist())
    totals = Counter()
    for e in summary:
        for name, n in e["counts"].items():
            totals[name] += n
    assert totals == Counter({["Low", "Medium", "High"][k]: v for k, v in expected.items()})


def test_model_hot_swap(tmp_path, model):
    service = CityPulseService()
    path = tmp_path / "m.npz"
    model.save(path)
    service.load_model(path)
    assert service.predict(FEATURES)["Congestion_Label"] == "High"
