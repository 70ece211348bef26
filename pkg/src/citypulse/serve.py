"""JSON-over-HTTP front door for predictions, road congestion summaries and run metrics.

Routes:
    GET  /health
    POST /predict        {"v_Vel":..., "v_Acc":..., "Space_Headway":..., "Time_Headway":...,
                          optional "Lane_ID", "Section_ID"}
    GET  /congestion?lane=&section=
    GET  /metrics
"""
from __future__ import annotations

import csv
import json
import math
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from importlib import resources
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np

from .features import FEATURE_HEADERS
from .learner.labels import LABELS
from .learner.model import CongestionModel, load_model
from .streamproc import WAREHOUSE_HEADER, Warehouse

UNLABELED = "Unlabeled"


@dataclass(frozen=True)
class Road:
    city: str
    road: str

    @property
    def display(self) -> str:
        return self.road if self.city == "Unknown" else f"{self.road}, {self.city}"


class RoadDirectory:
    def __init__(self, table: dict[tuple[int, int], Road]):
        self.table = table

    @classmethod
    def load(cls, path: str | Path | None = None) -> "RoadDirectory":
        if path is None:
            text = resources.files("citypulse").joinpath("data/roads.csv").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        rows = csv.DictReader(text.splitlines())
        return cls({(int(r["Lane_ID"]), int(r["Section_ID"])): Road(r["City"], r["Road"]) for r in rows})

    def lookup(self, lane: int, section: int) -> Road:
        return self.table.get((lane, section), self.table[(-1, -1)])


class MetricsBoard:
    """Holds the last *completed* run's metrics; publish swaps the whole snapshot."""

    def __init__(self):
        self._latest: dict | None = None

    def publish(self, metrics: dict) -> None:
        self._latest = dict(metrics)

    def latest(self) -> dict | None:
        return self._latest


class ServiceError(Exception):
    def __init__(self, status: int, message: str, field: str | None = None):
        super().__init__(message)
        self.status = status
        self.field = field

    def body(self) -> dict:
        out = {"error": str(self)}
        if self.field:
            out["field"] = self.field
        return out


def _number(body: dict, name: str) -> float:
    if name not in body or body[name] is None:
        raise ServiceError(400, f"missing field {name}", name)
    value = body[name]
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ServiceError(400, f"{name} must be a finite number", name)
    return float(value)


class CityPulseService:
    def __init__(self, model: CongestionModel | None = None, warehouse: Warehouse | None = None,
                 roads: RoadDirectory | None = None, board: MetricsBoard | None = None):
        self.model = model
        self.warehouse = warehouse
        self.roads = roads or RoadDirectory.load()
        self.board = board or MetricsBoard()
        self._swap = threading.Lock()

    def load_model(self, path: str | Path) -> None:
        model = load_model(path)
        with self._swap:
            self.model = model

    def health(self) -> dict:
        return {"status": "ok", "model_loaded": self.model is not None,
                "warehouse_rows": self.warehouse.row_count if self.warehouse else 0}

    def predict(self, body) -> dict:
        model = self.model
        if model is None:
            raise ServiceError(503, "no model loaded")
        if not isinstance(body, dict):
            raise ServiceError(400, "request body must be a JSON object")
        x = np.array([[_number(body, name) for name in FEATURE_HEADERS]])
        votes = model.vote_fractions(x)[0]
        label = LABELS[int(model.predict(x)[0])]
        out = {"Congestion_Label": label.name,
               "votes": {l.name: float(v) for l, v in zip(LABELS, votes)}}
        if "Lane_ID" in body or "Section_ID" in body:
            lane, section = body.get("Lane_ID", -1), body.get("Section_ID", -1)
            if not all(isinstance(v, int) and not isinstance(v, bool) for v in (lane, section)):
                raise ServiceError(400, "Lane_ID and Section_ID must be integers",
                                   "Lane_ID" if not isinstance(lane, int) else "Section_ID")
            road = self.roads.lookup(lane, section)
            out.update({"Lane_ID": lane, "Section_ID": section, "Road": road.display})
        return out

    def congestion(self, lane: int | None = None, section: int | None = None) -> list[dict]:
        if self.warehouse is None:
            return []
        lane_col = WAREHOUSE_HEADER.index("Lane_ID")
        section_col = WAREHOUSE_HEADER.index("Section_ID")
        vel_col = WAREHOUSE_HEADER.index("v_Vel")
        feat_cols = [WAREHOUSE_HEADER.index(h) for h in FEATURE_HEADERS]
        keys, labels, vels, unlabeled_rows, unlabeled_x = [], [], [], [], []
        for line in self.warehouse.lines():
            cells = line.split(",")
            key = (int(cells[lane_col]), int(cells[section_col]))
            if (lane is not None and key[0] != lane) or (section is not None and key[1] != section):
                continue
            label = cells[-1] or UNLABELED
            if label == UNLABELED and self.model is not None:
                unlabeled_rows.append(len(labels))
                unlabeled_x.append([float(cells[c]) for c in feat_cols])
            keys.append(key)
            labels.append(label)
            vels.append(float(cells[vel_col]))
        if unlabeled_rows:
            codes = self.model.labeler.label(np.array(unlabeled_x))
            for i, code in zip(unlabeled_rows, codes):
                labels[i] = LABELS[code].name

        groups: dict[tuple[int, int], dict] = {}
        for key, label, vel in zip(keys, labels, vels):
            g = groups.setdefault(key, {"counts": {}, "vel": []})
            g["counts"][label] = g["counts"].get(label, 0) + 1
            g["vel"].append(vel)
        out = []
        for (ln, sec), g in sorted(groups.items()):
            road = self.roads.lookup(ln, sec)
            counts = {l.name: g["counts"].get(l.name, 0) for l in LABELS}
            if UNLABELED in g["counts"]:
                counts[UNLABELED] = g["counts"][UNLABELED]
            out.append({
                "Lane_ID": ln, "Section_ID": sec, "City": road.city, "Road": road.display,
                "records": len(g["vel"]), "counts": counts,
                "mean_v_Vel": math.fsum(g["vel"]) / len(g["vel"]),
            })
        return out

    def metrics(self) -> dict:
        latest = self.board.latest()
        return latest if latest is not None else {"status": "no runs"}


def _handler(service: CityPulseService):
    class Handler(BaseHTTPRequestHandler):
        server_version = "CityPulse/0.1"

        def log_message(self, format, *args):  # quiet by default
            pass

        def _send(self, status: int, body) -> None:
            data = json.dumps(body).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def _dispatch(self, fn) -> None:
            try:
                self._send(200, fn())
            except ServiceError as exc:
                self._send(exc.status, exc.body())

        def do_GET(self):
            url = urlparse(self.path)
            query = parse_qs(url.query)
            if url.path == "/health":
                self._dispatch(service.health)
            elif url.path == "/metrics":
                self._dispatch(service.metrics)
            elif url.path == "/congestion":
                def run():
                    try:
                        lane = int(query["lane"][0]) if query.get("lane", [""])[0] else None
                        section = int(query["section"][0]) if query.get("section", [""])[0] else None
                    except ValueError:
                        raise ServiceError(400, "lane and section must be integers") from None
                    return service.congestion(lane, section)
                self._dispatch(run)
            else:
                self._send(404, {"error": f"no route {url.path}"})

        def do_POST(self):
            if urlparse(self.path).path != "/predict":
                self._send(404, {"error": f"no route {self.path}"})
                return
            length = int(self.headers.get("Content-Length") or 0)
            try:
                body = json.loads(self.rfile.read(length) or b"null")
            except ValueError:
                self._send(400, {"error": "body is not valid JSON"})
                return
            self._dispatch(lambda: service.predict(body))

    return Handler


def make_server(service: CityPulseService, host: str = "127.0.0.1", port: int = 8000) -> ThreadingHTTPServer:
    return ThreadingHTTPServer((host, port), _handler(service))
