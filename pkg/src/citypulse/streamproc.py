"""Micro-batch stream processing: decode, clean, featurize, stage, commit.

Delivery is at-least-once: consumer offsets are committed only after a batch
is staged, and the warehouse ledger drops batches it has already committed,
so a replay after a crash leaves the warehouse unchanged.
"""
from __future__ import annotations

import array
import hashlib
import json
import math
import os
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .datagen import CSV_HEADER, RECORD_FIELDS, WEATHER, TrafficRecordRaw, parse_row
from .errors import ParseError, StorageError
from .features import FeatureVector
from .learner.labels import LABELS
from .mlog import Consumer, LogMessage, now_ms

WAREHOUSE_HEADER = CSV_HEADER + ("Ingest_Ts_Ms", "Commit_Ts_Ms", "Congestion_Label")
STAGE_HEADER = CSV_HEADER + ("Ingest_Ts_Ms",)
DEFAULT_FLUSH_THRESHOLD = 100_000
_TIMING_COLUMNS = (WAREHOUSE_HEADER.index("Ingest_Ts_Ms"), WAREHOUSE_HEADER.index("Commit_Ts_Ms"))


# -- wire format ---------------------------------------------------------

def _json_value(v) -> str:
    if v is None:
        return "null"
    if isinstance(v, float):
        return json.dumps(v)
    return str(v)


def encode_record(r: TrafficRecordRaw) -> bytes:
    """UTF-8 JSON object keyed by the CSV header; absent values are null."""
    return (
        '{"Vehicle_ID":%d,"Frame_ID":%d,"Timestamp_ms":%d,"Lane_ID":%s,"Section_ID":%s,'
        '"Global_X":%s,"Global_Y":%s,"v_Vel":%s,"v_Acc":%s,"Space_Headway":%s,'
        '"Time_Headway":%s,"Weather":"%s"}' % (
            r.vehicle_id, r.frame_id, r.timestamp_ms, _json_value(r.lane_id), _json_value(r.section_id),
            _json_value(r.global_x), _json_value(r.global_y), _json_value(r.v_vel), _json_value(r.v_acc),
            _json_value(r.space_headway), _json_value(r.time_headway), r.weather)
    ).encode("utf-8")


def record_key(r: TrafficRecordRaw) -> bytes:
    return str(r.vehicle_id).encode("ascii")


_REQUIRED_INT = ("Vehicle_ID", "Frame_ID", "Timestamp_ms")
_OPTIONAL_INT = ("Lane_ID", "Section_ID")
_OPTIONAL_FLOAT = ("Global_X", "Global_Y", "v_Vel", "v_Acc", "Space_Headway", "Time_Headway")
_HEADER_SET = frozenset(CSV_HEADER)


def decode_record(payload: bytes) -> TrafficRecordRaw:
    try:
        obj = json.loads(payload)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ParseError(f"invalid JSON: {exc}") from None
    if not isinstance(obj, dict) or obj.keys() != _HEADER_SET:
        raise ParseError("payload must be an object with exactly the record fields")
    for k in _REQUIRED_INT:
        if type(obj[k]) is not int:
            raise ParseError(f"{k} must be an integer")
    for k in _OPTIONAL_INT:
        if obj[k] is not None and type(obj[k]) is not int:
            raise ParseError(f"{k} must be an integer or null")
    for k in _OPTIONAL_FLOAT:
        v = obj[k]
        if v is not None:
            if type(v) is int:
                obj[k] = float(v)
            elif type(v) is not float:
                raise ParseError(f"{k} must be a number or null")
    if obj["Weather"] not in WEATHER:
        raise ParseError(f"Weather must be one of {WEATHER}")
    return TrafficRecordRaw(*(obj[h] for h in CSV_HEADER))


# -- cleaning ------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class TrafficRecord:
    vehicle_id: int
    frame_id: int
    timestamp_ms: int
    lane_id: int
    section_id: int
    global_x: float
    global_y: float
    v_vel: float
    v_acc: float
    space_headway: float
    time_headway: float
    weather: str
    ingest_ts_ms: int = 0
    commit_ts_ms: int | None = None


def _or(value, default):
    return default if value is None else value


def clean(raw: TrafficRecordRaw | TrafficRecord, ingest_ts_ms: int | None = None) -> TrafficRecord:
    """Fill gaps: velocity, acceleration, headways and position -> 0.0; lane and section IDs -> -1."""
    if ingest_ts_ms is None:
        ingest_ts_ms = getattr(raw, "ingest_ts_ms", 0)
    return TrafficRecord(
        raw.vehicle_id, raw.frame_id, raw.timestamp_ms,
        _or(raw.lane_id, -1), _or(raw.section_id, -1),
        _or(raw.global_x, 0.0), _or(raw.global_y, 0.0),
        _or(raw.v_vel, 0.0), _or(raw.v_acc, 0.0),
        _or(raw.space_headway, 0.0), _or(raw.time_headway, 0.0),
        raw.weather, ingest_ts_ms, getattr(raw, "commit_ts_ms", None),
    )


def featurize(record: TrafficRecord) -> FeatureVector:
    return FeatureVector(record.v_vel, record.v_acc, record.space_headway, record.time_headway)


def feature_matrix(records: Iterable[TrafficRecord]) -> np.ndarray:
    rows = [featurize(r) for r in records]
    return np.array(rows, dtype=float).reshape(len(rows), 4)


def _cell(v) -> str:
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def _record_cells(r: TrafficRecord) -> list[str]:
    return [_cell(getattr(r, f)) for f in RECORD_FIELDS]


# -- temp store ----------------------------------------------------------

@dataclass
class StagedBatch:
    sequence: int
    batch_id: str
    records: list[TrafficRecord]
    features: list[FeatureVector] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)


class TempStore:
    """Staging area between processing and the warehouse.

    With a directory, each batch is written to its own file via rename, so a
    batch is either fully staged or absent; staged files survive a restart.
    """

    def __init__(self, directory: str | Path | None = None, flush_threshold: int = DEFAULT_FLUSH_THRESHOLD):
        self.directory = Path(directory) if directory is not None else None
        self.flush_threshold = flush_threshold
        self._lock = threading.Lock()
        self._batches: list[StagedBatch] = []
        self._next_sequence = 0
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
            self._recover()

    @property
    def batches(self) -> list[StagedBatch]:
        with self._lock:
            return list(self._batches)

    @property
    def staged_records(self) -> int:
        with self._lock:
            return sum(len(b) for b in self._batches)

    @property
    def should_flush(self) -> bool:
        return self.staged_records >= self.flush_threshold

    def __len__(self) -> int:
        return len(self._batches)

    def _path(self, batch: StagedBatch) -> Path:
        safe = hashlib.sha1(batch.batch_id.encode()).hexdigest()[:16]
        return self.directory / f"{batch.sequence:08d}-{safe}.csv"

    def stage(self, batch_id: str, records: Sequence[TrafficRecord]) -> StagedBatch:
        with self._lock:
            for b in self._batches:
                if b.batch_id == batch_id:
                    return b
            batch = StagedBatch(self._next_sequence, batch_id, list(records), [featurize(r) for r in records])
            if self.directory is not None:
                self._write(batch)
            self._batches.append(batch)
            self._next_sequence += 1
            return batch

    def _write(self, batch: StagedBatch) -> None:
        path = self._path(batch)
        tmp = path.with_suffix(".tmp")
        lines = [batch.batch_id, ",".join(STAGE_HEADER)]
        lines += [",".join(_record_cells(r) + [str(r.ingest_ts_ms)]) for r in batch.records]
        try:
            with open(tmp, "w", encoding="utf-8", newline="") as fh:
                fh.write("\n".join(lines) + "\n")
            os.replace(tmp, path)
        except OSError as exc:
            tmp.unlink(missing_ok=True)
            raise StorageError(f"cannot stage batch {batch.batch_id}: {exc}") from exc

    def _recover(self) -> None:
        for stray in self.directory.glob("*.tmp"):
            stray.unlink()
        for path in sorted(self.directory.glob("*.csv")):
            lines = path.read_text(encoding="utf-8").splitlines()
            records = []
            for n, line in enumerate(lines[2:], start=3):
                cells = line.split(",")
                raw = parse_row(cells[:-1], n)
                records.append(clean(raw, int(cells[-1])))
            sequence = int(path.name.split("-", 1)[0])
            self._batches.append(StagedBatch(sequence, lines[0], records, [featurize(r) for r in records]))
            self._next_sequence = max(self._next_sequence, sequence + 1)

    def release(self, batch_ids: Iterable[str]) -> None:
        """Drop batches the warehouse has durably committed."""
        ids = set(batch_ids)
        with self._lock:
            keep = []
            for b in self._batches:
                if b.batch_id in ids:
                    if self.directory is not None:
                        self._path(b).unlink(missing_ok=True)
                else:
                    keep.append(b)
            self._batches = keep


# -- warehouse -----------------------------------------------------------

@dataclass(frozen=True)
class LedgerEntry:
    batch_id: str
    row_count: int
    commit_ts_ms: int


class Warehouse:
    """Append-only CSV table plus a ledger of committed batch ids.

    Rows are appended before the ledger line is written; on open, any rows
    beyond the ledger total (a torn append) are truncated away.
    """

    def __init__(self, directory: str | Path, clock: Callable[[], int] = now_ms):
        self.directory = Path(directory)
        self.clock = clock
        self.data_path = self.directory / "warehouse.csv"
        self.ledger_path = self.directory / "ledger.csv"
        self._lock = threading.Lock()
        self.ledger: dict[str, LedgerEntry] = {}
        self.row_count = 0
        self.ingest_ts = array.array("q")
        self.commit_ts = array.array("q")
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
            self._open()
        except OSError as exc:
            raise StorageError(f"cannot open warehouse in {directory}: {exc}") from exc

    def _open(self) -> None:
        header = ",".join(WAREHOUSE_HEADER) + "\n"
        if not self.data_path.exists():
            self.data_path.write_text(header, encoding="utf-8")
            self.ledger_path.write_text("", encoding="utf-8")
        if self.ledger_path.exists():
            for line in self.ledger_path.read_text(encoding="utf-8").splitlines():
                if line:
                    bid, rows, ts = line.rsplit(",", 2)
                    self.ledger[bid] = LedgerEntry(bid, int(rows), int(ts))
        expected = sum(e.row_count for e in self.ledger.values())
        size = len(header.encode())
        rows = 0
        ingest_col, commit_col = _TIMING_COLUMNS
        with open(self.data_path, "rb") as fh:
            fh.readline()
            for line in fh:
                if rows == expected or not line.endswith(b"\n"):
                    break
                cells = line.decode().split(",")
                self.ingest_ts.append(int(cells[ingest_col]))
                self.commit_ts.append(int(cells[commit_col]))
                size += len(line)
                rows += 1
        if rows != expected:
            raise StorageError(f"warehouse holds {rows} rows but its ledger records {expected}")
        if self.data_path.stat().st_size != size:
            with open(self.data_path, "r+b") as fh:
                fh.truncate(size)
        self.row_count = rows
        self._size = size

    def is_committed(self, batch_id: str) -> bool:
        with self._lock:
            return batch_id in self.ledger

    def commit(self, batches: Sequence[StagedBatch], labeler: Callable[[np.ndarray], np.ndarray] | None = None) -> int:
        """Append all not-yet-ledgered batches in sequence order; returns rows appended."""
        with self._lock:
            todo = sorted((b for b in batches if b.batch_id not in self.ledger), key=lambda b: b.sequence)
            if not todo:
                return 0
            ts = self.clock()
            lines = []
            ledger_lines = []
            ingest = array.array("q")
            for b in todo:
                if labeler is not None and b.features:
                    names = [LABELS[i].name for i in labeler(np.asarray(b.features, dtype=float))]
                else:
                    names = [""] * len(b.records)
                for r, name in zip(b.records, names):
                    lines.append(",".join(_record_cells(r) + [str(r.ingest_ts_ms), str(ts), name]))
                    ingest.append(r.ingest_ts_ms)
                ledger_lines.append(f"{b.batch_id},{len(b.records)},{ts}\n")
            data = ("\n".join(lines) + "\n").encode("utf-8") if lines else b""
            try:
                with open(self.data_path, "ab") as fh:
                    fh.write(data)
                    fh.flush()
                with open(self.ledger_path, "a", encoding="utf-8") as fh:
                    fh.write("".join(ledger_lines))
            except OSError as exc:
                try:
                    with open(self.data_path, "r+b") as fh:
                        fh.truncate(self._size)
                except OSError:
                    pass
                raise StorageError(f"warehouse commit failed: {exc}") from exc
            self._size += len(data)
            self.row_count += len(lines)
            self.ingest_ts.extend(ingest)
            self.commit_ts.extend([ts] * len(lines))
            for b in todo:
                self.ledger[b.batch_id] = LedgerEntry(b.batch_id, len(b.records), ts)
            return len(lines)

    def snapshot(self) -> tuple[int, int]:
        """(row count, byte size) of the committed table."""
        with self._lock:
            return self.row_count, self._size

    def lines(self) -> list[str]:
        """Committed data lines (no header) as of now."""
        rows, size = self.snapshot()
        with open(self.data_path, "rb") as fh:
            data = fh.read(size).decode("utf-8")
        return data.splitlines()[1:rows + 1]

    def rows(self) -> Iterable[tuple[TrafficRecord, str]]:
        for n, line in enumerate(self.lines(), start=2):
            cells = line.split(",")
            raw = parse_row(cells[:len(CSV_HEADER)], n)
            ingest, commit, label = cells[len(CSV_HEADER):]
            yield replace(clean(raw, int(ingest)), commit_ts_ms=int(commit)), label

    def features(self) -> np.ndarray:
        """Feature matrix in source order, independent of how partition commits interleaved."""
        records = sorted((r for r, _ in self.rows()), key=lambda r: (r.vehicle_id, r.frame_id, r.timestamp_ms))
        return feature_matrix(records)

    def content_hash(self) -> str:
        """SHA-256 over the sorted rows with the timing columns dropped."""
        drop = set(_TIMING_COLUMNS)
        keyed = sorted(",".join(c for i, c in enumerate(line.split(",")) if i not in drop)
                       for line in self.lines())
        h = hashlib.sha256()
        for line in keyed:
            h.update(line.encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()


# -- lane aggregates -----------------------------------------------------

@dataclass(frozen=True)
class LaneStats:
    lane_id: int
    count: int
    mean_v_vel: float
    mean_space_headway: float


@dataclass
class LaneAggregates:
    lanes: dict[int, LaneStats]
    label_counts: dict[str, int]

    @property
    def total(self) -> int:
        return sum(s.count for s in self.lanes.values())

    def to_text(self) -> str:
        lines = [f"{'lane':>6}{'vehicles':>10}{'mean v_Vel':>12}{'mean headway':>14}"]
        for lane in sorted(self.lanes):
            s = self.lanes[lane]
            lines.append(f"{lane:>6}{s.count:>10}{s.mean_v_vel:>12.3f}{s.mean_space_headway:>14.3f}")
        lines.append("")
        lines.append("congestion levels: " + ", ".join(f"{k or 'Unlabeled'}={v}"
                                                         for k, v in sorted(self.label_counts.items())))
        return "\n".join(lines) + "\n"


def aggregate_by_lane(warehouse: Warehouse) -> LaneAggregates:
    lane_col = WAREHOUSE_HEADER.index("Lane_ID")
    vel_col = WAREHOUSE_HEADER.index("v_Vel")
    gap_col = WAREHOUSE_HEADER.index("Space_Headway")
    vel: dict[int, list[float]] = {}
    gap: dict[int, list[float]] = {}
    labels: dict[str, int] = {}
    for line in warehouse.lines():
        cells = line.split(",")
        lane = int(cells[lane_col])
        vel.setdefault(lane, []).append(float(cells[vel_col]))
        gap.setdefault(lane, []).append(float(cells[gap_col]))
        labels[cells[-1]] = labels.get(cells[-1], 0) + 1
    lanes = {
        lane: LaneStats(lane, len(v), math.fsum(v) / len(v), math.fsum(gap[lane]) / len(v))
        for lane, v in vel.items()
    }
    return LaneAggregates(lanes, labels)


# -- processor -----------------------------------------------------------

@dataclass(frozen=True)
class DeadLetter:
    partition: int
    offset: int
    payload: bytes
    error: str


def batch_id_for(topic: str, messages: Sequence[LogMessage]) -> str:
    spans: dict[int, list[int]] = {}
    for m in messages:
        lo_hi = spans.setdefault(m.partition, [m.offset, m.offset])
        lo_hi[0] = min(lo_hi[0], m.offset)
        lo_hi[1] = max(lo_hi[1], m.offset)
    return topic + ":" + "+".join(f"{p}@{lo}-{hi}" for p, (lo, hi) in sorted(spans.items()))


class MicroBatchProcessor:
    def __init__(self, consumer: Consumer, temp: TempStore, warehouse: Warehouse, batch_size: int = 500,
                 labeler: Callable[[np.ndarray], np.ndarray] | None = None):
        self.consumer = consumer
        self.temp = temp
        self.warehouse = warehouse
        self.batch_size = batch_size
        self.labeler = labeler
        self._dead: dict[tuple[int, int], DeadLetter] = {}
        self.records_staged = 0

    @property
    def dead_letters(self) -> list[DeadLetter]:
        return list(self._dead.values())

    def process_micro_batch(self) -> str | None:
        """Poll, decode, clean, stage, then commit offsets.  Returns the staged batch id."""
        messages = self.consumer.poll(self.batch_size)
        if not messages:
            return None
        records = []
        for m in messages:
            try:
                raw = decode_record(m.payload)
            except ParseError as exc:
                self._dead[(m.partition, m.offset)] = DeadLetter(m.partition, m.offset, m.payload, str(exc))
                continue
            records.append(clean(raw, m.produce_ts_ms))
        batch_id = None
        if records:
            batch_id = batch_id_for(self.consumer.topic, messages)
            if not self.warehouse.is_committed(batch_id):
                self.temp.stage(batch_id, records)
                self.records_staged += len(records)
        self.consumer.commit_messages(messages)
        return batch_id

    def commit_to_warehouse(self) -> int:
        batches = self.temp.batches
        if not batches:
            return 0
        rows = self.warehouse.commit(batches, self.labeler)
        self.temp.release(b.batch_id for b in batches)
        return rows

    def lag(self) -> int:
        return sum(self.consumer.lag().values())

    def drain(self) -> int:
        """Process until caught up, committing whenever the temp store passes its threshold."""
        rows = 0
        while self.process_micro_batch() is not None or self.lag() > 0:
            if self.temp.should_flush:
                rows += self.commit_to_warehouse()
        return rows + self.commit_to_warehouse()
