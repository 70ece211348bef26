"""Seeded synthetic traffic telemetry.

Records are drawn from a three-regime Gaussian mixture (free flow, moderate,
congested).  All draws happen column-wise from a single PCG64 stream so the
output is bit-identical for a given config.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ParseError, StorageError

CSV_HEADER = (
    "Vehicle_ID", "Frame_ID", "Timestamp_ms", "Lane_ID", "Section_ID",
    "Global_X", "Global_Y", "v_Vel", "v_Acc", "Space_Headway",
    "Time_Headway", "Weather",
)
WEATHER = ("Clear", "Rain", "Fog")
WEATHER_PROBS = (0.7, 0.2, 0.1)
SECTIONS = 20
MAX_LANES = 8
SECTION_LENGTH_M = 100.0
LANE_WIDTH_M = 3.7
BASE_TIMESTAMP_MS = 1_700_000_000_000
TICK_MS = 10
MIN_SPACE_HEADWAY = 0.5
MIN_VELOCITY_FOR_TIME_HEADWAY = 0.1

# attribute names of the optional fields, in CSV order
OPTIONAL_FIELDS = (
    "lane_id", "section_id", "global_x", "global_y",
    "v_vel", "v_acc", "space_headway", "time_headway",
)


@dataclass(frozen=True, slots=True)
class TrafficRecordRaw:
    vehicle_id: int
    frame_id: int
    timestamp_ms: int
    lane_id: int | None
    section_id: int | None
    global_x: float | None
    global_y: float | None
    v_vel: float | None
    v_acc: float | None
    space_headway: float | None
    time_headway: float | None
    weather: str

    def as_row(self) -> tuple:
        return tuple(getattr(self, f) for f in RECORD_FIELDS)


RECORD_FIELDS = tuple(f.name for f in fields(TrafficRecordRaw))
_INT_FIELDS = {"vehicle_id", "frame_id", "timestamp_ms", "lane_id", "section_id"}


@dataclass(frozen=True)
class LatentRegime:
    name: str
    vel_mean: float
    vel_std: float
    headway_mean: float
    headway_std: float
    acc_std: float

    def __post_init__(self):
        if min(self.vel_std, self.headway_std, self.acc_std) <= 0:
            raise ConfigError(f"regime {self.name}: standard deviations must be positive")


DEFAULT_REGIMES = (
    LatentRegime("FreeFlow", 25.0, 4.0, 40.0, 8.0, 1.0),
    LatentRegime("Moderate", 12.0, 3.0, 20.0, 5.0, 1.5),
    LatentRegime("Congested", 3.0, 1.5, 7.0, 2.0, 0.8),
)


def full_velocity_range(regimes: Sequence[LatentRegime] = DEFAULT_REGIMES) -> tuple[float, float]:
    """Velocities the generator plausibly emits: 0 up to the fastest regime's mean + 3 std."""
    return 0.0, max(r.vel_mean + 3 * r.vel_std for r in regimes)


@dataclass(frozen=True)
class GeneratorConfig:
    num_records: int = 10_000
    seed: int = 42
    regime_weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    missing_prob: float = 0.02
    lanes: int = 8
    regimes: tuple[LatentRegime, ...] = field(default=DEFAULT_REGIMES)

    def __post_init__(self):
        if not isinstance(self.num_records, (int, np.integer)) or self.num_records < 0:
            raise ConfigError(f"num_records must be a non-negative integer, got {self.num_records!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must fit in 64 unsigned bits, got {self.seed}")
        w = tuple(float(x) for x in self.regime_weights)
        if len(w) != 3 or any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
            raise ConfigError(f"regime_weights must be 3 probabilities summing to 1, got {w}")
        object.__setattr__(self, "regime_weights", w)
        if not 0.0 <= self.missing_prob <= 0.2:
            raise ConfigError(f"missing_prob must lie in [0, 0.2], got {self.missing_prob}")
        if not 1 <= self.lanes <= MAX_LANES:
            raise ConfigError(f"lanes must lie in [1, {MAX_LANES}], got {self.lanes}")
        if len(self.regimes) != 3:
            raise ConfigError("exactly three latent regimes are required")
        vm = [r.vel_mean for r in self.regimes]
        if not vm[0] > vm[1] > vm[2]:
            raise ConfigError("regime velocity means must be strictly decreasing")


@dataclass
class TrafficColumns:
    """Column-major view of a generated sequence.  NaN marks an absent optional value."""

    regime: np.ndarray
    vehicle_id: np.ndarray
    frame_id: np.ndarray
    timestamp_ms: np.ndarray
    lane_id: np.ndarray
    section_id: np.ndarray
    global_x: np.ndarray
    global_y: np.ndarray
    v_vel: np.ndarray
    v_acc: np.ndarray
    space_headway: np.ndarray
    time_headway: np.ndarray
    weather: np.ndarray  # index into WEATHER

    def __len__(self) -> int:
        return len(self.regime)

    def to_records(self) -> list[TrafficRecordRaw]:
        def ints(a):
            return [None if math.isnan(x) else int(x) for x in a.tolist()]

        def floats(a):
            return [None if math.isnan(x) else x for x in a.tolist()]

        cols = (
            self.vehicle_id.tolist(), self.frame_id.tolist(), self.timestamp_ms.tolist(),
            ints(self.lane_id), ints(self.section_id),
            floats(self.global_x), floats(self.global_y),
            floats(self.v_vel), floats(self.v_acc),
            floats(self.space_headway), floats(self.time_headway),
            [WEATHER[i] for i in self.weather.tolist()],
        )
        return [TrafficRecordRaw(*row) for row in zip(*cols)]


def _frame_ids(vehicle_id: np.ndarray) -> np.ndarray:
    """Running count of each vehicle's previous appearances."""
    n = len(vehicle_id)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(vehicle_id, kind="stable")
    sorted_ids = vehicle_id[order]
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_ids)) + 1]
    group_start = np.repeat(starts, np.diff(np.r_[starts, n]))
    frames = np.empty(n, dtype=np.int64)
    frames[order] = np.arange(n) - group_start
    return frames


def generate_columns(config: GeneratorConfig) -> TrafficColumns:
    n = int(config.num_records)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    regime = rng.choice(3, size=n, p=config.regime_weights)

    n_vehicles = max(1, n // 50)
    vehicle_id = rng.integers(1, n_vehicles + 1, size=n)
    lane = rng.integers(1, config.lanes + 1, size=n).astype(float)
    section = rng.integers(1, SECTIONS + 1, size=n).astype(float)
    along = rng.uniform(0.0, SECTION_LENGTH_M, size=n)
    z_vel = rng.standard_normal(n)
    z_head = rng.standard_normal(n)
    z_acc = rng.standard_normal(n)
    weather = rng.choice(len(WEATHER), size=n, p=WEATHER_PROBS)
    dropped = rng.random((len(OPTIONAL_FIELDS), n)) < config.missing_prob

    params = np.array([[r.vel_mean, r.vel_std, r.headway_mean, r.headway_std, r.acc_std]
                       for r in config.regimes])[regime]
    v_vel = np.maximum(params[:, 0] + params[:, 1] * z_vel, 0.0)
    space_headway = np.maximum(params[:, 2] + params[:, 3] * z_head, MIN_SPACE_HEADWAY)
    time_headway = space_headway / np.maximum(v_vel, MIN_VELOCITY_FOR_TIME_HEADWAY)
    v_acc = params[:, 4] * z_acc
    global_x = (section - 1) * SECTION_LENGTH_M + along
    global_y = (lane - 0.5) * LANE_WIDTH_M

    optional = dict(zip(OPTIONAL_FIELDS, (
        lane, section, global_x, global_y, v_vel, v_acc, space_headway, time_headway)))
    for row, name in enumerate(OPTIONAL_FIELDS):
        col = optional[name]
        col[dropped[row]] = np.nan

    return TrafficColumns(
        regime=regime,
        vehicle_id=vehicle_id,
        frame_id=_frame_ids(vehicle_id),
        timestamp_ms=BASE_TIMESTAMP_MS + TICK_MS * np.arange(n, dtype=np.int64),
        weather=weather,
        **optional,
    )


def generate(config: GeneratorConfig) -> list[TrafficRecordRaw]:
    return generate_columns(config).to_records()


def inject_noise(
    records: Sequence[TrafficRecordRaw],
    intensity: float,
    seed: int,
    velocity_range: tuple[float, float] | None = None,
) -> list[TrafficRecordRaw]:
    """Scramble velocity and jitter headways on a seeded subset of records.

    ``floor(intensity * len(records))`` records are picked without replacement;
    each gets a velocity drawn uniformly over ``velocity_range`` and both
    headways scaled by independent factors in [0.5, 1.5].  Absent headways stay
    absent.
    """
    if not 0.0 <= intensity <= 1.0:
        raise ConfigError(f"intensity must lie in [0, 1], got {intensity}")
    lo, hi = velocity_range or full_velocity_range()
    n = len(records)
    k = math.floor(intensity * n)
    out = list(records)
    if k == 0:
        return out
    rng = np.random.Generator(np.random.PCG64(seed))
    picked = np.sort(rng.choice(n, size=k, replace=False))
    vel = rng.uniform(lo, hi, size=k).tolist()
    f_space = rng.uniform(0.5, 1.5, size=k).tolist()
    f_time = rng.uniform(0.5, 1.5, size=k).tolist()
    for j, i in enumerate(picked.tolist()):
        r = records[i]
        sh = None if r.space_headway is None else r.space_headway * f_space[j]
        th = None if r.time_headway is None else r.time_headway * f_time[j]
        out[i] = _replace(r, v_vel=vel[j], space_headway=sh, time_headway=th)
    return out


def noisy_indices(n: int, intensity: float, seed: int) -> np.ndarray:
    """Indices ``inject_noise`` perturbs for the same arguments."""
    k = math.floor(intensity * n)
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    rng = np.random.Generator(np.random.PCG64(seed))
    return np.sort(rng.choice(n, size=k, replace=False))


def _replace(r: TrafficRecordRaw, **changes) -> TrafficRecordRaw:
    values = {f: getattr(r, f) for f in RECORD_FIELDS}
    values.update(changes)
    return TrafficRecordRaw(**values)


# -- CSV -----------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_row(record: TrafficRecordRaw) -> list[str]:
    return [_fmt(v) for v in record.as_row()]


def write_csv(records: Iterable[TrafficRecordRaw], path: str | Path) -> int:
    count = 0
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for r in records:
                writer.writerow(format_row(r))
                count += 1
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
    return count


def parse_row(cells: Sequence[str], line: int | None = None) -> TrafficRecordRaw:
    if len(cells) != len(CSV_HEADER):
        raise ParseError(f"expected {len(CSV_HEADER)} fields, got {len(cells)}", line)
    values = {}
    for name, header, cell in zip(RECORD_FIELDS, CSV_HEADER, cells):
        if name == "weather":
            if cell not in WEATHER:
                raise ParseError(f"Weather must be one of {WEATHER}, got {cell!r}", line)
            values[name] = cell
            continue
        if cell == "":
            if name not in OPTIONAL_FIELDS:
                raise ParseError(f"{header} is required", line)
            values[name] = None
            continue
        try:
            values[name] = int(cell) if name in _INT_FIELDS else float(cell)
        except ValueError:
            raise ParseError(f"bad {header} value {cell!r}", line) from None
    return TrafficRecordRaw(**values)


def read_csv(path: str | Path) -> list[TrafficRecordRaw]:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != CSV_HEADER:
                raise ParseError(f"unexpected header {header!r}", 1)
            return [parse_row(cells, reader.line_num) for cells in reader]
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
