"""Embedded partitioned commit log.

Topics are split into partitions; each partition is an append-only sequence
of encoded producer batches.  Offsets are contiguous per partition and the
high watermark is the next offset to assign.  Consumer groups track a
committed offset per partition; lag is ``high_watermark - committed``.

Batch wire format::

    header  = codec id (u8) | message count (u32 LE) | uncompressed body length (u32 LE)
    body    = codec.encode( repeat[ key length (u32 LE) | key | payload length (u32 LE) | payload ] )
"""
from __future__ import annotations

import bisect
import json
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from .errors import (
    BackpressureError, ConfigError, ConflictError, OffsetRangeError, ParseError, QueueFullError,
    StorageError, TransientAppendError, UnknownTopicError,
)

HEADER = struct.Struct("<BII")
_LEN = struct.Struct("<I")
_FRAME = struct.Struct("<qqI")  # snapshot: base offset, produce ts, blob length


def now_ms() -> int:
    return time.time_ns() // 1_000_000


# -- codecs --------------------------------------------------------------

@dataclass(frozen=True)
class Codec:
    id: int
    name: str
    encode: Callable[[bytes], bytes]
    decode: Callable[[bytes], bytes]


NO_CODEC = Codec(0, "none", bytes, bytes)
BLOCK_CODEC = Codec(1, "block", lambda b: zlib.compress(b, 1), zlib.decompress)
CODECS = {c.id: c for c in (NO_CODEC, BLOCK_CODEC)}
CODECS_BY_NAME = {c.name: c for c in CODECS.values()}


def encode_batch(messages: Iterable[tuple[bytes, bytes]], codec: Codec = BLOCK_CODEC) -> bytes:
    parts = []
    count = 0
    for key, payload in messages:
        parts += (_LEN.pack(len(key)), key, _LEN.pack(len(payload)), payload)
        count += 1
    body = b"".join(parts)
    return HEADER.pack(codec.id, count, len(body)) + codec.encode(body)


def read_header(blob: bytes) -> tuple[Codec, int, int]:
    if len(blob) < HEADER.size:
        raise ParseError("batch shorter than its header")
    codec_id, count, length = HEADER.unpack_from(blob)
    if codec_id not in CODECS:
        raise ParseError(f"unknown codec id {codec_id}")
    return CODECS[codec_id], count, length


def decode_batch(blob: bytes) -> list[tuple[bytes, bytes]]:
    codec, count, length = read_header(blob)
    body = codec.decode(blob[HEADER.size:])
    if len(body) != length:
        raise ParseError(f"batch body is {len(body)} bytes, header says {length}")
    out = []
    pos = 0
    unpack = _LEN.unpack_from
    for _ in range(count):
        (klen,) = unpack(body, pos)
        pos += 4
        key = body[pos:pos + klen]
        pos += klen
        (plen,) = unpack(body, pos)
        pos += 4
        out.append((key, body[pos:pos + plen]))
        pos += plen
    if pos != length:
        raise ParseError("trailing bytes after last message")
    return out


# -- data types ----------------------------------------------------------

@dataclass(frozen=True)
class BrokerConfig:
    partitions_per_topic: int = 4
    batch_size: int = 500
    max_retries: int = 3
    retry_backoff_ms: int = 50
    queue_capacity: int = 1_000_000
    codec: str = "block"

    def __post_init__(self):
        for name in ("partitions_per_topic", "batch_size", "queue_capacity"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.max_retries < 0 or self.retry_backoff_ms < 0:
            raise ConfigError("max_retries and retry_backoff_ms must be non-negative")
        if self.codec not in CODECS_BY_NAME:
            raise ConfigError(f"unknown codec {self.codec!r}; choose from {sorted(CODECS_BY_NAME)}")


@dataclass(frozen=True, slots=True)
class LogMessage:
    key: bytes
    payload: bytes
    offset: int
    partition: int
    produce_ts_ms: int


@dataclass
class ProducerBatch:
    messages: list[tuple[bytes, bytes]]
    codec: Codec
    sequence: int

    def encode(self) -> bytes:
        return encode_batch(self.messages, self.codec)


@dataclass
class ConsumerGroupState:
    group_id: str
    topic: str
    committed: dict[int, int] = field(default_factory=dict)
    assigned: dict[int, str] = field(default_factory=dict)  # partition -> consumer id


@dataclass
class Ack:
    """Filled in when the message's batch is appended."""

    partition: int
    offset: int | None = None

    @property
    def done(self) -> bool:
        return self.offset is not None


def partition_for(key: bytes, partitions: int) -> int:
    return zlib.crc32(key) % partitions


# -- broker --------------------------------------------------------------

class _Partition:
    def __init__(self):
        self.lock = threading.Lock()
        self.base_offsets: list[int] = []
        self.counts: list[int] = []
        self.timestamps: list[int] = []
        self.blobs: list[bytes | None] = []
        self.high_watermark = 0
        self.low_watermark = 0  # first retained offset
        self.first_batch = 0
        self.floor = 0  # slowest committed offset among groups
        self._cache: tuple[int, list] | None = None

    def batch_messages(self, i: int) -> list[tuple[bytes, bytes]]:
        if self._cache is None or self._cache[0] != i:
            self._cache = (i, decode_batch(self.blobs[i]))
        return self._cache[1]

    def trim(self, floor: int) -> None:
        self.floor = floor
        while (self.first_batch < len(self.blobs)
               and self.base_offsets[self.first_batch] + self.counts[self.first_batch] <= floor):
            self.blobs[self.first_batch] = None
            self.first_batch += 1
            self.low_watermark = (self.base_offsets[self.first_batch]
                                  if self.first_batch < len(self.blobs) else self.high_watermark)
        if self._cache is not None and self._cache[0] < self.first_batch:
            self._cache = None


@dataclass(frozen=True)
class Topic:
    name: str
    partitions: int


class Broker:
    """Thread-safe in-process log.  Appends to one partition are serialized."""

    def __init__(self, config: BrokerConfig = BrokerConfig(), clock: Callable[[], int] = now_ms,
                 fault_injector: Callable[[str, int], bool] | None = None):
        self.config = config
        self.clock = clock
        self.fault_injector = fault_injector
        self._lock = threading.RLock()
        self._topics: dict[str, list[_Partition]] = {}
        self._groups: dict[str, ConsumerGroupState] = {}

    # topics
    def create_topic(self, name: str, partitions: int | None = None) -> Topic:
        partitions = self.config.partitions_per_topic if partitions is None else partitions
        if not name:
            raise ConfigError("topic name must be nonempty")
        if partitions < 1:
            raise ConfigError(f"a topic needs at least one partition, got {partitions}")
        with self._lock:
            if name in self._topics:
                raise ConflictError(f"topic {name!r} already exists")
            self._topics[name] = [_Partition() for _ in range(partitions)]
        return Topic(name, partitions)

    def topic(self, name: str) -> Topic:
        return Topic(name, len(self._parts(name)))

    def topics(self) -> list[Topic]:
        with self._lock:
            return [Topic(n, len(p)) for n, p in self._topics.items()]

    def _parts(self, name: str) -> list[_Partition]:
        try:
            return self._topics[name]
        except KeyError:
            raise UnknownTopicError(f"unknown topic {name!r}") from None

    def _part(self, topic: str, partition: int) -> _Partition:
        parts = self._parts(topic)
        if not 0 <= partition < len(parts):
            raise OffsetRangeError(f"topic {topic!r} has no partition {partition}")
        return parts[partition]

    def high_watermark(self, topic: str, partition: int) -> int:
        p = self._part(topic, partition)
        with p.lock:
            return p.high_watermark

    def watermarks(self, topic: str) -> dict[int, int]:
        out = {}
        for i, p in enumerate(self._parts(topic)):
            with p.lock:
                out[i] = p.high_watermark
        return out

    def low_watermark(self, topic: str, partition: int) -> int:
        p = self._part(topic, partition)
        with p.lock:
            return p.low_watermark

    # append / read
    def append(self, topic: str, partition: int, blob: bytes) -> int:
        """Append one encoded batch; returns the base offset."""
        p = self._part(topic, partition)
        _, count, _ = read_header(blob)
        if count < 1:
            raise ParseError("empty batch")
        if self.fault_injector is not None and self.fault_injector(topic, partition):
            raise TransientAppendError(f"injected append fault on {topic}/{partition}")
        with p.lock:
            backlog = p.high_watermark - p.floor
            if backlog + count > self.config.queue_capacity:
                raise QueueFullError(
                    f"{topic}/{partition} holds {backlog} unconsumed messages; "
                    f"capacity {self.config.queue_capacity}")
            base = p.high_watermark
            p.base_offsets.append(base)
            p.counts.append(count)
            p.timestamps.append(self.clock())
            p.blobs.append(blob)
            p.high_watermark += count
            return base

    def read(self, topic: str, partition: int, offset: int, max_records: int) -> list[LogMessage]:
        p = self._part(topic, partition)
        out: list[LogMessage] = []
        with p.lock:
            if offset < p.low_watermark:
                raise OffsetRangeError(f"offset {offset} was trimmed (low watermark {p.low_watermark})")
            i = bisect.bisect_right(p.base_offsets, offset) - 1
            while max_records > len(out) and 0 <= i < len(p.blobs) and offset < p.high_watermark:
                base, ts = p.base_offsets[i], p.timestamps[i]
                msgs = p.batch_messages(i)
                start = offset - base
                stop = min(len(msgs), start + max_records - len(out))
                for j in range(start, stop):
                    key, payload = msgs[j]
                    out.append(LogMessage(key, payload, base + j, partition, ts))
                offset = base + stop
                i += 1
        return out

    # consumer groups
    def join(self, group_id: str, topic: str, partitions: Iterable[int], member: str) -> ConsumerGroupState:
        n = len(self._parts(topic))
        with self._lock:
            state = self._groups.get(group_id)
            if state is None:
                parts = self._topics[topic]
                state = self._groups[group_id] = ConsumerGroupState(
                    group_id, topic, {p: parts[p].low_watermark for p in range(n)})
                self._refresh_floor(topic)
            elif state.topic != topic:
                raise ConflictError(f"group {group_id!r} consumes {state.topic!r}, not {topic!r}")
            partitions = list(partitions)
            for p in partitions:
                if not 0 <= p < n:
                    raise OffsetRangeError(f"topic {topic!r} has no partition {p}")
                owner = state.assigned.get(p)
                if owner is not None and owner != member:
                    raise ConflictError(f"partition {p} of {topic!r} already owned by {owner} in {group_id!r}")
            for p in partitions:
                state.assigned[p] = member
            return state

    def leave(self, group_id: str, member: str) -> None:
        with self._lock:
            state = self._groups.get(group_id)
            if state is not None:
                state.assigned = {p: m for p, m in state.assigned.items() if m != member}

    def group(self, group_id: str) -> ConsumerGroupState:
        with self._lock:
            try:
                return self._groups[group_id]
            except KeyError:
                raise UnknownTopicError(f"unknown consumer group {group_id!r}") from None

    def commit(self, group_id: str, offsets: dict[int, int]) -> dict[int, int]:
        with self._lock:
            state = self.group(group_id)
            parts = self._parts(state.topic)
            for p, off in offsets.items():
                if not 0 <= p < len(parts):
                    raise OffsetRangeError(f"topic {state.topic!r} has no partition {p}")
                hw = self.high_watermark(state.topic, p)
                if off > hw:
                    raise OffsetRangeError(f"offset {off} beyond high watermark {hw} of partition {p}")
                if off < state.committed[p]:
                    raise OffsetRangeError(
                        f"offset regression on partition {p}: {state.committed[p]} -> {off}")
            state.committed.update(offsets)
            self._refresh_floor(state.topic)
            return dict(state.committed)

    def _refresh_floor(self, topic: str) -> None:
        groups = [g for g in self._groups.values() if g.topic == topic]
        for i, p in enumerate(self._parts(topic)):
            floor = min(g.committed[i] for g in groups) if groups else 0
            with p.lock:
                p.trim(floor)

    def lag(self, group_id: str, partitions: Iterable[int] | None = None) -> dict[int, int]:
        with self._lock:
            state = self.group(group_id)
            committed = dict(state.committed)
            topic = state.topic
        hw = self.watermarks(topic)
        keys = committed if partitions is None else partitions
        return {p: hw[p] - committed[p] for p in keys}

    # snapshot persistence for multi-command workflows
    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        try:
            directory.mkdir(parents=True, exist_ok=True)
            meta = {"config": vars(self.config), "topics": {}, "groups": {}}
            with self._lock:
                for name, parts in self._topics.items():
                    meta["topics"][name] = []
                    for i, p in enumerate(parts):
                        with p.lock:
                            meta["topics"][name].append(
                                {"high_watermark": p.high_watermark, "low_watermark": p.low_watermark})
                            with open(directory / f"{name}-{i}.log", "wb") as fh:
                                for j in range(p.first_batch, len(p.blobs)):
                                    blob = p.blobs[j]
                                    fh.write(_FRAME.pack(p.base_offsets[j], p.timestamps[j], len(blob)))
                                    fh.write(blob)
                for gid, g in self._groups.items():
                    meta["groups"][gid] = {"topic": g.topic, "committed": {str(k): v for k, v in g.committed.items()}}
            (directory / "broker.json").write_text(json.dumps(meta, indent=2))
        except OSError as exc:
            raise StorageError(f"cannot save log to {directory}: {exc}") from exc

    @classmethod
    def load(cls, directory: str | Path, **kw) -> "Broker":
        directory = Path(directory)
        try:
            meta = json.loads((directory / "broker.json").read_text())
            broker = cls(BrokerConfig(**meta["config"]), **kw)
            for name, parts in meta["topics"].items():
                broker.create_topic(name, len(parts))
                for i, info in enumerate(parts):
                    p = broker._topics[name][i]
                    data = (directory / f"{name}-{i}.log").read_bytes()
                    pos = 0
                    while pos < len(data):
                        base, ts, length = _FRAME.unpack_from(data, pos)
                        pos += _FRAME.size
                        blob = data[pos:pos + length]
                        pos += length
                        p.base_offsets.append(base)
                        p.timestamps.append(ts)
                        p.counts.append(read_header(blob)[1])
                        p.blobs.append(blob)
                    p.high_watermark = info["high_watermark"]
                    p.low_watermark = p.floor = info["low_watermark"]
            for gid, g in meta["groups"].items():
                broker._groups[gid] = ConsumerGroupState(
                    gid, g["topic"], {int(k): v for k, v in g["committed"].items()})
        except OSError as exc:
            raise StorageError(f"cannot load log from {directory}: {exc}") from exc
        except (KeyError, ValueError, struct.error) as exc:
            raise ParseError(f"corrupt log snapshot in {directory}: {exc}") from exc
        return broker


# -- producer / consumer -------------------------------------------------

class Producer:
    """Buffers messages and appends them in per-partition batches.

    The buffer flushes automatically once it holds ``batch_size`` messages.
    Each append is retried on transient failure up to ``max_retries`` times
    with a fixed backoff.
    """

    def __init__(self, broker: Broker, config: BrokerConfig | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.broker = broker
        self.config = config or broker.config
        self.codec = CODECS_BY_NAME[self.config.codec]
        self.sleep = sleep
        self._lock = threading.Lock()
        self._buffer: list[tuple[str, int, bytes, bytes, Ack]] = []
        self._sequence = 0
        self.auto_flushes = 0
        self.batches_sent = 0
        self.messages_sent = 0
        self.retries = 0

    @property
    def pending(self) -> int:
        return len(self._buffer)

    def produce(self, topic: str, key: bytes, payload: bytes) -> Ack:
        n = self.broker.topic(topic).partitions
        ack = Ack(partition_for(key, n))
        with self._lock:
            self._buffer.append((topic, ack.partition, key, payload, ack))
            if len(self._buffer) >= self.config.batch_size:
                self.auto_flushes += 1
                self._flush_locked()
        return ack

    def flush(self) -> int:
        with self._lock:
            return self._flush_locked()

    def _flush_locked(self) -> int:
        groups: dict[tuple[str, int], list] = {}
        for item in self._buffer:
            groups.setdefault((item[0], item[1]), []).append(item)
        sent = 0
        done: set[int] = set()
        try:
            for (topic, partition), items in groups.items():
                for start in range(0, len(items), self.config.batch_size):
                    chunk = items[start:start + self.config.batch_size]
                    batch = ProducerBatch([(k, v) for _, _, k, v, _ in chunk], self.codec, self._sequence)
                    base = self._append_with_retry(topic, partition, batch.encode())
                    self._sequence += 1
                    for j, item in enumerate(chunk):
                        item[4].offset = base + j
                        done.add(id(item))
                    sent += len(chunk)
                    self.batches_sent += 1
        finally:
            self._buffer = [item for item in self._buffer if id(item) not in done]
            self.messages_sent += sent
        return sent

    def _append_with_retry(self, topic: str, partition: int, blob: bytes) -> int:
        attempts = 0
        while True:
            attempts += 1
            try:
                return self.broker.append(topic, partition, blob)
            except TransientAppendError as exc:
                if attempts > self.config.max_retries:
                    raise BackpressureError(f"append to {topic}/{partition} failed: {exc}", attempts) from exc
                self.retries += 1
                self.sleep(self.config.retry_backoff_ms / 1000.0)


class Consumer:
    """Member of a consumer group reading an explicit partition set.

    ``poll`` always starts from the committed offsets, so messages are
    redelivered until committed.
    """

    _ids = 0

    def __init__(self, broker: Broker, group_id: str, topic: str, partitions: Iterable[int] | None = None):
        Consumer._ids += 1
        self.member = f"consumer-{Consumer._ids}"
        self.broker = broker
        self.group_id = group_id
        self.topic = topic
        n = broker.topic(topic).partitions
        self.partitions = sorted(range(n) if partitions is None else partitions)
        broker.join(group_id, topic, self.partitions, self.member)

    def poll(self, max_records: int = 500) -> list[LogMessage]:
        if not self.partitions:
            raise ConfigError("consumer has no assigned partitions")
        committed = self.broker.group(self.group_id).committed
        out: list[LogMessage] = []
        for p in self.partitions:
            if len(out) >= max_records:
                break
            out += self.broker.read(self.topic, p, committed[p], max_records - len(out))
        return out

    def commit(self, offsets: dict[int, int]) -> dict[int, int]:
        foreign = set(offsets) - set(self.partitions)
        if foreign:
            raise ConflictError(f"{self.member} does not own partitions {sorted(foreign)}")
        return self.broker.commit(self.group_id, offsets)

    def commit_messages(self, messages: Iterable[LogMessage]) -> dict[int, int]:
        offsets: dict[int, int] = {}
        for m in messages:
            offsets[m.partition] = max(offsets.get(m.partition, 0), m.offset + 1)
        return self.commit(offsets) if offsets else self.committed()

    def committed(self) -> dict[int, int]:
        state = self.broker.group(self.group_id)
        return {p: state.committed[p] for p in self.partitions}

    def lag(self) -> dict[int, int]:
        return self.broker.lag(self.group_id, self.partitions)

    def close(self) -> None:
        self.broker.leave(self.group_id, self.member)
