"""``citypulse`` command line: every pipeline stage as a subcommand over shared files.

Exit codes: 0 ok, 2 usage, 3 config, 4 storage or parse failure, 5 backpressure,
6 invariant violation, 7 insufficient data.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import __version__
from .bench import (
    GROUP, TOPIC, Chunked, Full, check_invariants, compare_strategies, emit_report, run_pipeline,
)
from .config import Settings, load_settings
from .datagen import generate, read_csv, write_csv
from .errors import (
    BackpressureError, ConfigError, InsufficientDataError, InvariantViolation, ParseError, StorageError,
)
from .learner.forest import feature_importances
from .learner.metrics import evaluate
from .learner.model import load_model, train_congestion_model
from .mlog import Broker, Consumer, Producer
from .serve import CityPulseService, make_server
from .stability import adjacency_holds, run_stability
from .streamproc import (
    MicroBatchProcessor, TempStore, Warehouse, aggregate_by_lane, clean, encode_record, feature_matrix,
    record_key,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_STORAGE = 4
EXIT_BACKPRESSURE = 5
EXIT_INVARIANT = 6
EXIT_INSUFFICIENT = 7


def _write(path: str | None, text: str) -> None:
    if path is None:
        return
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


# -- subcommands ---------------------------------------------------------

def cmd_generate(args, settings: Settings) -> int:
    overrides = {"num_records": args.records, "seed": args.seed, "missing_prob": args.missing_prob}
    config = dataclasses.replace(settings.generator, **{k: v for k, v in overrides.items() if v is not None})
    n = write_csv(generate(config), args.out)
    print(f"wrote {n} records to {args.out}")
    return EXIT_OK


def cmd_ingest(args, settings: Settings) -> int:
    records = read_csv(args.input)
    log_dir = Path(args.log)
    if (log_dir / "broker.json").exists():
        broker = Broker.load(log_dir)
    else:
        broker = Broker(settings.broker)
    if TOPIC not in {t.name for t in broker.topics()}:
        broker.create_topic(TOPIC)
    producer = Producer(broker, settings.broker)
    for r in records:
        producer.produce(TOPIC, record_key(r), encode_record(r))
    producer.flush()
    broker.save(log_dir)
    print(f"ingested {len(records)} records into {TOPIC} "
          f"({producer.batches_sent} batches, {producer.retries} retries)")
    return EXIT_OK


def cmd_process(args, settings: Settings) -> int:
    log_dir = Path(args.log)
    broker = Broker.load(log_dir)
    stream = settings.pipeline()
    model = load_model(args.model) if args.model else None
    labeler = model.labeler.label if model else None
    warehouse = Warehouse(args.warehouse)
    rows = dead = 0
    for p in range(broker.topic(TOPIC).partitions):
        temp = TempStore(Path(args.warehouse) / f"temp-{p}", stream.flush_threshold)
        proc = MicroBatchProcessor(Consumer(broker, GROUP, TOPIC, [p]), temp, warehouse,
                                   stream.consumer_batch_size, labeler)
        rows += proc.drain()
        dead += len(proc.dead_letters)
        proc.consumer.close()
    broker.save(log_dir)
    print(f"committed {rows} rows ({dead} dead letters); warehouse holds {warehouse.row_count}")
    print(aggregate_by_lane(warehouse).to_text(), end="")
    print(f"content hash {warehouse.content_hash()}")
    return EXIT_OK


def cmd_train(args, settings: Settings) -> int:
    if args.warehouse:
        X = Warehouse(args.warehouse).features()
    else:
        X = feature_matrix(clean(r) for r in read_csv(args.input))
    config = settings.learner
    if args.seed is not None:
        config = dataclasses.replace(config, label_seed=args.seed, forest_seed=args.seed, split_seed=args.seed)
    if args.trees is not None:
        config = dataclasses.replace(config, n_trees=args.trees)
    result = train_congestion_model(X, config)
    result.model.save(args.model_out)
    print(result.report.to_text(), end="")
    print(f"model saved to {args.model_out}")
    _write(args.report, result.report.to_csv())
    return EXIT_OK


def cmd_evaluate(args, settings: Settings) -> int:
    model = load_model(args.model)
    if args.stability:
        overrides = {"noise_intensity": args.noise, "noisy_batch": args.noisy_batch}
        config = dataclasses.replace(settings.stability, **{k: v for k, v in overrides.items() if v is not None})
        series = run_stability(model, config)
        for i, (acc, f1) in enumerate(zip(series.accuracy(), series.macro_f1()), start=1):
            print(f"batch {i:>2}  accuracy {acc:.4f}  macro F1 {f1:.4f}")
        print(f"lowest macro F1 in batch {series.worst_batch()}")
        print("combined confusion (rows = true, cols = predicted)")
        for row in series.combined_confusion:
            print("  " + " ".join(f"{int(c):>8d}" for c in row))
        print(f"adjacent-level confusion dominates: {adjacency_holds(series.combined_confusion)}")
        _write(args.report, series.to_csv())
        return EXIT_OK
    if not args.warehouse:
        raise ConfigError("evaluate needs --warehouse or --stability")
    X = Warehouse(args.warehouse).features()
    if len(X) == 0:
        raise InsufficientDataError("warehouse is empty")
    report = evaluate(model.predict(X), model.labeler.label(X), feature_importances(model.forest))
    print(report.to_text(), end="")
    _write(args.report, report.to_csv())
    return EXIT_OK


def cmd_bench(args, settings: Settings) -> int:
    defaults = settings.bench
    records = args.records if args.records is not None else defaults.records
    strategy = args.strategy or defaults.strategy
    chunk = args.chunk_size if args.chunk_size is not None else defaults.chunk_size
    seed = args.seed if args.seed is not None else defaults.seed
    config = settings.pipeline()
    if args.compare:
        result = compare_strategies(records, chunk, seed, config, args.workdir)
        runs = [result.full_run, result.chunked_run]
    else:
        ingestion = Chunked(chunk) if strategy == "chunked" else Full()
        result = run_pipeline(records, ingestion, seed, config, args.workdir).metrics
        runs = [result]
    print(emit_report(result, "text"), end="")
    _write(args.report, emit_report(result, "csv"))
    if args.metrics_json:
        _write(args.metrics_json, json.dumps(runs[-1].to_dict(), indent=2))
    for m in runs:
        if m.failed and "BackpressureError" in m.error:
            print(f"error: {m.error}", file=sys.stderr)
            return EXIT_BACKPRESSURE
    problems = [p for m in runs for p in check_invariants(m, config.broker.queue_capacity)]
    if problems:
        for p in problems:
            print(f"invariant violated: {p}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_serve(args, settings: Settings) -> int:
    service = CityPulseService(warehouse=Warehouse(args.warehouse) if args.warehouse else None)
    if args.model:
        service.load_model(args.model)
    if args.metrics_json:
        try:
            service.board.publish(json.loads(Path(args.metrics_json).read_text(encoding="utf-8")))
        except OSError as exc:
            raise StorageError(f"cannot read {args.metrics_json}: {exc}") from exc
    server = make_server(service, args.host, args.port)
    print(f"serving on http://{args.host}:{server.server_address[1]}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


# -- parser --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="citypulse", description="Traffic stream pipeline and congestion model")
    parser.add_argument("--config", help="JSON file overriding defaults")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("generate", help="write synthetic telemetry to CSV")
    p.add_argument("--records", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--missing-prob", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("ingest", help="produce a CSV into the log snapshot directory")
    p.add_argument("--input", required=True)
    p.add_argument("--log", required=True, help="log snapshot directory (created or extended)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("process", help="drain the log into the warehouse")
    p.add_argument("--log", required=True)
    p.add_argument("--warehouse", required=True)
    p.add_argument("--model", help="label rows with this model's labeler while committing")
    p.set_defaults(func=cmd_process)

    p = sub.add_parser("train", help="cluster-label and fit the forest")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--warehouse")
    src.add_argument("--input", help="CSV of raw records")
    p.add_argument("--model-out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--trees", type=int)
    p.add_argument("--report", help="CSV metrics output")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a model on warehouse rows or the batch-stability reenactment")
    p.add_argument("--model", required=True)
    p.add_argument("--warehouse")
    p.add_argument("--stability", action="store_true")
    p.add_argument("--noise", type=float)
    p.add_argument("--noisy-batch", type=int)
    p.add_argument("--report", help="CSV output")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="end-to-end stress run")
    p.add_argument("--records", type=int)
    p.add_argument("--strategy", choices=("full", "chunked"))
    p.add_argument("--chunk-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--compare", action="store_true", help="run both strategies and check equivalence")
    p.add_argument("--report", help="CSV report output")
    p.add_argument("--metrics-json", help="write the last run's metrics as JSON")
    p.add_argument("--workdir")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="HTTP API")
    p.add_argument("--model")
    p.add_argument("--warehouse")
    p.add_argument("--metrics-json", help="metrics snapshot to publish on /metrics")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        settings = load_settings(args.config)
        return args.func(args, settings)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StorageError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STORAGE
    except BackpressureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BACKPRESSURE
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except InsufficientDataError as exc:
        print(f"insufficient data: {exc}", file=sys.stderr)
        return EXIT_INSUFFICIENT


if __name__ == "__main__":
    sys.exit(main())
