"""Full vs chunked ingestion over identical seeded data.

    python3 scripts/stress_compare.py --records 1000000 --chunk-size 100000 --out results/stress
"""
import argparse
import json
from pathlib import Path

from citypulse.bench import PipelineConfig, check_invariants, compare_strategies, emit_report


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--records", type=int, default=1_000_000)
    ap.add_argument("--chunk-size", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--out", type=Path, default=Path("results/stress"))
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    config = PipelineConfig()
    result = compare_strategies(args.records, args.chunk_size, args.seed, config, args.out / "work")
    text = emit_report(result, "text")
    print(text, end="")
    (args.out / "report.txt").write_text(text)
    (args.out / "report.csv").write_text(emit_report(result, "csv"))
    runs = {m.strategy: m.to_dict() for m in (result.full_run, result.chunked_run)}
    (args.out / "metrics.json").write_text(json.dumps(runs, indent=2))
    problems = [p for m in (result.full_run, result.chunked_run)
                for p in check_invariants(m, config.broker.queue_capacity)]
    for p in problems:
        print("invariant violated:", p)
    return 1 if problems else 0


if __name__ == "__main__":
    raise SystemExit(main())
