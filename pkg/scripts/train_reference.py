"""Seeded reference run: pipeline into the warehouse, cluster-label, fit and score the forest.

    python3 scripts/train_reference.py --records 200000 --out results/reference
"""
import argparse
from pathlib import Path

from citypulse.bench import Full, PipelineConfig, run_pipeline
from citypulse.learner import TrainConfig, train_congestion_model


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--records", type=int, default=200_000)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--trees", type=int, default=100)
    ap.add_argument("--out", type=Path, default=Path("results/reference"))
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    run = run_pipeline(args.records, Full(), args.seed, PipelineConfig(), args.out / "pipeline")
    X = run.warehouse.features()
    result = train_congestion_model(X, TrainConfig(n_trees=args.trees))
    result.model.save(args.out / "model.npz")
    (args.out / "metrics.csv").write_text(result.report.to_csv())
    text = result.report.to_text()
    (args.out / "metrics.txt").write_text(text)
    print(f"{len(X):,} warehouse rows; {len(result.test_index):,} held out")
    print(text, end="")
    print(f"model written to {args.out / 'model.npz'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
