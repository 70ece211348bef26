"""Score a trained model over 20 sequential batches with one noisy batch.

    python3 scripts/batch_stability.py --model results/reference/model.npz --out results/stability
"""
import argparse
from pathlib import Path

import numpy as np

from citypulse.learner import LABELS, load_model
from citypulse.stability import StabilityConfig, adjacency_holds, run_stability


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", type=Path, required=True)
    ap.add_argument("--noisy-batch", type=int, default=14)
    ap.add_argument("--noise", type=float, default=0.5)
    ap.add_argument("--out", type=Path, default=Path("results/stability"))
    args = ap.parse_args()

    model = load_model(args.model)
    series = run_stability(model, StabilityConfig(noisy_batch=args.noisy_batch, noise_intensity=args.noise))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "series.csv").write_text(series.to_csv())
    np.savetxt(args.out / "confusion.csv", series.combined_confusion, fmt="%d", delimiter=",",
               header=",".join(l.name for l in LABELS), comments="")

    for i, f1 in enumerate(series.macro_f1(), start=1):
        bar = "#" * int(round(f1 * 50))
        print(f"batch {i:>2}  {f1:.4f}  {bar}")
    cm = series.combined_confusion
    print(f"minimum at batch {series.worst_batch()}")
    print(f"Low<->High {cm[0, 2] + cm[2, 0]}, Low<->Medium {cm[0, 1] + cm[1, 0]}, "
          f"Medium<->High {cm[1, 2] + cm[2, 1]}; adjacency holds: {adjacency_holds(cm)}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
