"""Labeler + forest bundle: training protocol and on-disk artifact."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ParseError, StorageError
from ..features import FEATURE_NAMES
from .forest import DecisionTree, RandomForestModel, feature_importances, rf_fit
from .kmeans import DEFAULT_CLUSTER_FEATURES, CongestionLabeler, KMeansModel
from .labels import LABELS, CongestionLabel
from .metrics import EvalReport, evaluate
from .scaling import Standardizer

ARTIFACT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    label_seed: int = 0
    forest_seed: int = 0
    split_seed: int = 0
    test_fraction: float = 0.2
    n_trees: int = 100
    max_depth: int = 16
    min_leaf: int = 1
    max_features: int = 2
    cluster_features: tuple[str, ...] = DEFAULT_CLUSTER_FEATURES
    kmeans_restarts: int = 1
    kmeans_max_iter: int = 100
    kmeans_tol: float = 1e-4


@dataclass
class CongestionModel:
    labeler: CongestionLabeler
    forest: RandomForestModel
    meta: dict = field(default_factory=dict)

    def predict(self, X) -> np.ndarray:
        return self.forest.predict(X)

    def vote_fractions(self, X) -> np.ndarray:
        return self.forest.vote_fractions(X)

    def save(self, path: str | Path) -> None:
        save_model(self, path)


@dataclass
class TrainingResult:
    model: CongestionModel
    report: EvalReport
    labels: np.ndarray
    train_index: np.ndarray
    test_index: np.ndarray


def stratified_split(y, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class shuffle; round(test_fraction * class size) rows of each class go to test."""
    y = np.asarray(y)
    rng = np.random.Generator(np.random.PCG64(seed))
    train, test = [], []
    for cls in np.unique(y):
        members = np.flatnonzero(y == cls)
        rng.shuffle(members)
        cut = int(round(test_fraction * len(members)))
        test.append(members[:cut])
        train.append(members[cut:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def train_congestion_model(X, config: TrainConfig = TrainConfig()) -> TrainingResult:
    """Label every row with KMeans, split 80/20 by label, fit the forest, score the held-out part."""
    X = np.asarray(X, dtype=float)
    labeler = CongestionLabeler.fit(
        X, seed=config.label_seed, features=config.cluster_features,
        n_init=config.kmeans_restarts, max_iter=config.kmeans_max_iter, tol=config.kmeans_tol,
    )
    y = labeler.label(X)
    train_idx, test_idx = stratified_split(y, config.test_fraction, config.split_seed)
    forest = rf_fit(X[train_idx], y[train_idx], n_trees=config.n_trees, seed=config.forest_seed,
                    max_depth=config.max_depth, min_leaf=config.min_leaf,
                    max_features=config.max_features)
    report = evaluate(forest.predict(X[test_idx]), y[test_idx], feature_importances(forest))
    meta = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(config).items()}
    meta["train_rows"] = int(len(train_idx))
    meta["test_rows"] = int(len(test_idx))
    return TrainingResult(CongestionModel(labeler, forest, meta), report, y, train_idx, test_idx)


# -- artifact ------------------------------------------------------------

_TREE_ARRAYS = ("feature", "threshold", "left", "right", "value", "impurity")


def save_model(model: CongestionModel, path: str | Path) -> None:
    lab = model.labeler
    trees = model.forest.trees
    arrays = {
        "version": np.array(ARTIFACT_VERSION),
        "meta": np.array(json.dumps(model.meta)),
        "feature_names": np.array(FEATURE_NAMES),
        "std_mean": lab.standardizer.mean,
        "std_std": lab.standardizer.std,
        "std_names": np.array(lab.standardizer.names),
        "feature_index": np.array(lab.feature_index),
        "centroids": lab.kmeans.centroids,
        "kmeans_stats": np.array([lab.kmeans.inertia, lab.kmeans.n_iter]),
        "label_map": np.array([int(lab.label_map[j]) for j in range(lab.kmeans.k)]),
        "forest_shape": np.array([model.forest.n_features, model.forest.max_features]),
        "tree_sizes": np.array([t.n_nodes for t in trees]),
        "tree_seeds": np.array([t.seed for t in trees], dtype=np.uint64),
        "tree_importance": np.array([t.importance for t in trees]).reshape(len(trees), -1),
    }
    for name in _TREE_ARRAYS:
        arrays[f"tree_{name}"] = np.concatenate([getattr(t, name) for t in trees])
    try:
        with open(path, "wb") as fh:
            np.savez_compressed(fh, **arrays)
    except OSError as exc:
        raise StorageError(f"cannot write model {path}: {exc}") from exc


def load_model(path: str | Path) -> CongestionModel:
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except OSError as exc:
        raise StorageError(f"cannot read model {path}: {exc}") from exc
    except ValueError as exc:
        raise ParseError(f"{path} is not a model artifact: {exc}") from exc
    if int(data.get("version", -1)) != ARTIFACT_VERSION:
        raise ParseError(f"{path}: unsupported model artifact version")

    standardizer = Standardizer(data["std_mean"], data["std_std"], tuple(str(s) for s in data["std_names"]))
    inertia, n_iter = data["kmeans_stats"]
    kmeans = KMeansModel(data["centroids"], float(inertia), int(n_iter))
    label_map = {j: CongestionLabel(int(v)) for j, v in enumerate(data["label_map"])}
    labeler = CongestionLabeler(standardizer, tuple(int(i) for i in data["feature_index"]), kmeans, label_map)

    bounds = np.r_[0, np.cumsum(data["tree_sizes"])]
    trees = []
    for i, seed in enumerate(data["tree_seeds"]):
        lo, hi = bounds[i], bounds[i + 1]
        parts = {name: data[f"tree_{name}"][lo:hi] for name in _TREE_ARRAYS}
        trees.append(DecisionTree(**parts, importance=data["tree_importance"][i], seed=int(seed)))
    n_features, max_features = (int(v) for v in data["forest_shape"])
    forest = RandomForestModel(trees, n_features, max_features)
    return CongestionModel(labeler, forest, json.loads(str(data["meta"])))


__all__ = [
    "CongestionModel", "TrainConfig", "TrainingResult", "load_model", "save_model",
    "stratified_split", "train_congestion_model", "LABELS",
]
