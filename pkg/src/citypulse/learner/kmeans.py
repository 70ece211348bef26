"""KMeans with k-means++ seeding, and the cluster -> congestion level mapping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateClusteringError, InsufficientDataError
from ..features import FEATURE_NAMES
from .labels import CongestionLabel
from .scaling import Standardizer, standardize_fit

# Acceleration is regime-independent noise and time headway is a heavy-tailed
# ratio; clustering on them splits on noise or isolates outliers.
DEFAULT_CLUSTER_FEATURES = ("v_vel", "space_headway")


@dataclass
class KMeansModel:
    centroids: np.ndarray
    inertia: float
    n_iter: int
    inertia_history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.centroids)

    def predict(self, Z) -> np.ndarray:
        return _assign(np.asarray(Z, dtype=float), self.centroids)[0]


def _assign(Z: np.ndarray, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = ((Z[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    return labels, d2[np.arange(len(Z)), labels]


def _plusplus(Z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(Z)
    centers = [Z[rng.integers(n)]]
    d2 = ((Z - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        idx = rng.choice(n, p=d2 / d2.sum())
        centers.append(Z[idx])
        d2 = np.minimum(d2, ((Z - Z[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _lloyd(Z, C, max_iter, tol) -> KMeansModel:
    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        labels, d2 = _assign(Z, C)
        history.append(float(d2.sum()))
        new = np.empty_like(C)
        for j in range(len(C)):
            members = labels == j
            if members.any():
                new[j] = Z[members].mean(axis=0)
            else:
                far = int(d2.argmax())
                new[j] = Z[far]
                d2[far] = 0.0
        shift = float(np.sqrt(((new - C) ** 2).sum(axis=1)).max())
        C = new
        if shift < tol:
            break
    _, d2 = _assign(Z, C)
    inertia = float(d2.sum())
    history.append(inertia)
    return KMeansModel(centroids=C, inertia=inertia, n_iter=n_iter, inertia_history=history)


def kmeans_fit(Z, k: int = 3, seed: int = 0, max_iter: int = 100, tol: float = 1e-4,
               n_init: int = 1) -> KMeansModel:
    """Lloyd iterations from k-means++ starts; the lowest-inertia restart wins."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if len(Z) < k:
        raise InsufficientDataError(f"need at least k={k} rows, got {len(Z)}")
    if len(np.unique(Z, axis=0)) < k:
        raise DegenerateClusteringError(f"fewer than k={k} distinct points")
    rng = np.random.Generator(np.random.PCG64(seed))
    best = None
    for _ in range(max(1, n_init)):
        model = _lloyd(Z, _plusplus(Z, k, rng), max_iter, tol)
        if best is None or model.inertia < best.inertia:
            best = model
    return best


def map_clusters_to_labels(model: KMeansModel, stats: Standardizer) -> dict[int, CongestionLabel]:
    """Fastest centroid -> Low, slowest -> High; equal speeds rank by shorter space headway."""
    if model.k != 3:
        raise ValueError("congestion mapping needs exactly 3 clusters")
    centers = stats.inverse_transform(model.centroids)
    vel = centers[:, stats.column("v_vel")]
    gap = centers[:, stats.column("space_headway")]
    order = sorted(range(3), key=lambda j: (-vel[j], -gap[j]))
    return {j: CongestionLabel(rank) for rank, j in enumerate(order)}


@dataclass
class CongestionLabeler:
    """Unsupervised label generator over full feature rows."""

    standardizer: Standardizer
    feature_index: tuple[int, ...]
    kmeans: KMeansModel
    label_map: dict[int, CongestionLabel]

    @classmethod
    def fit(cls, X, seed: int = 0, features: tuple[str, ...] = DEFAULT_CLUSTER_FEATURES,
            **kmeans_kw) -> "CongestionLabeler":
        X = np.asarray(X, dtype=float)
        index = tuple(FEATURE_NAMES.index(f) for f in features)
        Z, stats = standardize_fit(X[:, index], names=tuple(features))
        model = kmeans_fit(Z, k=3, seed=seed, **kmeans_kw)
        return cls(stats, index, model, map_clusters_to_labels(model, stats))

    def label(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if len(X) == 0:
            return np.zeros(0, dtype=np.int64)
        clusters = self.kmeans.predict(self.standardizer.transform(X[:, self.feature_index]))
        lookup = np.array([int(self.label_map[j]) for j in range(self.kmeans.k)])
        return lookup[clusters]
