from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InsufficientDataError

MIN_STD = 1e-12


@dataclass(frozen=True)
class Standardizer:
    """Per-column mean and population std.  Columns with std below MIN_STD are only shifted."""

    mean: np.ndarray
    std: np.ndarray
    names: tuple[str, ...] = ()

    @property
    def scale(self) -> np.ndarray:
        return np.where(self.std >= MIN_STD, self.std, 1.0)

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.scale

    def inverse_transform(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=float) * self.scale + self.mean

    def column(self, name: str) -> int:
        return self.names.index(name)


def standardize_fit(X, names: tuple[str, ...] = ()) -> tuple[np.ndarray, Standardizer]:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < 2:
        raise InsufficientDataError(f"standardization needs at least 2 rows, got {X.shape[0]}")
    stats = Standardizer(mean=X.mean(axis=0), std=X.std(axis=0), names=tuple(names))
    return stats.transform(X), stats
