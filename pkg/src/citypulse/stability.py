"""Sequential batch-stability reenactment: score a trained model over fresh batches, one of them noisy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import GeneratorConfig, generate, inject_noise
from .errors import ConfigError
from .learner.metrics import BatchSeries, sequential_batch_eval
from .learner.model import CongestionModel
from .streamproc import clean, feature_matrix


@dataclass(frozen=True)
class StabilityConfig:
    n_batches: int = 20
    batch_size: int = 10_000
    noisy_batch: int = 14  # 1-based
    noise_intensity: float = 0.5
    data_seed: int = 7
    noise_seed: int = 14
    missing_prob: float = 0.02

    def __post_init__(self):
        if self.n_batches < 1 or self.batch_size < 1:
            raise ConfigError("n_batches and batch_size must be positive")
        if not 1 <= self.noisy_batch <= self.n_batches:
            raise ConfigError(f"noisy_batch must lie in 1..{self.n_batches}")


def build_batches(model: CongestionModel, config: StabilityConfig = StabilityConfig()) -> list[tuple]:
    """(features, truth) per batch.

    Truth comes from the labeler on each batch's clean features; the model is
    scored on the (possibly noised) features it would actually receive.
    """
    raw = generate(GeneratorConfig(num_records=config.n_batches * config.batch_size,
                                   seed=config.data_seed, missing_prob=config.missing_prob))
    batches = []
    for b in range(config.n_batches):
        chunk = raw[b * config.batch_size:(b + 1) * config.batch_size]
        truth = model.labeler.label(feature_matrix(clean(r) for r in chunk))
        if b + 1 == config.noisy_batch:
            chunk = inject_noise(chunk, config.noise_intensity, config.noise_seed)
        batches.append((feature_matrix(clean(r) for r in chunk), truth))
    return batches


def run_stability(model: CongestionModel, config: StabilityConfig = StabilityConfig()) -> BatchSeries:
    return sequential_batch_eval(build_batches(model, config), model, expected=config.n_batches)


def adjacency_holds(confusion: np.ndarray) -> bool:
    """Low/High confusions stay below both neighbouring-class confusions."""
    cm = np.asarray(confusion)
    low_high = cm[0, 2] + cm[2, 0]
    return bool(low_high <= cm[0, 1] + cm[1, 0] and low_high <= cm[1, 2] + cm[2, 1])
