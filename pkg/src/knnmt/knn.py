"""Turning retrieved neighbors into token distributions and mixing them with
the model's own distribution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from knnmt.datastore import Retrieved


@dataclass(frozen=True)
class KnnParams:
    """Retrieval settings: neighbor count k, softmax temperature over negative
    distances, and the mixture weight on the retrieval distribution. squared
    switches the kernel to exp(-d^2/T) (ablation; plain distances are the
    default and give distance-shift invariance)."""

    k: int = 8
    temperature: float = 10.0
    interp_weight: float = 0.4
    squared: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.interp_weight <= 1.0:
            raise ValueError(f"interp_weight must be in [0, 1], got {self.interp_weight}")


def neighbor_weights(distances: np.ndarray, temperature: float,
                     squared: bool = False) -> np.ndarray:
    """Normalized exp(-distance / T) over one retrieval, min-shifted so a
    constant added to every distance cannot change the result."""
    d = np.asarray(distances, dtype=np.float64)
    if squared:
        d = d * d
    w = np.exp(-(d - d.min()) / temperature)
    return w / w.sum()


def knn_distribution(retrieved: Retrieved, temperature: float, vocab_size: int,
                     squared: bool = False) -> np.ndarray:
    """Distribution over the vocabulary: mass exp(-d/T), summed per retrieved
    value, normalized. Mass sits only on retrieved values."""
    if len(retrieved) == 0:
        raise ValueError("cannot build a distribution from an empty retrieval")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    dist = np.zeros(vocab_size, dtype=np.float64)
    np.add.at(dist, retrieved.values,
              neighbor_weights(retrieved.distances, temperature, squared))
    return dist


def aggregate_probs(distances: np.ndarray, values: np.ndarray, temperature: float,
                    squared: bool = False) -> dict[int, float]:
    """Sparse form of knn_distribution for one retrieval: value -> probability."""
    weights = neighbor_weights(distances, temperature, squared)
    probs: dict[int, float] = {}
    for v, w in zip(values.tolist(), weights.tolist()):
        probs[v] = probs.get(v, 0.0) + w
    return probs


def max_knn_prob(p_knn: np.ndarray) -> float:
    """The retrieval distribution's peak, a skewness proxy: high for confident
    content-word retrievals, low for flat function-word ones."""
    return float(np.max(p_knn))


def interpolate(p_nmt: np.ndarray, p_knn: np.ndarray, interp_weight: float) -> np.ndarray:
    """interp_weight * p_knn + (1 - interp_weight) * p_nmt."""
    if not 0.0 <= interp_weight <= 1.0:
        raise ValueError(f"interp_weight must be in [0, 1], got {interp_weight}")
    if p_nmt.shape != p_knn.shape:
        raise ValueError(f"distribution shapes differ: {p_nmt.shape} vs {p_knn.shape}")
    return interp_weight * p_knn + (1.0 - interp_weight) * p_nmt
