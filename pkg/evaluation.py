"""
Evaluation Module
Correct prediction rate, confusion matrix and RIS phase correlation
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)


@dataclass
class EvalReport:
    """eta = trace(confusion) / total; confusion rows are true classes"""
    eta: float
    confusion: np.ndarray
    config: Dict = field(default_factory=dict)
    wall_seconds: float = 0.0
    mean_inference_ms: float = 0.0

    @property
    def n_samples(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> Dict:
        return {'eta': self.eta, 'n_samples': self.n_samples, 'wall_seconds': self.wall_seconds,
                'mean_inference_ms': self.mean_inference_ms, 'confusion': self.confusion.tolist(),
                'config': self.config}


def prediction_rate(predictions: np.ndarray, labels: np.ndarray, n_classes: Optional[int] = None,
                    run_config: Optional[Dict] = None, wall_seconds: float = 0.0) -> EvalReport:
    """
    Fraction of rows whose argmax equals the label; ties go to the lowest index.

    Args:
        predictions: (N, N_c) probability rows
        labels: (N,) true labels

    Raises:
        ValueError: empty input or length mismatch
    """
    predictions = np.atleast_2d(np.asarray(predictions, dtype=float))
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("Cannot compute a prediction rate on empty input")
    if predictions.shape[0] != labels.shape[0]:
        raise ValueError(f"{predictions.shape[0]} predictions for {labels.shape[0]} labels")
    n_classes = n_classes or predictions.shape[1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"Labels must lie in [0, {n_classes - 1}]")

    # np.argmax returns the first maximal index
    predicted = np.argmax(predictions, axis=1)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predicted), 1)
    eta = float(np.trace(confusion) / labels.size)
    return EvalReport(eta=eta, confusion=confusion, config=dict(run_config or {}),
                      wall_seconds=wall_seconds,
                      mean_inference_ms=1000.0 * wall_seconds / labels.size)


@dataclass
class CorrelationMatrix:
    """K x K phase correlations in [0, 1], symmetric with unit diagonal"""
    entries: np.ndarray

    @property
    def k(self) -> int:
        return self.entries.shape[0]

    def mean_offdiagonal(self, start: int = 1) -> float:
        """Mean of the off-diagonal entries among steps start..K-1 (0-based)"""
        block = self.entries[start:, start:]
        n = block.shape[0]
        if n < 2:
            return float('nan')
        return float((block.sum() - np.trace(block)) / (n * (n - 1)))

    def to_frame(self) -> pd.DataFrame:
        labels = [f"k{i + 1}" for i in range(self.k)]
        return pd.DataFrame(self.entries, index=labels, columns=labels)

    def save(self, csv_path: str, matrix_path: Optional[str] = None):
        """CSV with step labels, plus an optional plain whitespace-separated matrix"""
        self.to_frame().to_csv(csv_path)
        if matrix_path:
            np.savetxt(matrix_path, self.entries, fmt='%.10f')
        logger.info(f"Correlation matrix {self.k}x{self.k} written to {csv_path}")


def phase_correlation(omegas: Sequence[np.ndarray]) -> CorrelationMatrix:
    """
    Entry (k1, k2) = |omega_k1^H omega_k2| / (||omega_k1|| ||omega_k2||).

    Raises:
        ValueError: no vectors, length mismatch or a zero vector
    """
    if len(omegas) == 0:
        raise ValueError("Need at least one phase configuration")
    lengths = {np.shape(w) for w in omegas}
    if len(lengths) != 1:
        raise ValueError(f"Phase configurations have different shapes: {sorted(lengths)}")

    W = np.asarray(omegas, dtype=complex)
    norms = np.linalg.norm(W, axis=1)
    if np.any(norms == 0):
        raise ValueError("Zero phase configuration")
    gram = np.abs(W.conj() @ W.T) / np.outer(norms, norms)
    entries = 0.5 * (gram + gram.T)
    np.fill_diagonal(entries, 1.0)
    return CorrelationMatrix(np.clip(entries, 0.0, 1.0))


def averaged_correlation(omega_sets: Sequence[Sequence[np.ndarray]]) -> CorrelationMatrix:
    """
    Elementwise mean of per-episode correlation matrices.

    Args:
        omega_sets: One (K, N_s) phase stack per episode, e.g. EpisodeTrace.omegas

    Raises:
        ValueError: empty input or episodes with different K
    """
    if len(omega_sets) == 0:
        raise ValueError("Need at least one episode")
    ks = {len(w) for w in omega_sets}
    if len(ks) != 1:
        raise ValueError(f"Episodes have different K: {sorted(ks)}")

    total = np.zeros((ks.pop(),) * 2)
    for omegas in omega_sets:
        total += phase_correlation(omegas).entries
    entries = total / len(omega_sets)
    np.fill_diagonal(entries, 1.0)
    return CorrelationMatrix(entries)
