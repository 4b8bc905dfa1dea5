"""Dense linear-algebra and probability kernels shared by the other modules.

All arrays are float64. Values handed out are read-only numpy arrays so they
can be shared between threads without copies.
"""
from dataclasses import dataclass

import numpy as np
from scipy import special

from dualpt.errors import (DegenerateVector, InvalidEmbedding, InvalidLogits,
                           InvalidMarginal, InvalidTemperature, ShapeMismatch)

PROB_TOL = 1e-12


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64)
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class EmbeddingMatrix:
    """A rows x dim block of feature vectors (tokens, prompts or descriptors)."""
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ShapeMismatch(f'Expected a 2-d block, got shape {data.shape}')
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ShapeMismatch(f'Empty embedding block {data.shape}')
        if not np.all(np.isfinite(data)):
            raise InvalidEmbedding('Embedding block has non-finite entries')
        object.__setattr__(self, 'data', _frozen(data))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ProbVector:
    weights: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        if weights.ndim != 1 or weights.size < 1:
            raise ShapeMismatch(f'Expected a non-empty vector, got shape {weights.shape}')
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise InvalidMarginal('Probability weights must be finite and nonnegative')
        if abs(weights.sum() - 1.0) > PROB_TOL:
            raise InvalidMarginal(f'Probability weights sum to {weights.sum()!r}, not 1')
        object.__setattr__(self, 'weights', _frozen(weights))

    @staticmethod
    def uniform(n: int) -> 'ProbVector':
        return ProbVector(np.full(n, 1.0 / n))

    def __len__(self):
        return self.weights.size

    def argmax(self) -> int:
        return int(np.argmax(self.weights))


def as_matrix(block) -> np.ndarray:
    """Coerce an EmbeddingMatrix or array-like to a validated 2-d array."""
    if isinstance(block, EmbeddingMatrix):
        return block.data
    return EmbeddingMatrix(block).data


def as_weights(vector) -> np.ndarray:
    if isinstance(vector, ProbVector):
        return vector.weights
    return ProbVector(vector).weights


def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if not norm > 0:
        raise DegenerateVector(f'Cannot normalize a vector of norm {norm}')
    return v / norm


def normalize_rows(block) -> np.ndarray:
    """Unit-normalize the last axis of an array of any rank."""
    block = np.asarray(block, dtype=np.float64)
    norms = np.linalg.norm(block, axis=-1, keepdims=True)
    if np.any(~(norms > 0)):
        raise DegenerateVector('Block has a zero-norm row')
    return block / norms


def cosine_matrix(A, B) -> np.ndarray:
    A, B = as_matrix(A), as_matrix(B)
    if A.shape[1] != B.shape[1]:
        raise ShapeMismatch(f'Dimension mismatch: {A.shape[1]} vs {B.shape[1]}')
    return np.clip(normalize_rows(A) @ normalize_rows(B).T, -1.0, 1.0)


def _check_temperature(tau: float):
    if not tau > 0:
        raise InvalidTemperature(f'Temperature must be positive, got {tau}')


def softmax(logits, tau: float = 1.0) -> ProbVector:
    _check_temperature(tau)
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or not np.all(np.isfinite(logits)):
        raise InvalidLogits('softmax expects a finite 1-d vector of logits')
    # scipy subtracts the max before exponentiating
    return ProbVector(special.softmax(logits / tau))


def softmax_rows(logits: np.ndarray, tau: float = 1.0, axis: int = -1) -> np.ndarray:
    _check_temperature(tau)
    return special.softmax(np.asarray(logits, dtype=np.float64) / tau, axis=axis)


def log_softmax_rows(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    return special.log_softmax(np.asarray(logits, dtype=np.float64), axis=axis)
