"""Dense float64 matrix helpers shared by every service.

A ``Matrix`` is a 2-D ``numpy.ndarray`` of float64; an ``Rng`` is a PCG64
``numpy.random.Generator``. Child generators are derived from
``(base_seed, *key)`` so parallel trials never share a stream.
"""
import math
from typing import Iterable, NamedTuple

import numpy as np

from ..core.exceptions import raise_invalid_input_error, raise_shape_error

Matrix = np.ndarray
Rng = np.random.Generator


class MatrixNorms(NamedTuple):
    """Row and whole-matrix norms."""
    row_l1: np.ndarray
    row_l2: np.ndarray
    frobenius: float


def make_rng(seed: int, *key: int) -> Rng:
    """Create a generator for ``seed``, optionally a child stream keyed by ``key``."""
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(sequence))


def as_matrix(values, name: str = "matrix") -> Matrix:
    """Coerce ``values`` into a finite float64 matrix."""
    matrix = np.asarray(values, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix.reshape(1, -1)
    if matrix.ndim != 2:
        raise_shape_error(name, "2-D array", f"{matrix.ndim}-D array")
    if matrix.shape[0] < 1 or matrix.shape[1] < 1:
        raise_shape_error(name, "at least 1x1", matrix.shape)
    if not np.all(np.isfinite(matrix)):
        raise_invalid_input_error(name, "non-finite entries")
    return matrix


def row_softmax(logits) -> Matrix:
    """Row-wise softmax with per-row max subtraction."""
    z = as_matrix(logits, "logits")
    shifted = z - z.max(axis=1, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=1, keepdims=True)


def norms(matrix) -> MatrixNorms:
    """Row l1, row l2 and Frobenius norms."""
    m = as_matrix(matrix)
    return MatrixNorms(
        row_l1=np.abs(m).sum(axis=1),
        row_l2=np.sqrt((m * m).sum(axis=1)),
        frobenius=float(np.sqrt((m * m).sum())),
    )


def max_row_norm(matrix) -> float:
    """Largest row l2 norm; the per-row reading of ||V||_2."""
    return float(norms(matrix).row_l2.max())


def gaussian_matrix(rows: int, cols: int, mean: float, std: float, rng: Rng) -> Matrix:
    """I.i.d. Normal(mean, std^2) entries drawn from ``rng``."""
    if std < 0 or not math.isfinite(std):
        raise_invalid_input_error("std", f"must be finite and >= 0, got {std}")
    if rows < 1 or cols < 1:
        raise_shape_error("gaussian_matrix", "rows, cols >= 1", (rows, cols))
    return rng.normal(loc=mean, scale=std, size=(rows, cols)).astype(np.float64)


def stable_sum(values: Iterable[float]) -> float:
    """Compensated summation; independent of accumulation order up to rounding of the inputs."""
    return math.fsum(float(v) for v in values)
