"""Flat parameter-vector algebra.

Parameter vectors are plain one-dimensional ``float64`` numpy arrays. Every
helper here returns a fresh array and refuses to hand back NaN or Inf.

Reductions (``dot``, ``norm``) go through :func:`math.fsum`, which returns the
correctly rounded sum of the elementwise products. The result is therefore
independent of summation order, thread count and BLAS build.
"""

from __future__ import annotations

import math

import numpy as np

# Norms at or below this are treated as zero wherever they divide.
ZERO_NORM = 1e-12


class DimensionError(ValueError):
    """Operands have different lengths."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared in a parameter vector."""


class ZeroNormError(ArithmeticError):
    """A norm in a denominator fell below :data:`ZERO_NORM`."""


def as_vector(values) -> np.ndarray:
    v = np.array(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("parameter vector contains NaN or Inf")
    return v


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.size} vs {b.size}")
    return a, b


def _checked(v: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("operation produced NaN or Inf")
    return v


def dot(a, b) -> float:
    a, b = _pair(a, b)
    out = math.fsum((a * b).tolist())
    if not math.isfinite(out):
        raise NonFiniteError("dot product overflowed")
    return out


def norm(a) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise ValueError("norm of an empty vector")
    return math.sqrt(dot(a, a))


def sub(a, b) -> np.ndarray:
    a, b = _pair(a, b)
    with np.errstate(over="ignore", invalid="ignore"):
        return _checked(a - b)


def axpy(alpha: float, x, y) -> np.ndarray:
    """Return ``alpha * x + y``."""
    if not math.isfinite(alpha):
        raise NonFiniteError(f"alpha must be finite, got {alpha!r}")
    x, y = _pair(x, y)
    with np.errstate(over="ignore", invalid="ignore"):
        return _checked(alpha * x + y)


def cosine_similarity(a, b) -> float:
    a, b = _pair(a, b)
    na, nb = norm(a), norm(b)
    if na <= ZERO_NORM or nb <= ZERO_NORM:
        raise ZeroNormError(f"cosine of a zero-norm vector (norms {na:.3g}, {nb:.3g})")
    # Rounding can push |cos| a hair past 1 for parallel inputs.
    return min(1.0, max(-1.0, dot(a, b) / (na * nb)))
