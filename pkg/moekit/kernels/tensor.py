"""
Dense float64 containers and activation functions.

Token batches (N x D) are ``Matrix2D`` values and per-expert parameter stacks
(E x D1 x D2) are ``Tensor3D`` values; both are plain row-major numpy arrays.
"""
import math
from enum import Enum
from typing import Optional

import numpy as np
import numpy.typing as npt

from moekit.core.errors import NonFiniteError, ShapeMismatchError

Matrix2D = npt.NDArray[np.float64]
Tensor3D = npt.NDArray[np.float64]

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class ActivationKind(str, Enum):
    RELU = "relu"
    GELU = "gelu"
    IDENTITY = "identity"


def as_matrix2d(value, name: str = "matrix", finite: bool = False) -> Matrix2D:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatchError(f"{name} must be rank 2, got shape {arr.shape}")
    if finite and not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return arr


def as_tensor3d(value, name: str = "tensor", finite: bool = False) -> Tensor3D:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeMismatchError(f"{name} must be rank 3, got shape {arr.shape}")
    if finite and not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return arr


def random_matrix(
    rows: int, cols: int, rng: np.random.Generator, scale: float = 1.0
) -> Matrix2D:
    return rng.standard_normal((rows, cols)) * scale


def random_tensor3d(
    dim0: int, dim1: int, dim2: int, rng: np.random.Generator, scale: float = 1.0
) -> Tensor3D:
    return rng.standard_normal((dim0, dim1, dim2)) * scale


def activation_apply(kind: ActivationKind, pre: Matrix2D) -> Matrix2D:
    kind = ActivationKind(kind)
    pre = np.asarray(pre, dtype=np.float64)
    if kind is ActivationKind.RELU:
        return np.maximum(pre, 0.0)
    if kind is ActivationKind.GELU:
        # tanh approximation
        inner = _GELU_C * (pre + _GELU_A * pre**3)
        return 0.5 * pre * (1.0 + np.tanh(inner))
    return pre.copy()


def activation_derivative(kind: ActivationKind, pre: Matrix2D) -> Matrix2D:
    kind = ActivationKind(kind)
    pre = np.asarray(pre, dtype=np.float64)
    if kind is ActivationKind.RELU:
        return (pre > 0.0).astype(np.float64)
    if kind is ActivationKind.GELU:
        inner = _GELU_C * (pre + _GELU_A * pre**3)
        t = np.tanh(inner)
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * pre**2)
        return 0.5 * (1.0 + t) + 0.5 * pre * (1.0 - t * t) * d_inner
    return np.ones_like(pre)


def activation_grad(
    kind: ActivationKind, pre: Matrix2D, upstream: Matrix2D
) -> Matrix2D:
    """
    Chain an upstream gradient through F: ``upstream * F'(pre)``.
    """
    pre = np.asarray(pre, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if pre.shape != upstream.shape:
        raise ShapeMismatchError(
            f"pre-activation {pre.shape} and upstream {upstream.shape} differ"
        )
    return upstream * activation_derivative(kind, pre)


def max_scaled_error(actual, expected, reference: Optional[float] = None) -> float:
    """
    Max absolute difference divided by ``1 + max|expected|``.
    """
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if actual.shape != expected.shape:
        raise ShapeMismatchError(f"cannot compare {actual.shape} with {expected.shape}")
    if actual.size == 0:
        return 0.0
    scale = 1.0 + (np.abs(expected).max() if reference is None else reference)
    return float(np.abs(actual - expected).max() / scale)
