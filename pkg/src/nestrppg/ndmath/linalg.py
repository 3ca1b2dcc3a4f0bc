"""SVD, differentiable singular values and cosine similarities."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NonFiniteError, ShapeError, ZeroVectorError
from .tensor import Tensor, _make, as_tensor, clamp, sqrt, tsum

ZERO_NORM = 1e-12
DEGENERATE_GAP = 1e-9


@dataclass(frozen=True)
class SvdResult:
    left_vectors: np.ndarray    # N x r, orthonormal columns
    singular_values: np.ndarray  # r, descending, >= 0
    right_vectors: np.ndarray   # C x r, orthonormal columns

    def reconstruct(self) -> np.ndarray:
        return (self.left_vectors * self.singular_values) @ self.right_vectors.T


def svd(matrix) -> SvdResult:
    """Thin SVD (r = min(N, C)), backed by LAPACK's divide-and-conquer driver."""
    a = matrix.data if isinstance(matrix, Tensor) else np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2 or min(a.shape) < 1:
        raise ShapeError(f"svd expects a non-empty 2-D matrix, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise NonFiniteError("svd input contains NaN or Inf")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    return SvdResult(u, s, vt.T)


def _jitter(shape: tuple, scale: float) -> np.ndarray:
    # fixed pattern so repeated calls stay bit-identical
    rng = np.random.default_rng(0x5EED)
    return scale * rng.standard_normal(shape)


def singular_values(matrix: Tensor) -> Tensor:
    """Singular values of a 2-D tensor, differentiable via ds_i/dB = u_i v_i^T.

    When two singular values lie within 1e-9 of each other the singular
    vectors used for the backward pass come from a copy of the input with a
    deterministic 1e-9-scale perturbation, which picks one element of the
    degenerate subgradient set.
    """
    matrix = as_tensor(matrix)
    res = svd(matrix)
    s = res.singular_values
    u, v = res.left_vectors, res.right_vectors
    if s.size > 1 and np.min(-np.diff(s)) < DEGENERATE_GAP:
        scale = DEGENERATE_GAP * max(1.0, float(np.abs(matrix.data).max()))
        jittered = svd(matrix.data + _jitter(matrix.shape, scale))
        u, v = jittered.left_vectors, jittered.right_vectors

    def backward(g):
        return ((u * g) @ v.T,)

    return _make(s.copy(), (matrix,), backward, "singular_values")


def _check_norms(norms: np.ndarray, what: str) -> None:
    if np.any(norms < ZERO_NORM):
        raise ZeroVectorError(f"{what}: vector norm below {ZERO_NORM:g}")


def norm(a: Tensor, axis=-1) -> Tensor:
    return sqrt(tsum(a * a, axis=axis))


def cosine_similarity(a, b) -> Tensor:
    """Cosine of the angle between two vectors, clamped to [-1, 1]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"cosine_similarity needs equal-length vectors, got {a.shape} and {b.shape}")
    _check_norms(np.array([np.linalg.norm(a.data), np.linalg.norm(b.data)]), "cosine_similarity")
    cos = tsum(a * b) / (norm(a) * norm(b))
    return clamp(cos, -1.0, 1.0)


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine between two (N, D) tensors -> (N,)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_norms(np.linalg.norm(a.data, axis=1), "cosine_rows")
    _check_norms(np.linalg.norm(b.data, axis=1), "cosine_rows")
    return clamp(tsum(a * b, axis=1) / (norm(a, 1) * norm(b, 1)), -1.0, 1.0)


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs cosine: entry (i, j) is Cos(a_i, b_j)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_norms(np.linalg.norm(a.data, axis=1), "cosine_matrix")
    _check_norms(np.linalg.norm(b.data, axis=1), "cosine_matrix")
    na = a / norm(a, 1).reshape(-1, 1)
    nb = b / norm(b, 1).reshape(-1, 1)
    return clamp(na @ nb.T, -1.0, 1.0)
