"""Dense linear algebra helpers and seeded randomness shared by all modules."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from gdig import _kernels
from gdig.errors import ShapeError, SingularityError


class Rng:
    """Seeded random stream. Same (seed, stream) gives the same draws; streams never overlap.

    Thin wrapper over a PCG64 generator; ``gen`` is the underlying
    ``numpy.random.Generator``.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, stream: int) -> "Rng":
        return Rng(self.seed, stream)

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"


def as_rng(rng) -> Rng:
    if isinstance(rng, Rng):
        return rng
    return Rng(int(rng))


@dataclass(frozen=True)
class SymEigen:
    values: np.ndarray   # ascending
    vectors: np.ndarray  # orthonormal columns

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T


def _check_square(m):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ShapeError("matrix has non-finite entries")
    return m


def sym_eig(m) -> SymEigen:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations."""
    m = _check_square(m)
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    if np.max(np.abs(m - m.T), initial=0.0) > 1e-8 * scale:
        raise ShapeError("matrix is not symmetric")
    w, v = _kernels.jacobi_eigh(0.5 * (m + m.T))
    return SymEigen(w, v)


def spd_solve(m, b) -> np.ndarray:
    """Solve m x = b for symmetric positive definite m (Cholesky)."""
    m = _check_square(m)
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != m.shape[0]:
        raise ShapeError(f"rhs length {b.shape[0]} does not match matrix order {m.shape[0]}")
    try:
        factor = scipy.linalg.cho_factor(m, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularityError(f"matrix is not positive definite: {exc}") from None
    if np.any(np.diag(factor[0]) <= 0.0):
        raise SingularityError("matrix is not positive definite")
    return scipy.linalg.cho_solve(factor, b, check_finite=False)


def random_projection(input_dim: int, out_dim: int, rng) -> np.ndarray:
    """Gaussian JL matrix of shape (out_dim, input_dim), entries N(0, 1/out_dim)."""
    if out_dim < 1 or out_dim > input_dim:
        raise ShapeError(f"out_dim must be in [1, {input_dim}], got {out_dim}")
    gen = as_rng(rng).gen
    return gen.standard_normal((out_dim, input_dim)) / np.sqrt(out_dim)


def pairwise_sqdist(points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ShapeError(f"points must be a non-empty 2-D array, got shape {points.shape}")
    return _kernels.pairwise_sqdist(points)


def worker_count() -> int:
    """Worker cap from GDIG_THREADS (default: CPU count)."""
    raw = os.environ.get("GDIG_THREADS")
    if raw:
        return max(1, int(raw))
    return os.cpu_count() or 1
