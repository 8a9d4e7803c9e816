"""Dense linear-algebra primitives for the variational family and barycenters.

Vectors and matrices are plain float64 numpy arrays (row-major). The only
custom type is :class:`LowerUnitriangular`, which stores the strictly lower
part of a matrix whose diagonal is implicitly one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def _as_vec(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise DimensionError(f"expected a vector, got shape {v.shape}")
    return v


def _as_mat(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {m.shape}")
    return m


def strict_lower_count(dim: int) -> int:
    return dim * (dim - 1) // 2


@dataclass(frozen=True)
class LowerUnitriangular:
    """Lower-unitriangular matrix stored by its strict-lower entries.

    Entries are ordered row by row, i.e. the order of ``np.tril_indices(dim, -1)``.
    """

    strict_lower: np.ndarray
    dim: int

    def __post_init__(self):
        entries = np.asarray(self.strict_lower, dtype=float).reshape(-1)
        if self.dim < 1:
            raise DimensionError("dim must be positive")
        if entries.size != strict_lower_count(self.dim):
            raise DimensionError(
                f"dim={self.dim} needs {strict_lower_count(self.dim)} strict entries, "
                f"got {entries.size}"
            )
        object.__setattr__(self, "strict_lower", entries)

    @classmethod
    def identity(cls, dim: int) -> "LowerUnitriangular":
        return cls(np.zeros(strict_lower_count(dim)), dim)

    @classmethod
    def from_dense(cls, m) -> "LowerUnitriangular":
        m = _as_mat(m)
        rows, cols = np.tril_indices(m.shape[0], -1)
        return cls(m[rows, cols].copy(), m.shape[0])


def dense_from_unitri(l: LowerUnitriangular) -> np.ndarray:
    out = np.eye(l.dim)
    rows, cols = np.tril_indices(l.dim, -1)
    out[rows, cols] = l.strict_lower
    return out


def matvec(m, v) -> np.ndarray:
    m = _as_mat(m)
    v = _as_vec(v)
    if m.shape[1] != v.shape[0]:
        raise DimensionError(f"cannot multiply {m.shape} matrix by length-{v.shape[0]} vector")
    return m @ v


def unitri_matvec(l: LowerUnitriangular, v) -> np.ndarray:
    # routed through matvec so both paths share one summation order
    v = _as_vec(v)
    if l.dim != v.shape[0]:
        raise DimensionError(f"unitriangular dim {l.dim} does not match vector length {v.shape[0]}")
    return matvec(dense_from_unitri(l), v)


def _symmetric_eig(m, sym_tol: float, psd_tol: float) -> tuple[np.ndarray, np.ndarray]:
    m = _as_mat(m)
    if m.shape[0] != m.shape[1]:
        raise DimensionError(f"expected a square matrix, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    if np.max(np.abs(m - m.T), initial=0.0) > sym_tol:
        raise ValueError("matrix is not symmetric")
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    if w.size and w.min() < -psd_tol:
        raise ValueError(f"matrix has a negative eigenvalue {w.min():.3e}")
    return np.clip(w, 0.0, None), v


def sqrtm_psd(m, sym_tol: float = 1e-10, psd_tol: float = 1e-10) -> np.ndarray:
    """Symmetric square root of a symmetric positive semi-definite matrix.

    Eigenvalues in ``[-psd_tol, 0)`` are clamped to zero; anything more
    negative raises ``ValueError``.
    """
    w, v = _symmetric_eig(m, sym_tol, psd_tol)
    s = (v * np.sqrt(w)) @ v.T
    return 0.5 * (s + s.T)


def inv_sqrtm_pd(m, sym_tol: float = 1e-10) -> np.ndarray:
    w, v = _symmetric_eig(m, sym_tol, 0.0)
    if w.min() <= 0.0:
        raise ValueError("matrix is singular")
    s = (v / np.sqrt(w)) @ v.T
    return 0.5 * (s + s.T)
