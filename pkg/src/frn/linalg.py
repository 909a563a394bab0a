"""Dense real-matrix primitives sized for feature-map reconstruction.

Matrices are plain numpy arrays: 2-D, row-major, float32 or float64.
Batched matrices are 3-D arrays whose leading axis is the batch; every
batch element shares the same (rows, cols). Validation happens at the
boundaries via :func:`as_matrix` / :func:`as_batched`; the operations
below assume validated inputs but still check shapes cheaply.

All functions are pure and never mutate their arguments, so they are safe
to call from multiple threads.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import get_lapack_funcs

DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    """Operand dimensions do not conform."""


class NumericalError(ArithmeticError):
    """A numerical failure such as a non-positive pivot or non-finite data.

    ``pivot`` is the zero-based index of the failing Cholesky pivot when
    the error came from a factorization, else None. A failing pivot on a
    ridge-regularized system usually means the regularizer is too small
    or the input is corrupt.
    """

    def __init__(self, message: str, pivot: int | None = None):
        super().__init__(message)
        self.pivot = pivot


def resolve_dtype(precision) -> np.dtype:
    """Map 'f32'/'f64' (or a numpy dtype) to a numpy float dtype."""
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}; expected 'f32' or 'f64'")
    dt = np.dtype(precision)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}; expected float32 or float64")
    return dt


def as_matrix(a, dtype=None, name: str = "matrix") -> np.ndarray:
    """Validate and return a 2-D contiguous float array.

    Raises ShapeError for non-2-D input and NumericalError if any entry
    is NaN or infinite.
    """
    arr = np.asarray(a, dtype=resolve_dtype(dtype) if dtype is not None else None)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        bad = int(arr.size - np.isfinite(arr).sum())
        raise NumericalError(f"{name} contains {bad} non-finite entries")
    return np.ascontiguousarray(arr)


def as_batched(a, dtype=None, name: str = "batched matrix") -> np.ndarray:
    """Validate and return a 3-D contiguous float array (batch, rows, cols)."""
    arr = np.asarray(a, dtype=resolve_dtype(dtype) if dtype is not None else None)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"{name} must be 3-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        bad = int(arr.size - np.isfinite(arr).sum())
        raise NumericalError(f"{name} contains {bad} non-finite entries")
    return np.ascontiguousarray(arr)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of 2-D or batched 3-D operands."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise ShapeError(f"matmul expects 2-D or 3-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    return a @ b


def gram(s: np.ndarray, mode: str = "outer") -> np.ndarray:
    """Gram matrix of ``s``: outer is s @ s.T, inner is s.T @ s.

    The result is symmetrized by averaging with its transpose so that
    a[i, j] == a[j, i] holds exactly.
    """
    s = np.asarray(s)
    if mode == "outer":
        g = s @ np.swapaxes(s, -1, -2)
    elif mode == "inner":
        g = np.swapaxes(s, -1, -2) @ s
    else:
        raise ValueError(f"gram mode must be 'outer' or 'inner', got {mode!r}")
    return (g + np.swapaxes(g, -1, -2)) / 2


_SYM_TOL = 1e-6


def spd_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A X = B for symmetric positive-definite A via Cholesky.

    Accepts 2-D operands or a 3-D batch on either side. A must be
    symmetric to within ``1e-6 * max|A|``; a non-positive pivot raises
    NumericalError carrying the zero-based pivot index.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim == 3 or b.ndim == 3:
        batch = a.shape[0] if a.ndim == 3 else b.shape[0]
        if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
            raise ShapeError(f"spd_solve batch mismatch: {a.shape} vs {b.shape}")
        out = np.empty(
            (batch,) + (a.shape[-2], b.shape[-1]),
            dtype=np.result_type(a.dtype, b.dtype),
        )
        for i in range(batch):
            out[i] = spd_solve(a[i] if a.ndim == 3 else a, b[i] if b.ndim == 3 else b)
        return out

    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"spd_solve needs a square matrix, got {a.shape}")
    if b.ndim != 2 or b.shape[0] != a.shape[0]:
        raise ShapeError(f"spd_solve right-hand side mismatch: {a.shape} vs {b.shape}")
    scale = np.max(np.abs(a)) if a.size else 0.0
    if scale and np.max(np.abs(a - a.T)) > _SYM_TOL * scale:
        raise ValueError("spd_solve requires a symmetric matrix")

    dtype = np.result_type(a.dtype, b.dtype)
    if dtype not in (np.float32, np.float64):
        dtype = np.float64
    a = a.astype(dtype, copy=False)
    b = b.astype(dtype, copy=False)
    potrf, potrs = get_lapack_funcs(("potrf", "potrs"), (a, b))
    c, info = potrf(a, lower=1, overwrite_a=False)
    if info != 0:
        raise NumericalError(
            f"Cholesky factorization failed at pivot {info - 1}; "
            "the system is not positive-definite (regularizer too small?)",
            pivot=info - 1,
        )
    x, info = potrs(c, b, lower=1)
    if info != 0:
        raise NumericalError(f"triangular solve failed with LAPACK code {info}")
    return x


def spd_inverse(a: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric positive-definite matrix via spd_solve."""
    a = np.asarray(a)
    eye = np.eye(a.shape[-1], dtype=a.dtype)
    return spd_solve(a, eye)


def add_ridge(a: np.ndarray, lam: float) -> np.ndarray:
    """Return a copy of ``a`` with ``lam`` added along the diagonal."""
    a = np.asarray(a)
    out = a.copy()
    idx = np.arange(a.shape[-1])
    out[..., idx, idx] += np.asarray(lam, dtype=out.dtype)
    return out
