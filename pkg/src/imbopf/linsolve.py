"""Sparse direct factorization of indefinite KKT systems.

Backed by SuperLU (``scipy.sparse.linalg.splu``).  Matrices are first
equilibrated symmetrically (``R A R`` with ``R_ii = 1/sqrt(max_j |a_ij|)``)
so barrier terms spanning many orders of magnitude do not trip the pivot
test.  The COLAMD column ordering is computed once per sparsity pattern and
cached; later factorizations of the same pattern permute the columns up
front and skip the ordering step.  Row pivoting stays dynamic, which the
zero constraint block of a saddle-point matrix needs.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

PIVOT_TOL = 1e-12
# threshold partial pivoting; 1.0 is plain partial pivoting
PIVOT_THRESHOLD = 1.0
BACKWARD_TOL = 1e-9


class SingularMatrixError(ArithmeticError):
    pass


class DimensionMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class SparseSystem:
    matrix: sp.spmatrix
    rhs: np.ndarray

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


_ordering_cache: dict[int, np.ndarray] = {}
_cache_lock = threading.Lock()


def _pattern_key(a: sp.csc_matrix) -> int:
    return hash((a.shape, a.indptr.tobytes(), a.indices.tobytes()))


class Factorization:
    """Immutable LU factors of ``A`` (possibly symmetrically permuted)."""

    def __init__(self, a: sp.csc_matrix, lu, perm: np.ndarray | None, scale: np.ndarray):
        self.a = a
        self._lu = lu
        self._perm = perm
        self._scale = scale
        self.n = a.shape[0]
        self._anorm = abs(a).sum(axis=1).max() if a.nnz else 0.0

    def _raw_solve(self, b: np.ndarray) -> np.ndarray:
        y = self._lu.solve(b * self._scale)
        if self._perm is not None:
            # factors are of the column-permuted matrix
            x = np.empty_like(y)
            x[self._perm] = y
            y = x
        return y * self._scale

    def backward_error(self, x: np.ndarray, b: np.ndarray) -> float:
        r = self.a @ x - b
        denom = self._anorm * np.abs(x).max(initial=0.0) + np.abs(b).max(initial=0.0)
        return float(np.abs(r).max(initial=0.0) / denom) if denom > 0 else 0.0


def factor(system, use_cache: bool = True) -> Factorization:
    """Factor a square sparse matrix (or the matrix of a :class:`SparseSystem`)."""
    a = system.matrix if isinstance(system, SparseSystem) else system
    a = sp.csc_matrix(a, copy=True)
    n = a.shape[0]
    if n == 0 or a.shape[1] != n:
        raise DimensionMismatchError(f"need a nonempty square matrix, got {a.shape}")
    a.eliminate_zeros()
    if not np.all(np.isfinite(a.data)):
        raise SingularMatrixError("matrix has non-finite entries")
    rowmax = np.asarray(abs(a).max(axis=1).todense()).ravel()
    if np.any(rowmax == 0):
        raise SingularMatrixError("matrix has an empty row")
    scale = 1.0 / np.sqrt(rowmax)
    r = sp.diags(scale)
    a_s = sp.csc_matrix(r @ a @ r)
    key = _pattern_key(a_s)
    perm = _ordering_cache.get(key) if use_cache else None
    try:
        if perm is None:
            lu = spla.splu(a_s, permc_spec="COLAMD", diag_pivot_thresh=PIVOT_THRESHOLD)
            if use_cache:
                with _cache_lock:
                    _ordering_cache[key] = np.argsort(lu.perm_c)
            fact = Factorization(a, lu, None, scale)
        else:
            lu = spla.splu(sp.csc_matrix(a_s[:, perm]), permc_spec="NATURAL",
                           diag_pivot_thresh=PIVOT_THRESHOLD)
            fact = Factorization(a, lu, perm, scale)
    except RuntimeError as exc:
        raise SingularMatrixError(str(exc)) from None
    diag = np.abs(lu.U.diagonal())
    if diag.size == 0 or not np.all(np.isfinite(diag)) or diag.min() <= PIVOT_TOL * diag.max():
        raise SingularMatrixError("pivot below relative tolerance 1e-12")
    return fact


def solve(fact: Factorization, rhs, refine: int = 2) -> np.ndarray:
    """Solve with up to ``refine`` steps of iterative refinement."""
    b = np.asarray(rhs, dtype=float)
    if b.shape != (fact.n,):
        raise DimensionMismatchError(f"rhs has shape {b.shape}, expected ({fact.n},)")
    if not np.any(b):
        return np.zeros_like(b)
    x = fact._raw_solve(b)
    for _ in range(refine):
        if fact.backward_error(x, b) <= BACKWARD_TOL * 1e-3:
            break
        x = x + fact._raw_solve(b - fact.a @ x)
    if not np.all(np.isfinite(x)):
        raise SingularMatrixError("non-finite solution")
    return x


def clear_ordering_cache() -> None:
    with _cache_lock:
        _ordering_cache.clear()
