"""Fixed-pattern sparse assembly.

A :class:`Pattern` is built once from the (row, col) triplet structure of a
matrix; later assemblies only scatter new values into the precomputed CSC
slots, so the sparsity pattern never depends on the numbers.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import kernels


class Pattern:
    def __init__(self, rows, cols, shape):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        n_rows, n_cols = shape
        # column-major keys give CSC order directly
        keys = cols * n_rows + rows
        ukeys, inverse = np.unique(keys, return_inverse=True)
        self.shape = (int(n_rows), int(n_cols))
        self.slot = inverse.astype(np.int64)
        self.nnz = len(ukeys)
        self.indices = (ukeys % n_rows).astype(np.int32)
        col_of = ukeys // n_rows
        self.indptr = np.zeros(n_cols + 1, dtype=np.int32)
        np.cumsum(np.bincount(col_of, minlength=n_cols), out=self.indptr[1:])
        self.n_triplets = len(rows)
        self.key = hash((self.shape, self.indptr.tobytes(), self.indices.tobytes()))

    def assemble(self, values) -> sp.csc_matrix:
        data = kernels.scatter_add(self.slot, np.asarray(values, dtype=float), self.nnz)
        mat = sp.csc_matrix((data, self.indices.copy(), self.indptr.copy()), shape=self.shape)
        mat.has_sorted_indices = True
        return mat
