"""Compressed-row sparse helpers (scipy CSR as the storage type)."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp


def csr(rows, cols, values, shape, dtype=np.float32) -> sp.csr_matrix:
    """Build a canonical CSR matrix (sorted, duplicate-free indices)."""
    m = sp.csr_matrix(
        (np.asarray(values, dtype=dtype), (np.asarray(rows), np.asarray(cols))),
        shape=shape,
    )
    m.sum_duplicates()
    m.sort_indices()
    return m


def check_csr(a: sp.csr_matrix) -> None:
    if not sp.isspmatrix_csr(a):
        raise TypeError("expected a CSR matrix")
    indptr = a.indptr
    if len(indptr) != a.shape[0] + 1 or np.any(np.diff(indptr) < 0):
        raise ValueError("row offsets must have rows+1 nondecreasing entries")
    for r in range(a.shape[0]):
        idx = a.indices[indptr[r] : indptr[r + 1]]
        if np.any(np.diff(idx) <= 0):
            raise ValueError(f"column indices not strictly increasing in row {r}")
    if not np.all(np.isfinite(a.data)):
        raise ValueError("non-finite sparse values")


def spmm(a: sp.csr_matrix, b: np.ndarray) -> np.ndarray:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: sparse {a.shape} x dense {b.shape}")
    return np.asarray(a @ b)


def sym_normalize(a: sp.csr_matrix, degree: str = "count") -> sp.csr_matrix:
    """Return D^-1/2 A D^-1/2.

    ``degree="count"`` uses the number of stored nonzeros per row (binary
    graphs); ``degree="value"`` uses the row sum of values (weighted graphs).
    Rows with zero degree stay zero.
    """
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"sym_normalize needs a square matrix, got {a.shape}")
    a = sp.csr_matrix(a, copy=True)
    a.eliminate_zeros()
    if np.any(a.data < 0):
        raise ValueError("sym_normalize requires nonnegative entries")
    if degree == "count":
        deg = np.diff(a.indptr).astype(np.float64)
    elif degree == "value":
        deg = np.asarray(a.sum(axis=1), dtype=np.float64).ravel()
    else:
        raise ValueError(f"unknown degree convention {degree!r}")
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = 1.0 / np.sqrt(deg[nz])
    d = sp.diags(inv)
    out = (d @ a.astype(np.float64) @ d).tocsr()
    out.sort_indices()
    return out.astype(a.dtype)


def bipartite_normalize(o: sp.csr_matrix) -> sp.csr_matrix:
    """D_u^-1/2 O D_i^-1/2 with count degrees on each side."""
    o = sp.csr_matrix(o)
    du = np.diff(o.indptr).astype(np.float64)
    di = np.bincount(o.indices, minlength=o.shape[1]).astype(np.float64)
    inv_u = np.where(du > 0, 1.0 / np.sqrt(np.maximum(du, 1)), 0.0)
    inv_i = np.where(di > 0, 1.0 / np.sqrt(np.maximum(di, 1)), 0.0)
    out = (sp.diags(inv_u) @ o.astype(np.float64) @ sp.diags(inv_i)).tocsr()
    out.sort_indices()
    return out.astype(o.dtype)
