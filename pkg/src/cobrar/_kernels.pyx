# cython: language_level=3
"""Compiled hot kernels: sparse profile projection, its transpose, fused
Adam, negative-item lookup and top-k ranking with exclusion.

Signatures match ``cobrar._kernels_py``.
"""
import numpy as np

cimport cython
from cython cimport floating
from libc.math cimport sqrt, pow


def csr_rows_matmul(const long[:] indptr, const int[:] indices,
                    const long[:] rows, const floating[:, ::1] weight):
    cdef Py_ssize_t n = rows.shape[0], d = weight.shape[1]
    cdef Py_ssize_t r, p, c, col
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((n, d), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    with nogil:
        for r in range(n):
            for p in range(indptr[rows[r]], indptr[rows[r] + 1]):
                col = indices[p]
                for c in range(d):
                    out[r, c] += weight[col, c]
    return out_arr


def csr_rows_rmatmul(const long[:] indptr, const int[:] indices,
                     const long[:] rows, const floating[:, ::1] grad,
                     floating[:, ::1] out):
    cdef Py_ssize_t n = rows.shape[0], d = grad.shape[1]
    cdef Py_ssize_t r, p, c, col
    with nogil:
        for r in range(n):
            for p in range(indptr[rows[r]], indptr[rows[r] + 1]):
                col = indices[p]
                for c in range(d):
                    out[col, c] += grad[r, c]


def adam_update(floating[::1] param, const floating[::1] grad,
                floating[::1] m, floating[::1] v,
                double lr, double l2, double beta1, double beta2,
                double eps, long step):
    # callers pass raveled views so any parameter shape works
    cdef Py_ssize_t i, n = param.shape[0]
    cdef double g, mi, vi
    cdef double bc1 = 1.0 - pow(beta1, step)
    cdef double bc2 = 1.0 - pow(beta2, step)
    with nogil:
        for i in range(n):
            g = grad[i] + l2 * param[i]
            mi = beta1 * m[i] + (1.0 - beta1) * g
            vi = beta2 * v[i] + (1.0 - beta2) * g * g
            m[i] = mi
            v[i] = vi
            param[i] = param[i] - lr * (mi / bc1) / (sqrt(vi / bc2) + eps)


def negative_lookup(const long[:] indptr, const int[:] indices,
                    const long[:] users, const long[:, :] draws):
    cdef Py_ssize_t nb = draws.shape[0], ns = draws.shape[1]
    cdef Py_ssize_t b, s, lo, hi, mid, start
    cdef long r
    out_arr = np.empty((nb, ns), dtype=np.int64)
    cdef long[:, ::1] out = out_arr
    with nogil:
        for b in range(nb):
            start = indptr[users[b]]
            for s in range(ns):
                r = draws[b, s]
                # count positives t with indices[start+t] - t <= r
                lo = 0
                hi = indptr[users[b] + 1] - start
                while lo < hi:
                    mid = (lo + hi) >> 1
                    if indices[start + mid] - mid <= r:
                        lo = mid + 1
                    else:
                        hi = mid
                out[b, s] = r + lo
    return out_arr


@cython.boundscheck(False)
def topk_excluding(const floating[:, :] scores, const long[:] ex_indptr,
                   const int[:] ex_indices, Py_ssize_t k):
    cdef Py_ssize_t n_rows = scores.shape[0], n_items = scores.shape[1]
    cdef Py_ssize_t r, j, e, e_end, filled, pos
    cdef floating s
    items_arr = np.zeros((n_rows, k), dtype=np.int64)
    dtype = np.float32 if floating is float else np.float64
    vals_arr = np.zeros((n_rows, k), dtype=dtype)
    cdef long[:, ::1] items = items_arr
    cdef floating[:, ::1] vals = vals_arr
    if k == 0:
        return items_arr, vals_arr
    with nogil:
        for r in range(n_rows):
            e = ex_indptr[r]
            e_end = ex_indptr[r + 1]
            filled = 0
            for j in range(n_items):
                while e < e_end and ex_indices[e] < j:
                    e += 1
                if e < e_end and ex_indices[e] == j:
                    continue
                s = scores[r, j]
                # items arrive in ascending index order, so a tie never displaces
                if filled == k and not (s > vals[r, k - 1]):
                    continue
                pos = filled if filled < k else k - 1
                while pos > 0 and s > vals[r, pos - 1]:
                    vals[r, pos] = vals[r, pos - 1]
                    items[r, pos] = items[r, pos - 1]
                    pos -= 1
                vals[r, pos] = s
                items[r, pos] = j
                if filled < k:
                    filled += 1
    return items_arr, vals_arr
