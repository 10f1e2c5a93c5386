"""Pure numpy/scipy implementations of the hot kernels.

These mirror ``_kernels.pyx`` argument for argument and are used when the
compiled extension is unavailable (or ``COBRAR_PURE_PYTHON=1``).
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp


def _row_slice(indptr, indices, rows, n_cols):
    """CSR matrix holding only ``rows`` (in that order) of a binary CSR."""
    rows = np.asarray(rows, dtype=np.int64)
    starts = indptr[rows]
    lens = indptr[rows + 1] - starts
    sub_ptr = np.zeros(len(rows) + 1, dtype=np.int64)
    np.cumsum(lens, out=sub_ptr[1:])
    total = int(sub_ptr[-1])
    # gather positions start[r] + 0..len[r]-1 without a Python loop
    offsets = np.arange(total, dtype=np.int64) - np.repeat(sub_ptr[:-1], lens)
    cols = indices[np.repeat(starts, lens) + offsets]
    return sp.csr_matrix(
        (np.ones(total), cols, sub_ptr), shape=(len(rows), n_cols)
    )


def csr_rows_matmul(indptr, indices, rows, weight):
    """out[r] = sum of ``weight`` rows indexed by the nonzeros of CSR row ``rows[r]``."""
    sub = _row_slice(indptr, indices, rows, weight.shape[0]).astype(weight.dtype)
    return np.asarray(sub @ weight)


def csr_rows_rmatmul(indptr, indices, rows, grad, out):
    """Transpose of :func:`csr_rows_matmul`: accumulate ``grad`` rows into ``out``."""
    sub = _row_slice(indptr, indices, rows, out.shape[0]).astype(out.dtype)
    out += np.asarray(sub.T @ grad)


def adam_update(param, grad, m, v, lr, l2, beta1, beta2, eps, step):
    g = grad + l2 * param
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    param -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def negative_lookup(indptr, indices, users, draws):
    """Map ``draws[b, s]`` in ``[0, M - deg(u))`` to the draw-th item user ``users[b]`` lacks.

    Positives are sorted per row, so the r-th negative is ``r + #{t : p_t - t <= r}``.
    """
    users = np.asarray(users, dtype=np.int64)
    draws = np.asarray(draws, dtype=np.int64)
    out = np.empty_like(draws)
    for b, u in enumerate(users):
        row = indices[indptr[u]:indptr[u + 1]].astype(np.int64)
        gaps = row - np.arange(len(row))
        out[b] = draws[b] + np.searchsorted(gaps, draws[b], side="right")
    return out


def topk_excluding(scores, ex_indptr, ex_indices, k):
    """Top-k per row, descending score, ties to the lower item index; excluded items skipped."""
    n_rows, n_items = scores.shape
    excluded = np.zeros((n_rows, n_items), dtype=bool)
    for r in range(n_rows):
        excluded[r, ex_indices[ex_indptr[r]:ex_indptr[r + 1]]] = True
    idx = np.broadcast_to(np.arange(n_items), scores.shape)
    order = np.lexsort((idx, -scores, excluded), axis=-1)[:, :k]
    return order.astype(np.int64), np.take_along_axis(scores, order, axis=1)
