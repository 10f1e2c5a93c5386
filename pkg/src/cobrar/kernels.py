"""Backend selection for the hot kernels.

The compiled ``_kernels`` extension is used when it imports; otherwise the
numpy/scipy fallback. Set ``COBRAR_PURE_PYTHON=1`` to force the fallback.
Both backends agree to floating-point reordering tolerance, not bit-for-bit.
"""
from __future__ import annotations

import os
from types import ModuleType

import numpy as np

from cobrar import _kernels_py


def _load() -> tuple[ModuleType, str]:
    if os.environ.get("COBRAR_PURE_PYTHON", "") not in ("", "0"):
        return _kernels_py, "python"
    try:
        from cobrar import _kernels
    except ImportError:
        return _kernels_py, "python"
    return _kernels, "cython"


_impl, BACKEND = _load()


def backends() -> dict[str, ModuleType]:
    """All importable kernel implementations, keyed by name."""
    found = {"python": _kernels_py}
    try:
        from cobrar import _kernels

        found["cython"] = _kernels
    except ImportError:
        pass
    return found


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def _i32(a):
    return np.ascontiguousarray(a, dtype=np.int32)


def csr_rows_matmul(indptr, indices, rows, weight, impl=None):
    impl = impl or _impl
    weight = np.ascontiguousarray(weight)
    return impl.csr_rows_matmul(_i64(indptr), _i32(indices), _i64(rows), weight)


def csr_rows_rmatmul(indptr, indices, rows, grad, out, impl=None):
    impl = impl or _impl
    if not out.flags.c_contiguous:
        raise ValueError("out must be C-contiguous")
    grad = np.ascontiguousarray(grad, dtype=out.dtype)
    impl.csr_rows_rmatmul(_i64(indptr), _i32(indices), _i64(rows), grad, out)


def adam_update(param, grad, m, v, lr, l2, beta1, beta2, eps, step, impl=None):
    impl = impl or _impl
    if impl is _kernels_py:
        impl.adam_update(param, grad, m, v, lr, l2, beta1, beta2, eps, step)
        return
    impl.adam_update(
        param.reshape(-1),
        np.ascontiguousarray(grad, dtype=param.dtype).reshape(-1),
        m.reshape(-1),
        v.reshape(-1),
        float(lr), float(l2), float(beta1), float(beta2), float(eps), int(step),
    )


def negative_lookup(indptr, indices, users, draws, impl=None):
    impl = impl or _impl
    return impl.negative_lookup(_i64(indptr), _i32(indices), _i64(users), _i64(draws))


def topk_excluding(scores, ex_indptr, ex_indices, k, impl=None):
    impl = impl or _impl
    scores = np.ascontiguousarray(scores)
    return impl.topk_excluding(scores, _i64(ex_indptr), _i32(ex_indices), int(k))
