"""Time the compiled kernels against the numpy/scipy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0]

Shapes default to an ML-1M-sized problem (6040 users, 3706 items, ~4.5%
density) with a 1024-row batch and a 2048-wide first layer.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from cobrar import kernels


def random_csr(rng, n_rows, n_cols, density):
    indptr = [0]
    indices = []
    for _ in range(n_rows):
        k = max(1, rng.binomial(n_cols, density))
        indices.extend(np.sort(rng.choice(n_cols, size=min(k, n_cols - 1), replace=False)))
        indptr.append(len(indices))
    return np.asarray(indptr, dtype=np.int64), np.asarray(indices, dtype=np.int32)


def cases(scale, rng):
    n_users, n_items = int(6040 * scale), int(3706 * scale)
    width, batch = 2048, 1024
    indptr, indices = random_csr(rng, n_users, n_items, 0.045)
    rows = rng.integers(0, n_users, size=batch)
    weight = rng.standard_normal((n_items, width)) * 0.01
    grad = rng.standard_normal((batch, width))
    out = np.zeros_like(weight)
    param = rng.standard_normal((n_items, width))
    m, v = np.zeros_like(param), np.zeros_like(param)
    deg = np.diff(indptr)[rows]
    draws = (rng.random((batch, 5)) * (n_items - deg)[:, None]).astype(np.int64)
    scores = rng.standard_normal((512, n_items))
    ex_ptr, ex_idx = indptr[:513].copy(), indices[: indptr[512]].copy()

    return {
        "csr_rows_matmul": lambda impl: kernels.csr_rows_matmul(indptr, indices, rows, weight, impl=impl),
        "csr_rows_rmatmul": lambda impl: kernels.csr_rows_rmatmul(indptr, indices, rows, grad, out, impl=impl),
        "adam_update": lambda impl: kernels.adam_update(param, param * 1e-3, m, v, 1e-3, 1e-4,
                                                        0.9, 0.999, 1e-8, 1, impl=impl),
        "negative_lookup": lambda impl: kernels.negative_lookup(indptr, indices, rows, draws, impl=impl),
        "topk_excluding": lambda impl: kernels.topk_excluding(scores, ex_ptr, ex_idx, 5, impl=impl),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=float, default=1.0)
    args = ap.parse_args(argv)

    impls = kernels.backends()
    if "cython" not in impls:
        print("compiled kernels not available; timing the fallback only")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}" + "".join(f"{name:>12}" for name in impls) + ("     speedup" if len(impls) > 1 else ""))
    for name, fn in cases(args.scale, rng).items():
        best = {}
        for label, impl in impls.items():
            fn(impl)  # warm up
            best[label] = min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat))
        line = f"{name:<18}" + "".join(f"{best[k] * 1e3:>10.2f}ms" for k in impls)
        if "cython" in best:
            line += f"{best['python'] / best['cython']:>11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
