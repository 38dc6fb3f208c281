"""Time the numba kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Shapes follow a Kinship-sized model (64-dim embeddings, a few thousand
fact nodes) and a 20-atom enumeration for the exact oracle.
"""
import argparse
import timeit

import numpy as np

from expressmln import _kernels


def cases(rng):
    a, b = rng.normal(size=(4000, 128)), rng.normal(size=(128, 64))
    vals = rng.normal(size=(20000, 64))
    ids = rng.integers(0, 3000, size=20000)
    k = 20
    lit_atom = rng.integers(-1, k, size=(60, 3))
    lit_neg = rng.integers(2, size=(60, 3)).astype(bool)
    const_true = rng.random(60) < 0.1
    w = rng.normal(size=60)
    return {
        "matmul 4000x128 @ 128x64": lambda impl: impl.matmul(a, b),
        "segment_sum 20000x64 -> 3000": lambda impl: impl.segment_sum(vals, ids, 3000),
        "formula_log_potentials 2^20 states": lambda impl: impl.formula_log_potentials(
            lit_atom, lit_neg, const_true, w, k),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    impls = [_kernels.numpy_impl]
    if _kernels.numba_impl is None:
        print("numba not installed; timing the numpy fallback only")
    else:
        impls.append(_kernels.numba_impl)
    rng = np.random.default_rng(0)
    print(f"{'kernel':40s} " + " ".join(f"{i.name:>10s}" for i in impls) + ("   speedup" if len(impls) > 1 else ""))
    for name, fn in cases(rng).items():
        for impl in impls:
            fn(impl)  # compile / warm caches
        best = [min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat)) for impl in impls]
        row = f"{name:40s} " + " ".join(f"{t * 1e3:8.1f}ms" for t in best)
        if len(best) > 1:
            row += f"  {best[0] / best[1]:7.1f}x"
        print(row)


if __name__ == "__main__":
    main()
