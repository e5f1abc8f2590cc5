"""Timing comparison of the compiled kernels against their numpy fallbacks.

Run:  python benchmarks/bench_kernels.py [--size M] [--rows N] [--repeat R]

Both backends are imported side by side (the env flag only affects which one
the package dispatches to), timed on identical inputs, and checked to agree.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from pvga import _kernels
from pvga.linalg import SparsityMask


def _time(fn, *args, repeat: int = 5) -> float:
    fn(*args)  # warm-up (and numba compilation)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=1024, help="number of unknowns m")
    ap.add_argument("--rows", type=int, default=1024, help="number of observations n")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    m, n = args.size, args.rows
    rng = np.random.default_rng(0)

    A = rng.standard_normal((n, m))
    C = np.eye(m) + 0.01 * np.ones((m, m))
    mask = SparsityMask.banded(m, 5)
    vals = C[mask.rows, mask.cols]
    r = 40
    WM = rng.standard_normal((m, r))
    W = rng.standard_normal((m, r))
    K = 200_000
    log_w = rng.standard_normal(K)
    log_u = np.log(rng.random(K))

    pairs = [
        ("rowwise_quad_full", (A, C)),
        ("rowwise_quad_masked", (A, mask.rows, mask.cols, vals)),
        ("lowrank_masked_dots", (WM, W, mask.rows, mask.cols)),
        ("mh_scan", (log_w, log_u, 0.0)),
    ]

    print(f"importable backend: {_kernels.BACKEND}   (m={m}, n={n}, nnz={mask.nnz})")
    header = (
        f"{'kernel':<22}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>9}{'dispatch':>10}"
    )
    print(header)
    print("-" * len(header))
    for name, inputs in pairs:
        np_fn = getattr(_kernels, "np_" + name)
        nb_fn = getattr(_kernels, "nb_" + name, None)
        t_np = _time(np_fn, *inputs, repeat=args.repeat)
        if nb_fn is None:
            print(f"{name:<22}{t_np * 1e3:>12.2f}{'n/a':>12}{'-':>9}{'numpy':>10}")
            continue
        t_nb = _time(nb_fn, *inputs, repeat=args.repeat)
        out_np, out_nb = np_fn(*inputs), nb_fn(*inputs)
        ref = out_np[0] if isinstance(out_np, tuple) else out_np
        alt = out_nb[0] if isinstance(out_nb, tuple) else out_nb
        ok = np.allclose(ref, alt, rtol=1e-10, atol=1e-10)
        tag = "" if ok else "   MISMATCH"
        used = "numba" if getattr(_kernels, name) is nb_fn else "numpy"
        print(
            f"{name:<22}{t_np * 1e3:>12.2f}{t_nb * 1e3:>12.2f}"
            f"{t_np / t_nb:>9.2f}{used:>10}{tag}"
        )


if __name__ == "__main__":
    main()
