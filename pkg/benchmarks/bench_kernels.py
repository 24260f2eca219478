"""Compare the compiled and NumPy nearest-entry backends.

    python3 benchmarks/bench_kernels.py [--tokens 10000] [--dim 8] [--sizes 1000 10000 100000]

Prints one row per (backend, N) with the best-of-``--repeats`` wall time and
the speedup of each backend over the NumPy fallback. Indices from the two
backends are compared on every size; a mismatch aborts the run.
"""

import argparse
import sys
import time

import numpy as np

from vqlab import kernels


def best_time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tokens", type=int, default=10_000)
    ap.add_argument("--dim", type=int, default=8)
    ap.add_argument("--sizes", type=int, nargs="+", default=[1_000, 10_000, 100_000])
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--knn", type=int, default=0, help="also time knn with this M")
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    backends = sorted(kernels.BACKENDS)
    if "cython" not in backends:
        print("compiled backend not built; timing the NumPy fallback only", file=sys.stderr)

    rng = np.random.default_rng(args.seed)
    z = rng.standard_normal((args.tokens, args.dim)).astype(np.float32)
    print(f"{'op':<8}{'backend':<9}{'N':>9}{'seconds':>11}{'tokens/s':>13}{'vs python':>11}")
    for n in args.sizes:
        book = rng.standard_normal((n, args.dim)).astype(np.float32)
        ops = [("nearest", lambda b: kernels.nearest(z, book, args.threads, backend=b)[0])]
        if args.knn:
            ops.append(("knn", lambda b: kernels.knn(z, book, args.knn, args.threads, backend=b)[0]))
        for op, call in ops:
            results = {b: best_time(lambda: call(b), args.repeats) for b in backends}
            ref = results["python"][1]
            for b, (_, idx) in results.items():
                if not np.array_equal(idx, ref):
                    sys.exit(f"{op}: backend {b} disagrees with python at N={n}")
            base = results["python"][0]
            for b in backends:
                sec = results[b][0]
                print(f"{op:<8}{b:<9}{n:>9}{sec:>11.4f}{args.tokens / sec:>13.0f}{base / sec:>10.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
