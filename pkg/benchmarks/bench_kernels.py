"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--sizes 1000 100000] [--case case118]

Part 1 times each kernel on random data.  Part 2 solves a bundled case end
to end once per backend (each in a fresh interpreter, since the backend is
chosen at import).
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from imbopf import _kernels_py

try:
    from imbopf import _kernels as compiled
except ImportError:  # extension not built
    compiled = None


def kernel_inputs(n, rng):
    x = rng.uniform(0.0, 1.0, n)
    return {
        "scatter_add": (rng.integers(0, n // 4 + 1, n), rng.standard_normal(n), n // 4 + 1),
        "bus_injection": (rng.uniform(0.9, 1.1, n), rng.uniform(-0.3, 0.3, n), *rng.standard_normal((4, n))),
        "primal_damping": (x, rng.standard_normal(n), np.zeros(n), np.ones(n), 0.995),
        "dual_damping": (rng.uniform(1e-6, 1.0, n), rng.standard_normal(n), 0.995),
    }


def bench_kernels(sizes, repeat):
    rng = np.random.default_rng(0)
    print(f"{'kernel':16s} {'n':>8s} {'numpy/us':>11s} {'cython/us':>11s} {'speedup':>8s}")
    for n in sizes:
        for name, args in kernel_inputs(n, rng).items():
            py = min(timeit.repeat(lambda: getattr(_kernels_py, name)(*args), number=20, repeat=repeat)) / 20
            if compiled is None:
                print(f"{name:16s} {n:8d} {py * 1e6:11.1f} {'-':>11s} {'-':>8s}")
                continue
            cy = min(timeit.repeat(lambda: getattr(compiled, name)(*args), number=20, repeat=repeat)) / 20
            print(f"{name:16s} {n:8d} {py * 1e6:11.1f} {cy * 1e6:11.1f} {py / cy:8.2f}")


SOLVE = """
import time
from imbopf import kernels, load_case, solve_acopf, to_per_unit
from imbopf.cli import resolve_case
net = to_per_unit(load_case(resolve_case({case!r})))
t = time.perf_counter()
rep = solve_acopf(net, verify=False)
print(kernels.BACKEND, rep.status, rep.total_newton, f"{{time.perf_counter() - t:.2f}}")
"""


def bench_solve(case):
    print(f"\nend-to-end solve of {case}:")
    for pure in ("1", "0"):
        env = dict(os.environ, IMBOPF_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", SOLVE.format(case=case)], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        backend, status, iters, secs = out
        print(f"  {backend:7s} {status:10s} {iters:>5s} Newton iterations {secs:>7s} s")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[100, 1_000, 10_000, 100_000])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--case", default="case118")
    ap.add_argument("--skip-solve", action="store_true")
    ns = ap.parse_args()
    bench_kernels(ns.sizes, ns.repeat)
    if not ns.skip_solve:
        bench_solve(ns.case)


if __name__ == "__main__":
    main()
