"""Compiled vs numpy kernels, in isolation and inside a p=4 implicit run.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from stochmono import _kernels_py

try:
    from stochmono import _kernels
except ImportError:
    _kernels = None

END_TO_END = """
import time, numpy as np
from stochmono.operators import make_example_family, SineMode
from stochmono.schemes import TimeGrid, run_batch
from stochmono.spaces import build_space, initial_coefficients
from stochmono.noise import sample_batch
pair = make_example_family(4, a=1.0, b=(0.5,), c=(0.5,), d=(SineMode(1, 0.5),))
s = build_space("spectral", 16, p=4)
dW = sample_batch(1, 1.0, 7, 0, range(50))
t = time.perf_counter()
run_batch("implicit_spacetime", s, TimeGrid(1.0, 128), pair, initial_coefficients(s, "sine1"), dW)
print(time.perf_counter() - t)
"""


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _kernels is None:
        sys.exit("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    rng = np.random.default_rng(0)
    print(f"{'case':<34}{'numpy [ms]':>12}{'cython [ms]':>13}{'speedup':>9}")
    for P, nq, n in ((1, 256, 16), (50, 256, 16), (50, 1024, 64)):
        basis = rng.standard_normal((nq, n))
        w = rng.random((P, nq))
        tp = bench(lambda: _kernels_py.weighted_gram(basis, w), args.repeat)
        tc = bench(lambda: _kernels.weighted_gram(basis, w), args.repeat)
        print(f"{f'weighted_gram P={P} nq={nq} n={n}':<34}{tp * 1e3:>12.3f}{tc * 1e3:>13.3f}{tp / tc:>9.1f}")
    for P, nq, p in ((50, 1024, 4.0), (50, 1024, 3.0), (50, 1024, 3.5), (500, 1024, 4.0)):
        z = rng.standard_normal((P, nq))
        c = rng.random((1, nq))
        tp = bench(lambda: _kernels_py.power_flux(z, c, p), args.repeat)
        tc = bench(lambda: _kernels.power_flux(z, c, p), args.repeat)
        print(f"{f'power_flux P={P} nq={nq} p={p:g}':<34}{tp * 1e3:>12.3f}{tc * 1e3:>13.3f}{tp / tc:>9.1f}")
    times = {}
    for name, flag in (("numpy", "1"), ("cython", "0")):
        env = dict(os.environ, STOCHMONO_PURE_PYTHON=flag)
        runs = [float(subprocess.run([sys.executable, "-c", END_TO_END], env=env, capture_output=True, text=True,
                                     check=True).stdout) for _ in range(3)]
        times[name] = min(runs)
    print(f"{'implicit p=4 run, 50 paths x 128':<34}{times['numpy'] * 1e3:>12.1f}{times['cython'] * 1e3:>13.1f}"
          f"{times['numpy'] / times['cython']:>9.1f}")


if __name__ == "__main__":
    main()
