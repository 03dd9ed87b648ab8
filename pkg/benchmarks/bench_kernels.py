"""Compiled vs numpy kernels.

    python benchmarks/bench_kernels.py [--repeat 5] [--fit]

Times the three hot kernels on a dolphin-sized problem (695 augmented rows,
87 occasions, 3 groups) with each backend. ``--fit`` also times a short RPT
fit end to end, once per backend, in a fresh interpreter so the backend is
picked at import.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from jsmix import _pykernels, kernels

try:
    from jsmix import _ckernels
except ImportError:
    _ckernels = None

FIT_SNIPPET = """
import time
from jsmix import kernels
from jsmix.model import ModelSpec
from jsmix.sampler import McmcConfig, Model, run_fit
from jsmix.simulate import ScenarioConfig, augment, simulate_population
data, truth = simulate_population(ScenarioConfig(T=20, seed=1))
model = Model(augment(data, 300), ModelSpec.rpt_model(), truth.grid)
t0 = time.perf_counter()
run_fit(model, McmcConfig(n_chains=1, n_iters=300, burn_in=100, seed=1))
print(kernels.BACKEND, time.perf_counter() - t0)
"""


def problem(seed=0, M=695, U=200, T=87, G=3):
    rng = np.random.default_rng(seed)
    Y = (rng.random((U, T)) < 0.05).astype(np.uint8)
    Y[0] = 0
    rho = rng.uniform(0.001, 0.1, (G, T))
    phic = rng.uniform(0.3, 0.999, (G, T))
    phic[:, 0] = 1.0
    p = rng.uniform(0.05, 0.4, (G, T))
    uidx = np.r_[np.arange(U), np.zeros(M - U, dtype=np.intp)]
    c = rng.integers(0, G, M)
    u = rng.random((M, T))
    return Y, rho, phic, p, uidx, c, u


def bench(impl, repeat):
    Y, rho, phic, p, uidx, c, u = problem()
    _, filt = kernels.forward_filter(Y, rho, phic, p, impl=impl)
    states, _ = kernels.backward_sample(filt, uidx, c, rho, phic, u, impl=impl)
    y = Y[uidx]
    expo = (states == 1) | y.astype(bool)
    calls = {
        "forward_filter": lambda: kernels.forward_filter(Y, rho, phic, p, impl=impl),
        "backward_sample": lambda: kernels.backward_sample(filt, uidx, c, rho, phic, u, impl=impl),
        "tally": lambda: kernels.tally(states, c, y, expo, 3, impl=impl),
    }
    return {k: min(timeit.repeat(f, number=5, repeat=repeat)) / 5 for k, f in calls.items()}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--fit", action="store_true", help="also time a short fit with each backend")
    args = ap.parse_args(argv)

    py = bench(_pykernels, args.repeat)
    c = bench(_ckernels, args.repeat) if _ckernels is not None else None
    print(f"{'kernel':<16}{'numpy ms':>12}{'cython ms':>12}{'speedup':>10}")
    for k in py:
        if c is None:
            print(f"{k:<16}{py[k] * 1e3:>12.2f}{'n/a':>12}{'':>10}")
        else:
            print(f"{k:<16}{py[k] * 1e3:>12.2f}{c[k] * 1e3:>12.2f}{py[k] / c[k]:>9.1f}x")

    if args.fit:
        for flag in ("1", "0"):
            env = {**os.environ, "JSMIX_PURE_PYTHON": flag}
            out = subprocess.run([sys.executable, "-c", FIT_SNIPPET], env=env, capture_output=True, text=True, check=True)
            name, secs = out.stdout.split()
            print(f"fit T=20, 300 iterations, {name}: {float(secs):.1f} s")


if __name__ == "__main__":
    main()
