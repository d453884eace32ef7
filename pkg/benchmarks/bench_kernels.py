"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeats 5]

Prints one line per kernel and size: median seconds per call for each
backend, the speedup, and the largest difference between outputs relative to the output scale
(untrained chains grow large over many steps, so absolute gaps mislead).
"""

import argparse
import statistics
import time

import numpy as np

from ddro import kernels
from ddro.diffusion import ScoreModel, _chain_layers, build_schedule


def timed(fn, repeats):
    out, times = None, []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return out, statistics.median(times)


def chain_case(n, dim, T, hidden):
    sched = build_schedule(T, 1e-3, 0.2)
    model = ScoreModel.create(dim, 0, hidden=hidden)
    rng = np.random.default_rng(0)
    xT, z = rng.standard_normal((n, dim)), rng.standard_normal((T, n, dim))
    c1, c2 = sched.mean_coefs(np.arange(1, T + 1))
    layers = _chain_layers(model, sched)
    return lambda b: kernels.reverse_chain(xT, z, c1, c2, sched.sigmas, layers, backend=b)


def perlin_case(n, L, octaves):
    g = np.random.default_rng(1).uniform(-1, 1, (n, octaves, 2 ** (octaves - 1) + 2))
    pos = np.arange(L, dtype=np.float64)
    return lambda b: kernels.perlin_octaves(pos, g, float(L), backend=b)


CASES = [
    ("reverse_chain n=256 d=25 T=50", lambda: chain_case(256, 25, 50, 64)),
    ("reverse_chain n=1024 d=25 T=50", lambda: chain_case(1024, 25, 50, 64)),
    ("reverse_chain n=256 d=25 T=500", lambda: chain_case(256, 25, 500, 64)),
    ("perlin_octaves n=500 L=24 oct=8", lambda: perlin_case(500, 24, 8)),
    ("perlin_octaves n=2000 L=96 oct=8", lambda: perlin_case(2000, 96, 8)),
]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)
    if kernels.BACKEND != "compiled":
        print("compiled kernels are not available; only the numpy path can be timed")
    print(f"{'case':36s} {'python s':>10s} {'compiled s':>11s} {'speedup':>8s} {'max rel diff':>12s}")
    for name, make in CASES:
        run = make()
        ref, t_py = timed(lambda: run("python"), args.repeats)
        if kernels.BACKEND == "compiled":
            out, t_c = timed(lambda: run("compiled"), args.repeats)
            diff = float(np.max(np.abs(out - ref)) / max(np.max(np.abs(ref)), 1e-300))
            print(f"{name:36s} {t_py:10.4f} {t_c:11.4f} {t_py / t_c:7.1f}x {diff:12.2e}")
        else:
            print(f"{name:36s} {t_py:10.4f} {'-':>11s} {'-':>8s} {'-':>12s}")


if __name__ == "__main__":
    main()
