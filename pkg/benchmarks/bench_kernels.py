"""Compare the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py            # kernel micro-benchmarks
    python benchmarks/bench_kernels.py --stream   # also time a 2000-step stream per backend
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from dualkv import _accel


def bench_kernels(repeat: int) -> None:
    rng = np.random.default_rng(0)
    x = rng.normal(size=(36, 64))
    pos = np.repeat(np.arange(9.0), 4)
    freqs = 10000.0 ** (-np.arange(0, 64, 2) / 64)
    q, k, v = rng.normal(size=(4, 64)), rng.normal(size=(36, 64)), rng.normal(size=(36, 64))
    lat = rng.normal(size=(3, 64))
    cases = {
        "rope_rows (36x64)": lambda f: f(x, pos, freqs),
        "attention_rows (4q x 36k, d=64)": lambda f: f(q, k, v, 0.125),
        "cosine_matrix (3x3, d=64)": lambda f: f(lat, lat),
    }
    names = {"rope_rows (36x64)": "rope_rows", "attention_rows (4q x 36k, d=64)": "attention_rows",
             "cosine_matrix (3x3, d=64)": "cosine_matrix"}
    print(f"{'kernel':36s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for label, call in cases.items():
        np_fn = _accel.numpy_kernels[names[label]]
        t_np = min(timeit.repeat(lambda: call(np_fn), number=repeat, repeat=3)) / repeat * 1e6
        if _accel.HAS_NUMBA:
            nb_fn = getattr(_accel, names[label])
            call(nb_fn)  # compile
            t_nb = min(timeit.repeat(lambda: call(nb_fn), number=repeat, repeat=3)) / repeat * 1e6
            print(f"{label:36s} {t_np:10.2f} {t_nb:10.2f} {t_np / t_nb:7.1f}x")
        else:
            print(f"{label:36s} {t_np:10.2f} {'n/a':>10s}")


def bench_stream(steps: int) -> None:
    code = ("import time; from dualkv.simulator import *; run_stream(StreamConfig(horizon=10)); "
            f"t=time.perf_counter(); run_stream(StreamConfig(horizon={steps})); print(time.perf_counter()-t)")
    for flag, name in (("1", "numpy"), ("0", "numba")):
        env = dict(os.environ, DUALKV_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        secs = float(out.stdout)
        print(f"stream {steps} steps [{name}]: {secs:.2f} s ({secs / steps * 1e3:.3f} ms/step)")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=2000)
    ap.add_argument("--stream", action="store_true")
    ap.add_argument("--steps", type=int, default=2000)
    args = ap.parse_args()
    bench_kernels(args.repeat)
    if args.stream:
        bench_stream(args.steps)


if __name__ == "__main__":
    main()
