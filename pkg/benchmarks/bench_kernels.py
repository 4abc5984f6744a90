"""Time the compiled and numpy kernel backends on MNIST-sized workloads.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from rbfcnn import _backend
from rbfcnn.rbf import SIGMA_INIT, inv_two_var, log_norm


def workloads(rng):
    patches = rng.random((20_000, 25))
    mus = rng.random((24, 25))
    sigmas = rng.uniform(0.2, 0.8, 24)
    ln, itv = log_norm(sigmas), inv_two_var(sigmas)
    new_ln, new_itv = float(log_norm(SIGMA_INIT)), float(inv_two_var(SIGMA_INIT))
    stitch_in = rng.random((64, 24 * 24, 25))
    return {
        "pairwise_sq_dist 20000x24x25": lambda k: k.pairwise_sq_dist(patches, mus),
        "estep_stream 20000 patches": lambda k: k.estep_stream(patches, mus, ln, itv, -6.0, new_ln, new_itv),
        "stitch_sum 64 images 28x28 k=5": lambda k: k.stitch_sum(stitch_in, 28, 28, 1, 5),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    names = _backend.available()
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s}" + "".join(f"{n:>12s}" for n in names) + ("     speedup" if len(names) > 1 else ""))
    for label, fn in workloads(rng).items():
        times = [min(timeit.repeat(lambda: fn(_backend.get(n)), number=1, repeat=args.repeat)) for n in names]
        row = f"{label:34s}" + "".join(f"{t * 1e3:10.2f}ms" for t in times)
        if len(times) > 1:
            row += f"{times[0] / times[1]:11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
