"""Time the compiled kernels against their pure-Python twins.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from heartlang import _kernels_py as py

try:
    from heartlang import _kernels as cy
except ImportError:  # extension not built
    cy = None


def cases(rng):
    sig = rng.standard_normal(100_000)
    holed = sig.copy()
    holed[rng.choice(sig.size, 500, replace=False)] = np.nan
    env = np.abs(np.convolve(rng.standard_normal(20_000), np.ones(5), "same"))
    env[::80] += 8.0
    pos = py.local_maxima(env)
    sorted_vals = np.sort(rng.integers(0, 200, 50_000).astype(np.float64))
    vecs = rng.standard_normal((20_000, 32))
    idx = rng.integers(0, 256, 20_000).astype(np.int64)
    ints = rng.integers(0, 8192, 50_000).astype(np.int64)
    blob = py.varint_encode(ints)
    buf = np.frombuffer(blob, dtype=np.uint8)
    return {
        "repair_lead": lambda k: k.repair_lead(holed, 6),
        "local_maxima": lambda k: k.local_maxima(env),
        "scan_peaks": lambda k: k.scan_peaks(env[pos], pos, 20, float(env.max()) * 0.25, 1e-6),
        "midranks": lambda k: k.midranks(sorted_vals),
        "segment_sum": lambda k: k.segment_sum(vecs, idx, 256),
        "varint_encode": lambda k: k.varint_encode(ints),
        "varint_decode": lambda k: k.varint_decode(buf, ints.size),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<14} {'python ms':>10} {'cython ms':>10} {'speedup':>8}")
    for name, fn in cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
        if cy is None:
            print(f"{name:<14} {t_py:10.2f} {'n/a':>10} {'n/a':>8}")
            continue
        t_cy = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<14} {t_py:10.2f} {t_cy:10.3f} {t_py / t_cy:7.1f}x")


if __name__ == "__main__":
    main()
