"""Time the compiled and pure-Python FNV-1a paths on artifact-sized buffers.

    python3 benchmarks/bench_fingerprint.py [--sizes 4096,262144,1048576] [--repeats 3]

Setting FD2_DISABLE_NUMBA=1 makes ``fd2.io.fnv1a64`` use the Python path
everywhere; this script calls both paths directly so it needs no flag.
"""
import argparse
import time

import numpy as np

from fd2 import io


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", default="4096,262144,1048576", help="comma-separated buffer sizes in bytes")
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    if io._fnv1a64_kernel is None:
        print("compiled kernel unavailable (FD2_DISABLE_NUMBA set or numba missing); timing Python path only")
    else:
        io._fnv1a64_kernel(np.zeros(8, np.uint8), np.uint64(io.FNV_OFFSET))  # compile outside the timer

    print(f"{'bytes':>10} {'python s':>10} {'numba s':>10} {'speedup':>8} match")
    rng = np.random.default_rng(0)
    for size in (int(s) for s in args.sizes.split(",")):
        data = rng.integers(0, 256, size=size, dtype=np.uint8).tobytes()
        t_py, h_py = best_of(lambda: io._fnv1a64_py(data, io.FNV_OFFSET), args.repeats)
        if io._fnv1a64_kernel is None:
            print(f"{size:>10} {t_py:>10.4f} {'-':>10} {'-':>8} -")
            continue
        arr = np.frombuffer(data, np.uint8)
        t_nb, h_nb = best_of(lambda: int(io._fnv1a64_kernel(arr, np.uint64(io.FNV_OFFSET))), args.repeats)
        print(f"{size:>10} {t_py:>10.4f} {t_nb:>10.6f} {t_py / max(t_nb, 1e-9):>8.0f} {h_py == h_nb}")


if __name__ == "__main__":
    main()
