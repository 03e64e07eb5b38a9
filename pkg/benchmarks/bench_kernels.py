"""Compiled vs numpy kernels on frame-sized workloads.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from autobx.kernels import compiled_backend, python_backend


def trilinear_case(rng):
    vol = rng.integers(0, 256, size=(600, 400, 300), dtype=np.uint8)
    # one 512x512 frame worth of sample points
    coords = rng.uniform(0, 299, size=(512 * 512, 3))
    return (vol, coords), {}


def hough_case(rng):
    n = 4000
    rows = rng.integers(0, 512, n).astype(np.float64)
    cols = rng.integers(0, 512, n).astype(np.float64)
    ang = rng.uniform(0, 2 * np.pi, n)
    return (rows, cols, np.sin(ang), np.cos(ang), 8, 60, 512, 512), {}


def bench(name, fn, args, kwargs, repeat):
    times = timeit.repeat(lambda: fn(*args, **kwargs), number=1, repeat=repeat)
    return min(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    if compiled_backend is None:
        print("compiled extension not built; only the numpy backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numpy [ms]':>12}{'cython [ms]':>13}{'speedup':>9}")
    for name, make in (("trilinear_sample", trilinear_case), ("hough_center_votes", hough_case)):
        a, kw = make(rng)
        t_py = bench(name, getattr(python_backend, name), a, kw, args.repeat)
        if compiled_backend is None:
            print(f"{name:<22}{t_py * 1e3:>12.2f}{'-':>13}{'-':>9}")
            continue
        fast = getattr(compiled_backend, name)
        same = np.allclose(fast(*a, **kw), getattr(python_backend, name)(*a, **kw))
        t_c = bench(name, fast, a, kw, args.repeat)
        print(f"{name:<22}{t_py * 1e3:>12.2f}{t_c * 1e3:>13.2f}{t_py / t_c:>8.1f}x"
              + ("" if same else "  MISMATCH"))


if __name__ == "__main__":
    main()
