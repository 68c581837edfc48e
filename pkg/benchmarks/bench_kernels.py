"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--number 20]

The first numba call compiles; it is made once before timing.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from peftbench import _kernels as k


def cases(rng):
    x = rng.standard_normal((512, 64)).astype(np.float32)
    g = rng.standard_normal((512, 64)).astype(np.float32)
    w = rng.standard_normal(64).astype(np.float32)
    a = rng.integers(0, 50, 120)
    b = rng.integers(0, 50, 140)
    idx = rng.integers(0, 167, 2048)
    rows = rng.standard_normal((2048, 64)).astype(np.float32)
    _, inv = k._rmsnorm_forward_np(x, w, 1e-6)

    def scatter(fn):
        return lambda: fn(np.zeros((167, 64), np.float32), idx, rows)

    return [
        ("lcs_length 120x140", lambda: k._lcs_length_np(a, b), lambda: k._lcs_length_nb(a, b)),
        ("gelu_forward 512x64", lambda: k._gelu_forward_np(x), lambda: k._gelu_forward_nb(x)),
        ("gelu_backward 512x64", lambda: k._gelu_backward_np(x, g), lambda: k._gelu_backward_nb(x, g)),
        ("rmsnorm_forward 512x64", lambda: k._rmsnorm_forward_np(x, w, 1e-6), lambda: k._rmsnorm_forward_nb(x, w, np.float32(1e-6))),
        ("rmsnorm_backward 512x64", lambda: k._rmsnorm_backward_np(x, w, inv, g), lambda: k._rmsnorm_backward_nb(x, w, inv, g)),
        ("scatter_add_rows 2048->167", scatter(k._scatter_add_rows_np), scatter(k._scatter_add_rows_nb)),
    ]


def best(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    args = ap.parse_args(argv)
    if not k.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rows = []
    for name, np_fn, nb_fn in cases(np.random.default_rng(0)):
        nb_fn()
        t_np, t_nb = best(np_fn, args.repeat, args.number), best(nb_fn, args.repeat, args.number)
        rows.append((name, f"{t_np * 1e6:.1f}", f"{t_nb * 1e6:.1f}", f"{t_np / t_nb:.2f}x"))
    header = ("kernel", "numpy us", "numba us", "speedup")
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(4)]
    for r in [header, *rows]:
        print("  ".join(c.ljust(wd) if i == 0 else c.rjust(wd) for i, (c, wd) in enumerate(zip(r, widths))))


if __name__ == "__main__":
    main()
