"""Time the numba and pure-numpy implementations of each hot kernel.

    python3 benchmarks/bench_backends.py [--sizes 64 256] [--repeat 5] [--csv out.csv]

Both implementations are called directly, so one process covers both backends;
the env flag ``SNELL_DISABLE_NUMBA`` only decides which one the library uses.
Each row also reports the max-abs difference between the two results.
"""

from __future__ import annotations

import argparse
import csv
import sys
import timeit

import numpy as np

from snell import _accel
from snell.kernels import (
    _CODES,
    KernelSpec,
    _bounds_array,
    _merge_backward_jit,
    _merge_backward_np,
    _merge_jit,
    _merge_np,
)
from snell.numkit import RngStream, _matmul_jit, _matmul_np, _select_jit, _select_np, randn
from snell.trainer import _adamw_jit, _adamw_np


def _cases(size: int, rank: int):
    rng = RngStream(size)
    b = randn(rng.child(0), size, rank)
    a = randn(rng.child(1), size, rank)
    g = randn(rng.child(2), size, size)
    for variant, params in (
        ("linear", []),
        ("piecewise_linear", [0.7, -0.4]),
        ("sigmoid", [1.2, 0.5, -0.1]),
        ("rbf", [0.9, 0.3, 0.05]),
    ):
        spec = KernelSpec(variant, np.array(params, dtype=np.float64))
        args = (_CODES[variant], spec.params, _bounds_array(spec, rank), b, a)
        yield f"merge/{variant}", _merge_jit, _merge_np, args
        yield f"merge_backward/{variant}", _merge_backward_jit, _merge_backward_np, args + (g,)

    x = randn(rng.child(3), size, size)
    yield "matmul", _matmul_jit, _matmul_np, (x, g)

    flat = np.abs(g.ravel())
    k = flat.size // 2
    # selection works in place, so each call gets a fresh copy
    yield "kth_smallest", (lambda buf, k: _select_jit(buf.copy(), k)), (lambda buf, k: _select_np(buf.copy(), k)), (flat, k)

    def adamw(impl):
        def run(p, grad):
            p, m, v = p.copy(), np.zeros_like(p), np.zeros_like(p)
            impl(p, grad, m, v, 1e-3, 0.9, 0.999, 1e-8, 1e-4, 0.1, 0.001)
            return p

        return run

    yield "adamw_step", adamw(_adamw_jit), adamw(_adamw_np), (x, g)


def _max_diff(u, v) -> float:
    if isinstance(u, tuple):
        return max(_max_diff(p, q) for p, q in zip(u, v))
    u, v = np.asarray(u), np.asarray(v)
    return float(np.max(np.abs(u - v))) if u.size else 0.0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[64, 256])
    ap.add_argument("--rank", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--csv", metavar="PATH")
    args = ap.parse_args(argv)

    if not _accel.HAS_NUMBA:
        print("numba unavailable (or disabled); nothing to compare", file=sys.stderr)
        return 1

    rows = []
    for size in args.sizes:
        for name, jit_fn, np_fn, fargs in _cases(size, args.rank):
            diff = _max_diff(jit_fn(*fargs), np_fn(*fargs))  # also warms up the jit
            t_jit = min(timeit.repeat(lambda: jit_fn(*fargs), number=1, repeat=args.repeat))
            t_np = min(timeit.repeat(lambda: np_fn(*fargs), number=1, repeat=args.repeat))
            rows.append((name, size, t_jit, t_np, t_np / t_jit, diff))

    header = ("kernel", "size", "numba_s", "numpy_s", "speedup", "max_abs_diff")
    print(f"{header[0]:<34}{header[1]:>6}{header[2]:>12}{header[3]:>12}{header[4]:>9}{header[5]:>14}")
    for name, size, t_jit, t_np, ratio, diff in rows:
        print(f"{name:<34}{size:>6}{t_jit:>12.2e}{t_np:>12.2e}{ratio:>9.2f}{diff:>14.2e}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
