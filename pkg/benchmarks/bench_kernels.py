#!/usr/bin/env python3
"""Time the compiled kernels against the numpy fallback and check agreement.

Run after building the extension:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --batch 128 --reps 100
"""

import argparse
import timeit

import numpy as np

from eyepad._kernels import numpy_backend


def _load_cython():
    try:
        from eyepad._kernels import _cykernels

        return _cykernels
    except ImportError:
        return None


def rel_diff(a, b):
    return float(np.max(np.abs(a - b)) / (np.max(np.abs(b)) + 1e-300))


def bench(label, fn_np, fn_cy, reps):
    t_np = timeit.timeit(fn_np, number=reps) / reps * 1e3
    if fn_cy is None:
        print(f"{label:28s} numpy {t_np:8.3f} ms   (extension unavailable)")
        return
    t_cy = timeit.timeit(fn_cy, number=reps) / reps * 1e3
    speedup = t_np / t_cy if t_cy > 0 else float("inf")
    print(f"{label:28s} numpy {t_np:8.3f} ms   cython {t_cy:8.3f} ms   x{speedup:.2f}")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--batch", type=int, default=64)
    parser.add_argument("--channels", type=int, default=4)
    parser.add_argument("--size", type=int, default=32)
    parser.add_argument("--kernel", type=int, default=3)
    parser.add_argument("--dim", type=int, default=32)
    parser.add_argument("--reps", type=int, default=50)
    args = parser.parse_args()

    cy = _load_cython()
    rng = np.random.default_rng(0)
    x = rng.normal(size=(args.batch, 1, args.size, args.size))
    w = rng.normal(size=(args.channels, 1, args.kernel, args.kernel))
    b = rng.normal(size=args.channels)
    out_h = args.size - args.kernel + 1
    g = rng.normal(size=(args.batch, args.channels, out_h, out_h))
    a1 = rng.normal(size=(args.batch, args.dim))
    a2 = rng.normal(size=(args.batch, args.dim))

    if cy is not None:
        checks = [
            ("conv2d_forward",
             rel_diff(cy.conv2d_forward(x, w, b), numpy_backend.conv2d_forward(x, w, b))),
            ("pairwise_sqdist",
             rel_diff(cy.pairwise_sqdist(a1, a2), numpy_backend.pairwise_sqdist(a1, a2))),
        ]
        for (gx, gw, gb), (nx, nw, nb) in [
            (cy.conv2d_backward(x, w, g), numpy_backend.conv2d_backward(x, w, g))
        ]:
            checks += [
                ("conv2d_backward/x", rel_diff(gx, nx)),
                ("conv2d_backward/w", rel_diff(gw, nw)),
                ("conv2d_backward/b", rel_diff(gb, nb)),
            ]
        worst = max(d for _, d in checks)
        print(f"agreement: worst relative difference {worst:.2e}")
        assert worst < 1e-9, "backends disagree"
    else:
        print("compiled extension not importable; timing the fallback only")

    bench(
        f"conv2d fwd  {x.shape}",
        lambda: numpy_backend.conv2d_forward(x, w, b),
        (lambda: cy.conv2d_forward(x, w, b)) if cy else None,
        args.reps,
    )
    bench(
        f"conv2d bwd  {x.shape}",
        lambda: numpy_backend.conv2d_backward(x, w, g),
        (lambda: cy.conv2d_backward(x, w, g)) if cy else None,
        args.reps,
    )
    bench(
        f"pairwise_sqdist {a1.shape}",
        lambda: numpy_backend.pairwise_sqdist(a1, a2),
        (lambda: cy.pairwise_sqdist(a1, a2)) if cy else None,
        args.reps,
    )


if __name__ == "__main__":
    main()
