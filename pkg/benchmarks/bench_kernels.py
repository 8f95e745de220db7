"""Time the numba and numpy kernel backends on path-sized workloads.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--batch 16]

Prints one line per kernel with the best-of-``repeat`` time for each
backend and the numpy/numba ratio.  Outputs of the two backends are
checked for equality before timing.
"""

import argparse
import timeit

import numpy as np

from cryoimb import _kernels as K
from cryoimb.tensor import Conv3D, init_conv


def workloads(batch, rng):
    x1 = rng.standard_normal((batch, 1, 16, 16, 16)).astype(np.float32)
    x8 = rng.standard_normal((batch, 8, 14, 14, 14)).astype(np.float32)
    conv = Conv3D(init_conv(rng, 8, 16, 3))
    d_out = K.out_extent(14, 3, 1)
    dcols = rng.standard_normal((8 * 27, batch * d_out ** 3)).astype(np.float32)
    _, arg = K.maxpool3d_forward(x8, 2)
    g = rng.standard_normal(arg.shape).astype(np.float32)

    def conv_step():
        y = conv.forward(x8)
        conv.backward(np.ones_like(y))

    return {
        "im2col k5 1ch 16^3": lambda: K.im2col3d(x1, 5),
        "im2col k3 8ch 14^3": lambda: K.im2col3d(x8, 3),
        "col2im k3 8ch 14^3": lambda: K.col2im3d(dcols, x8.shape, 3),
        "maxpool fwd w2": lambda: K.maxpool3d_forward(x8, 2),
        "maxpool bwd w2": lambda: K.maxpool3d_backward(g, arg, 2),
        "conv3d fwd+bwd": conv_step,
    }


def check_agreement(jobs):
    for name, fn in jobs.items():
        if name.startswith("conv3d"):
            continue
        K.set_backend("numpy")
        a = fn()
        K.set_backend("numba")
        b = fn()
        a, b = (a, b) if isinstance(a, tuple) else ((a,), (b,))
        for u, v in zip(a, b):
            if not np.array_equal(u, v):
                raise SystemExit(f"{name}: backends disagree")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=16)
    args = ap.parse_args(argv)
    if not K.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    jobs = workloads(args.batch, np.random.default_rng(0))
    check_agreement(jobs)  # also triggers JIT compilation
    print(f"{'kernel':<22} {'numba ms':>9} {'numpy ms':>9} {'numpy/numba':>12}")
    for name, fn in jobs.items():
        times = {}
        for backend in ("numba", "numpy"):
            K.set_backend(backend)
            times[backend] = min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<22} {times['numba']:9.2f} {times['numpy']:9.2f} "
              f"{times['numpy'] / times['numba']:12.2f}")


if __name__ == "__main__":
    main()
