"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from sparsefreeze.kernels import available_backends, load_backend


def cases(dtype):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(32, 32, 16, 16)).astype(dtype)
    cols_shape = (32 * 16 * 16, 32 * 9)
    cols = rng.normal(size=cols_shape).astype(dtype)
    n = 1 << 20
    w = rng.normal(size=n).astype(dtype)
    g = rng.normal(size=n).astype(dtype)
    buf = np.zeros(n, dtype=dtype)
    mask = (rng.random(n) < 0.1).view(np.uint8)
    dt = np.dtype(dtype).type
    return {
        "im2col 32x32x16x16 k3": lambda k: k.im2col(x, 3, 3, 1, 1, 16, 16),
        "col2im 32x32x16x16 k3": lambda k: k.col2im(cols, x.shape, 3, 3, 1, 1, 16, 16),
        "masked sgd 1M": lambda k: k.sgd_momentum_masked(w, g, buf, mask, dt(0.1), dt(0.9), dt(1e-5)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--precision", type=int, choices=(32, 64), default=32)
    args = ap.parse_args(argv)
    dtype = np.float32 if args.precision == 32 else np.float64
    backends = available_backends()
    print(f"backends: {', '.join(backends)}; float{args.precision}; best of {args.repeat}")
    print(f"{'kernel':<24}" + "".join(f"{b:>12}" for b in backends) + ("  speedup" if len(backends) > 1 else ""))
    for name, fn in cases(dtype).items():
        times = []
        for b in backends:
            impl = load_backend(b)
            fn(impl)
            times.append(min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat)))
        row = f"{name:<24}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times)
        if len(times) > 1:
            row += f"  {times[0] / times[1]:>6.2f}x"
        print(row)


if __name__ == "__main__":
    main()
