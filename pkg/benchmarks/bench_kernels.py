"""Time the compiled and pure-Python kernel backends on the same inputs.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from udc import kernels

CASES = {
    "residual_quantize": lambda rng: ((rng.normal(size=(512, 32)), rng.normal(size=(4, 64, 32))), {}),
    "ema_scatter": lambda rng: ((rng.integers(0, 64, 4096), rng.normal(size=(4096, 32)), 64), {}),
    "topk_indices": lambda rng: ((rng.normal(size=(512, 200)), 20), {}),
}


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args(argv)
    impls = kernels.implementations()
    print(f"active backend: {kernels.BACKEND}; available: {', '.join(sorted(impls))}")
    rng = np.random.default_rng(0)
    for name, make in CASES.items():
        call_args, kw = make(rng)
        times = {}
        for label, impl in sorted(impls.items()):
            fn = getattr(kernels, name)
            times[label] = min(timeit.repeat(lambda: fn(*call_args, impl=impl, **kw), number=1,
                                             repeat=args.repeat))
        cells = "  ".join(f"{k}={v * 1e3:8.3f} ms" for k, v in times.items())
        ratio = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{name:18s} {cells}  python/cython={ratio:5.2f}")


if __name__ == "__main__":
    main()
