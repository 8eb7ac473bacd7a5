"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N] [--size S]

Both implementations are called directly, so the STAGEPAINT_DISABLE_NUMBA
flag does not matter here. The first numba call (compilation) is excluded.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from stagepaint import _kernels


def cases(size: int, rng: np.random.Generator):
    grid = rng.random((size, size))
    y0, y1, x0, x1 = size // 4, 3 * size // 4, 0, size // 2
    z_new = rng.normal(size=(4, size, size))
    z_prev = rng.normal(size=(4, size, size))
    mask = (rng.random((size, size)) < 0.5).astype(np.uint8)
    flags = rng.random((size, size)) > 0.9
    return {
        "box_mass": (grid, y0, y1, x0, x1),
        "softmax_box_grad": (grid * 4.0, y0, y1, x0, x1),
        "tight_bbox": (flags,),
        "select_blend": (z_new, z_prev, mask),
    }


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=2000)
    parser.add_argument("--size", type=int, default=16)
    args = parser.parse_args(argv)

    if _kernels.numba_impl is None:
        raise SystemExit("numba is not importable; nothing to compare")
    impls = {"numpy": _kernels.numpy_impl, "numba": _kernels.numba_impl}
    rng = np.random.default_rng(0)
    print(f"grid {args.size}x{args.size}, {args.repeat} calls each, active backend: {_kernels.BACKEND}")
    print(f"{'kernel':<18}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, call_args in cases(args.size, rng).items():
        per_call = {}
        for label, impl in impls.items():
            fn = getattr(impl, name)
            fn(*call_args)  # warm-up, compiles the numba version
            per_call[label] = timeit.timeit(lambda: fn(*call_args), number=args.repeat) / args.repeat * 1e6
        print(f"{name:<18}{per_call['numpy']:>12.2f}{per_call['numba']:>12.2f}"
              f"{per_call['numpy'] / per_call['numba']:>9.1f}x")


if __name__ == "__main__":
    main()
