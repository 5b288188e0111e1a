"""Compare the compiled loss kernels with the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--n 4000] [--members 64] [--repeat 5]

Prints one line per kernel with the best-of-``repeat`` time of each backend,
the speedup, and the largest absolute difference between their outputs. A
final block times a whole minimax fit with each backend swapped in.
"""
from __future__ import annotations

import argparse
import sys
import timeit

import numpy as np

from brl import _kernels_py, kernels
from brl.harness import closed_finite_instance
from brl.learners import minimax
from brl.risk import generate_dataset


def compiled_module():
    try:
        from brl import _kernels
    except ImportError:
        return None
    return _kernels


def best_time(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=4000, help="samples per kernel call")
    parser.add_argument("--members", type=int, default=64, help="rows of the pairwise kernels")
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    fast = compiled_module()
    if fast is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return 1
    rng = np.random.default_rng(args.seed)
    n, K = args.n, args.members
    x = rng.normal(size=n)
    pred, boot, boot2 = (np.ascontiguousarray(rng.normal(size=(K, n))) for _ in range(3))
    r = rng.normal(size=n)
    cases = {
        "neumaier_sum": (x,),
        "mean_sq_residual": (pred[0], r, boot[0]),
        "pairwise_mean_sq_residual": (pred, r, boot),
        "half_sq_diff_mean": (boot, boot2),
    }
    print(f"{'kernel':<28}{'cython [ms]':>12}{'python [ms]':>13}{'speedup':>9}{'max |diff|':>12}")
    for name, call_args in cases.items():
        f_fast, f_slow = getattr(fast, name), getattr(_kernels_py, name)
        t_fast = best_time(lambda: f_fast(*call_args), args.repeat)
        t_slow = best_time(lambda: f_slow(*call_args), args.repeat)
        diff = float(np.max(np.abs(np.asarray(f_fast(*call_args)) - np.asarray(f_slow(*call_args)))))
        print(f"{name:<28}{1e3 * t_fast:>12.3f}{1e3 * t_slow:>13.3f}{t_slow / t_fast:>9.2f}{diff:>12.2e}")

    mdp, mu, F, G = closed_finite_instance(num_states=6, num_actions=3, horizon=3, size=16, seed=args.seed)
    data = generate_dataset(mdp, mu, n, rng_seed=args.seed)
    times = {}
    for label, module in (("cython", fast), ("python", _kernels_py)):
        kernels._impl = module
        times[label] = best_time(lambda: minimax(F, G, data), args.repeat)
    kernels._impl = fast if kernels.BACKEND == "cython" else _kernels_py
    print(f"minimax fit (n={n}, |F_h|=|G_h|=16, H=3): cython {1e3 * times['cython']:.1f} ms, "
          f"python {1e3 * times['python']:.1f} ms, speedup {times['python'] / times['cython']:.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
