"""Time the compiled PAV kernel against the pure-Python fallback.

    python benchmarks/bench_pav.py [--sizes 100 1000 10000] [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from dpsw import _pav_py
from dpsw.softrank import soft_rank

try:
    from dpsw import _pav
except ImportError:
    _pav = None


def best_time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[100, 1000, 10000, 100000])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    rng = np.random.default_rng(args.seed)

    print(f"{'n':>8} {'python ms':>11} {'cython ms':>11} {'speedup':>8} {'soft_rank ms':>13}")
    for n in args.sizes:
        # sorted-descending slope plus noise forces many merges
        y = np.ascontiguousarray(-np.arange(n, dtype=np.float64) + rng.normal(scale=n / 10, size=n))
        t_py = best_time(lambda: _pav_py.pav_blocks(y), args.repeat) * 1e3
        w = rng.lognormal(size=n)
        t_rank = best_time(lambda: soft_rank(w, 1e-3), args.repeat) * 1e3
        if _pav is None:
            print(f"{n:>8} {t_py:>11.3f} {'n/a':>11} {'n/a':>8} {t_rank:>13.3f}")
            continue
        t_c = best_time(lambda: _pav.pav_blocks(y), args.repeat) * 1e3
        print(f"{n:>8} {t_py:>11.3f} {t_c:>11.3f} {t_py / t_c:>7.1f}x {t_rank:>13.3f}")


if __name__ == "__main__":
    main()
