"""Time the compiled kernels against the pure-Python fallback.

Usage::

    python3 benchmarks/bench_kernels.py [--n 20000] [--repeat 5]

Each row reports the best-of-``repeat`` wall time per call for both
backends, the speed-up, and whether the two outputs are bit-identical.
"""
import argparse
import timeit

import numpy as np

from equidist import _backend
from equidist.neighbors import NeighborConfig, build_graph


def cases(n, rng):
    lat = rng.uniform(25.0, 49.0, n)
    lon = rng.uniform(-124.0, -67.0, n)
    lat2 = rng.uniform(25.0, 49.0, n)
    lon2 = rng.uniform(-124.0, -67.0, n)
    g = build_graph((lat, lon), NeighborConfig("knn", k=5)).symmetrized()
    z = rng.normal(size=n)
    target = rng.normal(size=n)
    normals = rng.normal(size=n)
    v0 = rng.normal(size=n)

    def sweep(k):
        v = v0.copy()
        k.icar_sweep(v, g.indptr, g.indices, g.weights, target, 1.5, 0.8, normals)
        return v

    return {
        "haversine_arrays": lambda k: k.haversine_arrays(lat, lon, lat2, lon2),
        "haversine_one_to_many": lambda k: k.haversine_one_to_many(lat[0], lon[0], lat2, lon2),
        "weighted_cross_sum": lambda k: np.array(k.weighted_cross_sum(g.indptr, g.indices,
                                                                      g.weights, z)),
        "icar_sweep": sweep,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=20000, help="problem size (points or nodes)")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if "compiled" not in _backend.BACKENDS:
        raise SystemExit("compiled kernels are not built; run `pip install -e .` first")
    py, cy = _backend.BACKENDS["python"], _backend.BACKENDS["compiled"]
    rng = np.random.default_rng(args.seed)

    print(f"n = {args.n}, best of {args.repeat}")
    print(f"{'kernel':<24}{'python ms':>12}{'compiled ms':>14}{'speed-up':>10}  identical")
    for name, fn in cases(args.n, rng).items():
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat))
        t_cy = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat))
        same = bool(np.array_equal(fn(py), fn(cy)))
        print(f"{name:<24}{1e3 * t_py:>12.2f}{1e3 * t_cy:>14.3f}{t_py / t_cy:>9.0f}x  {same}")


if __name__ == "__main__":
    main()
