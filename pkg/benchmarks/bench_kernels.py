"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--dims 64] [--repeat 3]
"""
import argparse
import time

from tubeskel import _fallback, kernels
from tubeskel.flowfield import generate_vectors
from tubeskel.phantom import PhantomConfig, generate
from tubeskel.teasar import skeletonize
from tubeskel.volgrid import euclidean_distance_transform

NAMES = ("edt_pass", "geodesic_bfs", "penalty_dijkstra")


def _use(module):
    for name in NAMES:
        setattr(kernels, name, getattr(module, name))


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dims", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    gt, mask, _ = generate(PhantomConfig(seed=0, dims=(args.dims,) * 3, n_trees=2, root_radius=3.0))
    field = generate_vectors(mask, gt)
    roots = gt.pos[gt.roots]
    cases = {
        "edt": lambda: euclidean_distance_transform(mask),
        "skeletonize": lambda: skeletonize(mask, field, roots),
    }
    backends = {"python": _fallback}
    try:
        from tubeskel import _kernels
    except ImportError:
        print("compiled extension not built; timing the fallback only")
    else:
        backends["cython"] = _kernels
    original = {name: getattr(kernels, name) for name in NAMES}
    results = {}
    try:
        for label, module in backends.items():
            _use(module)
            for case, fn in cases.items():
                results[label, case] = _best(fn, args.repeat)
    finally:
        for name, fn in original.items():
            setattr(kernels, name, fn)

    print(f"dims {args.dims}^3, {int(mask.data.sum())} foreground voxels, best of {args.repeat}")
    print(f"{'case':<12} {'python s':>10} {'cython s':>10} {'speedup':>8}")
    for case in cases:
        py = results["python", case]
        cy = results.get(("cython", case))
        tail = f"{cy:10.4f} {py / cy:8.1f}" if cy else f"{'-':>10} {'-':>8}"
        print(f"{case:<12} {py:10.4f} {tail}")


if __name__ == "__main__":
    main()
