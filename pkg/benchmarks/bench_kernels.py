"""Compare the compiled and pure-Python kernel backends.

Run with ``python3 benchmarks/bench_kernels.py``.  Each kernel is timed on
both backends with the same inputs, outputs are checked for agreement, and
the best of several repeats is reported.
"""

import argparse
import timeit

import numpy as np

from fedmkgc import kernels


def make_inputs(n_ent, dim, batch, k, seed=0):
    rng = np.random.default_rng(seed)
    ent = rng.normal(size=(n_ent, 2 * dim))
    phase = rng.uniform(-np.pi, np.pi, size=(16, dim))
    heads = rng.integers(0, n_ent, batch)
    rels = rng.integers(0, 16, batch)
    cands = rng.integers(0, n_ent, (batch, k))
    scores = rng.normal(size=(batch, n_ent))
    targets = rng.integers(0, n_ent, batch)
    mask = (rng.random((batch, n_ent)) < 0.05).astype(np.uint8)
    mask[np.arange(batch), targets] = 0
    return ent, phase, heads, rels, cands, scores, targets, mask


def bench(n_ent=1000, dim=32, batch=512, k=64, repeat=5):
    ent, phase, heads, rels, cands, scores, targets, mask = make_inputs(n_ent, dim, batch, k)
    impls = kernels.implementations()
    results = {}
    outputs = {}
    for name, impl in impls.items():
        dist = kernels.rotate_distance(ent, phase, heads, rels, cands, impl=impl)
        gdist = np.ones_like(dist)
        jobs = {
            "rotate_distance": lambda: kernels.rotate_distance(ent, phase, heads, rels, cands, impl=impl),
            "rotate_distance_backward": lambda: kernels.rotate_distance_backward(
                ent, phase, heads, rels, cands, dist, gdist, impl=impl),
            "rank_counts": lambda: kernels.rank_counts(scores, targets, mask, impl=impl),
        }
        for kname, fn in jobs.items():
            outputs[(name, kname)] = fn()
            t = min(timeit.repeat(fn, number=1, repeat=repeat))
            results[(name, kname)] = t
    return impls, results, outputs


def agree(a, b):
    if isinstance(a, tuple):
        return all(agree(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--entities", type=int, default=1000)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--batch", type=int, default=512)
    ap.add_argument("--negatives", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    impls, results, outputs = bench(args.entities, args.dim, args.batch, args.negatives, args.repeat)
    print(f"active backend: {kernels.BACKEND}")
    kernel_names = ["rotate_distance", "rotate_distance_backward", "rank_counts"]
    print(f"{'kernel':<26}" + "".join(f"{n:>12}" for n in impls) + f"{'speedup':>10}  agree")
    for kname in kernel_names:
        line = f"{kname:<26}" + "".join(f"{results[(n, kname)] * 1e3:>10.2f}ms" for n in impls)
        if "cython" in impls:
            speed = results[("python", kname)] / results[("cython", kname)]
            ok = agree(outputs[("python", kname)], outputs[("cython", kname)])
            line += f"{speed:>9.1f}x  {ok}"
        print(line)
    if "cython" not in impls:
        print("compiled backend not built; only the fallback was timed")


if __name__ == "__main__":
    main()
