"""Time the compiled pooling kernels against the numpy fallback.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat N] [--json PATH]

Both backends must produce bit-identical outputs; the script checks that
before timing.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from l2lesion import kernels
from l2lesion.pyramid import PyramidSpec, region_rects


def cases(rng):
    x = np.ascontiguousarray(rng.normal(size=(16, 64, 64)))
    g = np.ascontiguousarray(rng.normal(size=(16, 32, 32)))
    feat = np.ascontiguousarray(rng.random((16, 32, 32)))
    regions = []
    for _ in range(64):
        x0, y0 = int(rng.integers(0, 24)), int(rng.integers(0, 24))
        regions.append((x0, y0, x0 + int(rng.integers(2, 9)), y0 + int(rng.integers(2, 9))))
    rects = np.ascontiguousarray(np.concatenate([region_rects(r, PyramidSpec().levels) for r in regions]))
    rg = np.ascontiguousarray(rng.normal(size=(len(rects), 16)))

    def l2_fwd(be):
        return be.l2_pool_fwd(x, 2, 2, 2, 2, False)

    def l2_bwd(be):
        return be.l2_pool_bwd(x, g, 2, 2, 2, 2, False, False, 1e-12)

    def max_fwd(be):
        return be.max_pool_fwd(x, 2, 2, 2, 2)

    def pyr_fwd(be):
        return be.rect_pool_fwd(feat, rects, False)

    def pyr_bwd(be):
        out, idx = be.rect_pool_fwd(feat, rects, False)
        return be.rect_pool_bwd(feat, rects, np.asarray(out), np.asarray(idx), rg, False, 1e-12)

    return [("l2_pool forward 16x64x64", l2_fwd), ("l2_pool backward 16x64x64", l2_bwd),
            ("max_pool forward 16x64x64", max_fwd), ("pyramid l2 forward 64 rois", pyr_fwd),
            ("pyramid l2 fwd+bwd 64 rois", pyr_bwd)]


def _bytes(res):
    if isinstance(res, tuple):
        return b"".join(np.asarray(r).tobytes() for r in res)
    return np.asarray(res).tobytes()


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--json", help="also write results here")
    args = p.parse_args(argv)
    if kernels.compiled_backend is None:
        print("compiled kernels are not built; nothing to compare", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':<30} {'compiled ms':>12} {'python ms':>12} {'speedup':>8}")
    for name, fn in cases(rng):
        comp, py = kernels.compiled_backend, kernels.python_backend
        if _bytes(fn(comp)) != _bytes(fn(py)):
            print(f"{name}: backends disagree", file=sys.stderr)
            return 2
        tc = min(timeit.repeat(lambda: fn(comp), number=1, repeat=args.repeat)) * 1e3
        tp = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
        rows.append({"kernel": name, "compiled_ms": tc, "python_ms": tp, "speedup": tp / tc})
        print(f"{name:<30} {tc:>12.3f} {tp:>12.3f} {tp / tc:>7.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
