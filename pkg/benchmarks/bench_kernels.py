"""Time the Cython kernels against the numpy fallback on evaluation-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 20]

Outputs of both backends are compared before timing.
"""
import argparse
import timeit

import numpy as np

from multirater import _pykernels

try:
    from multirater import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    mask = (rng.random((64, 64)) < 0.4).astype(np.uint8)
    samples = (rng.random((150, 64 * 64)) < 0.3).astype(np.uint8)
    raters = (rng.random((3, 64 * 64)) < 0.3).astype(np.uint8)
    q = rng.integers(0, 4, 64 * 64) / 3
    p = rng.random(64 * 64)
    return {
        "erode r=2 64x64": ("erode", (mask, 2)),
        "dilate r=2 64x64": ("dilate", (mask, 2)),
        "iou distance 150x150": ("pairwise_iou_distance", (samples, samples)),
        "iou distance 150x3": ("pairwise_iou_distance", (samples, raters)),
        "level index L=4": ("level_index", (q, 4)),
        "staged dice L=4": ("staged_dice", (p, q, 4)),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    if _ckernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'cython ms':>12}{'python ms':>12}{'speedup':>10}")
    for label, (name, call_args) in cases(rng).items():
        fc, fp = getattr(_ckernels, name), getattr(_pykernels, name)
        assert np.array_equal(fc(*call_args), fp(*call_args)), label
        tc = min(timeit.repeat(lambda: fc(*call_args), number=1, repeat=args.repeat)) * 1e3
        tp = min(timeit.repeat(lambda: fp(*call_args), number=1, repeat=args.repeat)) * 1e3
        print(f"{label:<24}{tc:>12.3f}{tp:>12.3f}{tp / tc:>9.1f}x")


if __name__ == "__main__":
    main()
