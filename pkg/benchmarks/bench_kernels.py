"""Time the compiled box kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each case runs on both backends with identical inputs; the outputs are
compared before any timing is reported.
"""

import argparse
import sys
import timeit

import numpy as np

from nodule_detect import kernels
from nodule_detect import targets as tg


def _boxes(rng, n, hi=512.0, lo_wh=4.0, hi_wh=64.0):
    xy = rng.uniform(0, hi, size=(n, 2))
    return np.hstack([xy, xy + rng.uniform(lo_wh, hi_wh, size=(n, 2))])


def cases(rng):
    a, b = _boxes(rng, 2000), _boxes(rng, 64)
    nms_boxes, nms_scores = _boxes(rng, 3000, hi=256), rng.random(3000)
    dets, gts = _boxes(rng, 300), _boxes(rng, 20)      # already in priority order
    anchors = tg.generate_anchors(512)
    label_gts = _boxes(rng, 3, hi=400, lo_wh=8, hi_wh=48)
    return {
        "iou_matrix 2000x64": lambda k: k.iou_matrix(a, b),
        "nms 3000 boxes @0.7": lambda k: k.nms(nms_boxes, nms_scores, 0.7),
        "greedy_match 300 dets / 20 gts": lambda k: k.greedy_match(dets, gts, 0.5),
        "rpn labels, 261,888 anchors": lambda k: _labels(k, anchors, label_gts),
    }


def _labels(backend, anchors, gts):
    saved = kernels.iou_matrix
    kernels.iou_matrix = backend.iou_matrix
    try:
        return tg.assign_rpn_labels(anchors, gts).cls
    finally:
        kernels.iou_matrix = saved


def _same(x, y):
    if isinstance(x, tuple):
        return all(_same(p, q) for p, q in zip(x, y))
    return np.array_equal(np.asarray(x), np.asarray(y)) or np.allclose(x, y, rtol=0, atol=1e-12)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if "cython" not in kernels.BACKENDS:
        print("compiled backend not built; run `pip install --no-build-isolation -e .` first", file=sys.stderr)
        return 1
    py, cy = kernels.BACKENDS["python"], kernels.BACKENDS["cython"]
    print(f"{'case':34s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(np.random.default_rng(args.seed)).items():
        if not _same(fn(py), fn(cy)):
            print(f"{name}: backends disagree", file=sys.stderr)
            return 1
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
        t_cy = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:34s} {t_py:10.2f} {t_cy:10.2f} {t_py / t_cy:7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
