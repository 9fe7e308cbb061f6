"""Compare the compiled and pure-Python kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints median wall time per call for each backend and the speedup. Outputs
are checked for equality before anything is timed.
"""

import argparse
import statistics
import time

import numpy as np

from maebench import kernels


def _boxes(rng, n, side=512.0):
    xy = rng.uniform(0, side * 0.8, size=(n, 2))
    wh = rng.uniform(8, side * 0.2, size=(n, 2))
    return np.hstack([xy, xy + wh])


def cases(rng):
    img = rng.random((256, 256))
    boxes = _boxes(rng, 400)
    scores = rng.random(400)
    order = np.argsort(-scores, kind="stable")
    pb, pi = boxes[order], rng.integers(0, 8, 400)
    gb, gi = _boxes(rng, 120), rng.integers(0, 8, 120)
    return {
        "resize 256->512": lambda m: m.resize_bicubic(img, 512, 512),
        "resize 256->224": lambda m: m.resize_bicubic(img, 224, 224),
        "nms 400 boxes": lambda m: m.nms(boxes, scores, 0.5),
        "match 400x120": lambda m: m.match_detections(pb, pi, gb, gi, 0.5),
    }


def timeit(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.BACKENDS
    if "cython" not in backends:
        print("compiled backend not built; only the fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'case':<18}" + "".join(f"{name:>12}" for name in backends) + f"{'speedup':>10}")
    for label, call in cases(rng).items():
        outs = [call(m) for m in backends.values()]
        for o in outs[1:]:
            assert np.array_equal(o, outs[0]), label
        t = {name: timeit(lambda m=m: call(m), args.repeat) for name, m in backends.items()}
        speed = t["python"] / t["cython"] if "cython" in t else float("nan")
        print(f"{label:<18}" + "".join(f"{v * 1e3:>10.2f}ms" for v in t.values()) + f"{speed:>9.1f}x")


if __name__ == "__main__":
    main()
