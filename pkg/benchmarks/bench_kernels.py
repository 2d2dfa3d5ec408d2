"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from coopadapt import kernels
from coopadapt.synthgen import VEHICLE_LIDAR


def random_bev(rng, n):
    return np.column_stack([rng.uniform(-30, 30, (n, 2)), rng.uniform(1, 5, n),
                            rng.uniform(1, 2.5, n), rng.uniform(-np.pi, np.pi, n)])


def cases(rng):
    a, b = random_bev(rng, 200), random_bev(rng, 200)
    boxes = np.column_stack([rng.uniform(-30, 30, (20, 2)), np.full(20, 0.8),
                             np.full(20, 4.5), np.full(20, 1.9), np.full(20, 1.6),
                             rng.uniform(-np.pi, np.pi, 20)])
    dirs = VEHICLE_LIDAR.ray_directions()
    origin = np.array([[0.0, 0.0, 1.8]])
    return {
        "iou_matrix 200x200": lambda m: m.iou_matrix(a, b),
        "iou_pairs 200": lambda m: m.iou_pairs(a, b),
        f"raycast {len(dirs)} rays x 20 boxes": lambda m: m.raycast(origin, dirs, boxes, 200.0, True),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    backends = kernels.backends()
    rng = np.random.default_rng(0)
    print(f"{'case':36s}" + "".join(f"{name:>14s}" for name in backends) + "   speedup")
    for label, fn in cases(rng).items():
        times = {}
        for name, mod in backends.items():
            n = 1 if name == "python" else 10
            times[name] = min(timeit.repeat(lambda: fn(mod), number=n, repeat=args.repeat)) / n
        row = "".join(f"{times[k] * 1e3:12.2f}ms" for k in backends)
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{label:36s}{row}   {speed:7.1f}x")


if __name__ == "__main__":
    main()
