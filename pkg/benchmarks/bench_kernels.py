"""Compiled vs numpy timings for the hot kernels.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Sizes follow one 4 s window at the default knot spacing: 83 rotation
controls, 800 IMU samples, and a few thousand visual rows that each touch
24 spline columns plus one 3D landmark.
"""
import argparse
import json
import timeit

import numpy as np

from ctfusion import kernels
from ctfusion.geometry import so3_exp_batch


def spline_case(rng, n_ctrl=83, n_eval=800):
    Rc = so3_exp_batch(np.cumsum(rng.normal(0, 0.05, (n_ctrl, 3)), axis=0))
    seg = rng.integers(0, n_ctrl - 3, n_eval)
    u = rng.random(n_eval)
    return lambda k: k(Rc, seg, u, 20.0, True)


def factor_case(rng, n_ctrl=83, n_rows=4000, n_points=400, rdim=2):
    m = 6 * n_ctrl + 6
    spline_cols = np.sort(rng.integers(0, 6 * n_ctrl, (n_rows, 24)), axis=1)
    pt = rng.integers(0, n_points, n_rows)
    point_cols = m + 3 * pt[:, None] + np.arange(3)
    cols = np.concatenate([spline_cols, point_cols], axis=1).astype(np.int64)
    J = rng.normal(size=(n_rows, rdim, cols.shape[1]))
    r = rng.normal(size=(n_rows, rdim))
    n = m + 3 * n_points

    def dense(k):
        k(np.zeros((n, n)), np.zeros(n), cols, J, r)

    def schur(k):
        k(np.zeros((m, m)), np.zeros((m, 3 * n_points)), np.zeros((n_points, 3, 3)), np.zeros(n),
          cols, J, r, m)

    return dense, schur


def best_time(fn, repeat):
    fn()  # warm-up
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write results as JSON")
    args = ap.parse_args(argv)
    if kernels.compiled_so3_spline_eval is None:
        print("compiled extension not built; only the numpy backend is timed")

    rng = np.random.default_rng(args.seed)
    spline = spline_case(rng)
    dense, schur = factor_case(rng)
    cases = [
        ("so3_spline_eval", spline, kernels.python_so3_spline_eval, kernels.compiled_so3_spline_eval),
        ("accumulate_normal_equations", dense, kernels.python_accumulate_normal_equations,
         kernels.compiled_accumulate_normal_equations),
        ("accumulate_schur_blocks", schur, kernels.python_accumulate_schur_blocks,
         kernels.compiled_accumulate_schur_blocks),
    ]
    results = []
    print(f"{'kernel':30s} {'numpy ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, case, py, cy in cases:
        tp = best_time(lambda: case(py), args.repeat)
        tc = best_time(lambda: case(cy), args.repeat) if cy is not None else float("nan")
        results.append({"kernel": name, "python_s": tp, "compiled_s": tc, "speedup": tp / tc})
        print(f"{name:30s} {1e3 * tp:10.3f} {1e3 * tc:12.3f} {tp / tc:8.1f}x")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(results, f, indent=2)


if __name__ == "__main__":
    main()
