"""Time the numba and numpy paths of every hot kernel on identical inputs.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Numba compile time is excluded (each kernel is called once before timing).
"""

import argparse
import json
import timeit

import numpy as np

from stagealloc import _accel, kernels


def _inputs(rng):
    m, a = 2000, 48
    q, c = rng.normal(size=(m, a)), rng.uniform(0.1, 2, size=(m, a))
    req, act = kernels.greedy_order(q)
    quota = np.bincount(rng.integers(0, a, m), minlength=a).astype(np.int64)
    d_in, h = 5, 32
    params = (rng.normal(size=(d_in, h)), rng.normal(size=h), rng.normal(size=(h, h)), rng.normal(size=h),
              rng.normal(size=(h, 1)), rng.normal(size=1), np.zeros(d_in), np.ones(d_in), 0.8, 0.3)
    return {
        "pav (n=5000)": (kernels.pav_numba, kernels.pav_numpy, (rng.normal(size=5000), rng.uniform(0.5, 2, 5000))),
        "greedy (2000x48)": (kernels.greedy_numba, kernels.greedy_numpy, (req, act, quota, m)),
        "decide (2000x48)": (kernels.decide_numba, kernels.decide_numpy, (q, c, 0.7)),
        "window_variance (20000, w=1000)": (kernels.window_variance_numba, kernels.window_variance_numpy,
                                            (rng.normal(size=20000), 1000)),
        "rollout (40 candidates x 10)": (kernels.rollout_numba, kernels.rollout_numpy,
                                         (0.8, rng.normal(size=(10, 3)), rng.uniform(0, 5, (40, 10)), *params)),
        "mpc_cost (40 x 11)": (kernels.mpc_cost_numba, kernels.mpc_cost_numpy,
                               (rng.uniform(0.5, 1.1, (40, 11)), 0.8, 0.8, 0.4, 8.0, True)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    rows = []
    for name, (fast, slow, inp) in _inputs(np.random.default_rng(0)).items():
        fast(*inp)  # compile
        timings = {}
        for label, fn in (("numba", fast), ("numpy", slow)):
            t = timeit.Timer(lambda: fn(*inp))
            n, _ = t.autorange()
            timings[label] = min(t.repeat(args.repeat, n)) / n
        rows.append({"kernel": name, "numba_s": timings["numba"], "numpy_s": timings["numpy"],
                     "speedup": timings["numpy"] / timings["numba"]})
    width = max(len(r["kernel"]) for r in rows)
    print(f"{'kernel':<{width}}  {'numba':>11}  {'numpy':>11}  speedup")
    for r in rows:
        print(f"{r['kernel']:<{width}}  {r['numba_s'] * 1e6:9.1f}us  {r['numpy_s'] * 1e6:9.1f}us  {r['speedup']:6.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
