"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Three workloads: Lawson-Hanson on batches of small dense NNLS problems, the
masked Gram kernel at full-size unfolding shapes, and a few ALS iterations of
an inexact fit.  Both backends run in the same process; numba compilation is
excluded by a warm-up call.  Results are also checked for agreement.
"""
import argparse
import json
import logging
import time

import numpy as np

from grate import _kernels
from grate.engine import FitConfig, fit
from grate.experiments import hide_fibers, synth_generate


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def lawson_hanson_batch(kernels, problems):
    empty = np.zeros(0, dtype=bool)
    return [kernels.lawson_hanson(B, d, empty, 1e-10, 500)[0] for B, d in problems]


def workloads(rng):
    problems = [(rng.standard_normal((40, 30)), rng.standard_normal(40)) for _ in range(300)]
    # mode-1 unfolding of a 7x103x12x4 compound tensor at rank 23
    K = rng.uniform(size=(103 * 12 * 4, 23))
    Y = rng.uniform(size=(103 * 12 * 4, 7))
    W = rng.uniform(size=Y.shape) < 0.6
    # mode-2 unfolding: many short columns
    K2 = rng.uniform(size=(7 * 12 * 4, 23))
    Y2 = rng.uniform(size=(7 * 12 * 4, 103))
    W2 = rng.uniform(size=Y2.shape) < 0.6
    _, _, c = synth_generate((7, 103, 12, 4), 10, "inexact", noise_sd=0.02, residual_scale=0.1)
    mask, _ = hide_fibers(c.mask, 0.45, 0)
    compound = c.with_mask(mask)
    cfg = FitConfig(rank=23, mode="inexact", nonneg=True, max_iters=5)
    return {
        "lawson_hanson x300 (40x30)": lambda k: lawson_hanson_batch(k, problems),
        "masked_gram 4944x23 -> 7": lambda k: k.masked_gram(K, Y, W),
        "masked_gram 336x23 -> 103": lambda k: k.masked_gram(K2, Y2, W2),
        "fit 7x103x12x4 R=23, 5 iters": lambda k: fit(compound, cfg, kernels=k)[1].costs,
    }


def agree(a, b):
    if isinstance(a, (list, tuple)):
        return all(agree(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-8, atol=1e-10)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="write the timings here")
    args = ap.parse_args(argv)
    logging.disable(logging.WARNING)
    if _kernels.numba_kernels is None:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    rows = []
    print(f"{'workload':34s} {'numpy s':>9s} {'numba s':>9s} {'speedup':>8s}  agree")
    for name, run in workloads(rng).items():
        run(_kernels.numba_kernels)  # compile
        t_np, out_np = best_of(lambda: run(_kernels.numpy_kernels), args.repeat)
        t_nb, out_nb = best_of(lambda: run(_kernels.numba_kernels), args.repeat)
        ok = agree(out_np, out_nb)
        rows.append(dict(workload=name, numpy=t_np, numba=t_nb, speedup=t_np / t_nb, agree=ok))
        print(f"{name:34s} {t_np:9.4f} {t_nb:9.4f} {t_np / t_nb:8.2f}  {ok}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
