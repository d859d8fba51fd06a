#!/usr/bin/env python3
"""Benchmark the numba kernels against the numpy fallback.

Kernel timings run both paths in one process. The end-to-end timing scores a
batch with a random denoiser once per path, in a subprocess, with
OODKIT_DISABLE_NUMBA toggled.

    python3 benchmarks/bench_kernels.py [--repeats 20]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from oodkit import _accel, kernels as K


def best_of(fn, repeats):
    fn()  # warm up (jit compile)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rng):
    x = rng.standard_normal((64, 256)).astype(np.float32)
    up = rng.standard_normal((64, 256)).astype(np.float32)
    a = rng.standard_normal((256, 16, 16))
    b = rng.standard_normal((256, 16, 16))
    s_in = rng.standard_normal(2000)
    s_ood = rng.standard_normal(2000) + 0.5
    w = rng.dirichlet(np.ones(100), size=256)
    return {
        "swish_fwd 64x256": (lambda: K._swish_fwd_nb(x), lambda: K.swish_fwd_np(x)),
        "swish_bwd 64x256": (lambda: K._swish_bwd_nb(x, up), lambda: K.swish_bwd_np(x, up)),
        "pooled_sq_err 256x16x16 s=2": (lambda: K._pooled_sq_err_nb(a, b, 2), lambda: K.pooled_sq_err_np(a, b, 2)),
        "mann_whitney_u 2000x2000": (lambda: K._mann_whitney_u_nb(s_in, s_ood),
                                     lambda: K.mann_whitney_u_np(s_in, s_ood)),
        "hard_shrink 256x100": (lambda: K._hard_shrink_nb(w, 0.01, 1e-12), lambda: K.hard_shrink_np(w, 0.01, 1e-12)),
    }


E2E = """
import time, numpy as np
from oodkit import ood, kernels
from oodkit.diffusion import ReconstructionPlan, fast_schedule
from oodkit.nn import DenoiserNet
from oodkit.rng import RngHandle
net = DenoiserNet((16, 16), (256, 256), seed=0, zero_output=False)
x = np.random.default_rng(0).uniform(-1, 1, (32, 16, 16)).astype(np.float32)
plan = ReconstructionPlan.full(100, 20)
ood.score_matrix(net, x[:2], plan, fast_schedule(), RngHandle(0))
t0 = time.perf_counter()
ood.score_matrix(net, x, plan, fast_schedule(), RngHandle(0))
print(kernels.USING_NUMBA, time.perf_counter() - t0)
"""


def end_to_end():
    out = {}
    for disable in ("0", "1"):
        env = dict(os.environ, OODKIT_DISABLE_NUMBA=disable)
        res = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
        using, secs = res.stdout.split()
        out["numba" if using == "True" else "numpy"] = float(secs)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args()
    if not _accel.HAS_NUMBA:
        print("numba unavailable or disabled; nothing to compare")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, (nb, np_) in kernel_cases(rng).items():
        t_nb, t_np = best_of(nb, args.repeats), best_of(np_, args.repeats)
        print(f"{name:32s} {t_nb * 1e3:10.3f} {t_np * 1e3:10.3f} {t_np / t_nb:8.2f}")
    if not args.skip_e2e:
        e = end_to_end()
        print(f"{'score_matrix 32 imgs, 210 evals':32s} {e['numba'] * 1e3:10.1f} {e['numpy'] * 1e3:10.1f} "
              f"{e['numpy'] / e['numba']:8.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
