"""Compiled vs NumPy kernels on the convolution shapes the classifier actually runs.

    python benchmarks/bench_kernels.py [--repeat 5] [--batch 256]

Prints best-of-N wall time per kernel and backend, the speedup, and the
largest absolute disagreement between the two backends. A final line times a
full training step (forward + backward + Adam) under each backend.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from mcam.kernels import load_backend


def shapes(batch):
    # (label, padded input, weight, groups)
    return [
        ("temporal 1x64", (batch, 1, 32, 191), (8, 1, 1, 64), 1),
        ("spatial depthwise 32x1", (batch, 8, 32, 128), (16, 1, 32, 1), 8),
        ("separable depthwise 1x16", (batch, 16, 1, 47), (16, 1, 1, 16), 16),
        ("pointwise 1x1", (batch, 16, 1, 32), (16, 16, 1, 1), 1),
        ("cbam spatial 7x7", (batch, 2, 7, 10), (1, 2, 7, 7), 1),
    ]


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def bench_kernels(batch, repeat):
    backends = {"compiled": load_backend("compiled"), "python": load_backend("python")}
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'compiled':>10s} {'python':>10s} {'speedup':>8s} {'max|diff|':>10s}")
    for label, xs, ws, g in shapes(batch):
        x, w = rng.standard_normal(xs), rng.standard_normal(ws)
        gy = rng.standard_normal((xs[0], ws[0], xs[2] - ws[2] + 1, xs[3] - ws[3] + 1))
        jobs = {
            "fwd": lambda m: m.conv2d_forward(x, w, g),
            "dx": lambda m: m.conv2d_grad_input(gy, w, g, xs[2], xs[3]),
            "dw": lambda m: m.conv2d_grad_weight(gy, x, g, ws[2], ws[3]),
        }
        for job, fn in jobs.items():
            times, outs = {}, {}
            for name, mod in backends.items():
                times[name], outs[name] = best_of(lambda: fn(mod), repeat)
            diff = np.abs(outs["compiled"] - outs["python"]).max()
            print(f"{label + ' ' + job:34s} {times['compiled']:10.4f} {times['python']:10.4f} "
                  f"{times['python'] / times['compiled']:8.1f} {diff:10.2e}")
    x = rng.standard_normal((batch, 16, 4096))
    gamma, beta = rng.random(16), rng.random(16)
    times, outs = {}, {}
    for name, mod in backends.items():
        t_f, fwd = best_of(lambda: mod.batchnorm_forward(x, gamma, beta, 1e-5), repeat)
        t_b, bwd = best_of(lambda: mod.batchnorm_backward(x, fwd[1], gamma, fwd[3], 1e-5), repeat)
        times[name], outs[name] = t_f + t_b, (fwd[0], bwd[0])
    diff = max(np.abs(a - b).max() for a, b in zip(outs["compiled"], outs["python"]))
    print(f"{'batchnorm fwd+bwd':34s} {times['compiled']:10.4f} {times['python']:10.4f} "
          f"{times['python'] / times['compiled']:8.1f} {diff:10.2e}")


STEP = """
import time, numpy as np
from mcam import tensor as T, kernels
from mcam.models import EEGNet, AttentionKind
from mcam.training import Adam, total_loss
m = EEGNet(kind=AttentionKind.parse("m3"), seed=0)
opt = Adam(m.parameters())
rng = np.random.default_rng(0)
x = rng.standard_normal(({batch}, 1, 32, 128)); y = np.arange({batch}) % 4
best = 1e9
for _ in range({repeat}):
    t = time.perf_counter()
    opt.zero_grad(); T.backward(total_loss(m, m(x, train=True, rng=rng), y)); opt.step()
    best = min(best, time.perf_counter() - t)
print(kernels.BACKEND, best)
"""


def bench_step(batch, repeat):
    # the backend is fixed at import, so each one runs in its own interpreter
    res = {}
    for name, env in (("compiled", {}), ("python", {"MCAM_PURE_PYTHON": "1"})):
        out = subprocess.run([sys.executable, "-c", STEP.format(batch=batch, repeat=repeat)],
                             env={**os.environ, **env}, capture_output=True, text=True, check=True)
        backend, secs = out.stdout.split()
        res[name] = (backend, float(secs))
    print(f"{'train step (m3)':34s} {res['compiled'][1]:10.4f} {res['python'][1]:10.4f} "
          f"{res['python'][1] / res['compiled'][1]:8.1f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    bench_kernels(args.batch, args.repeat)
    bench_step(args.batch, args.repeat)


if __name__ == "__main__":
    main()
