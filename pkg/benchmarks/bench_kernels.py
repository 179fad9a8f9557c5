"""Time the numba and numpy kernel sets on default-network-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 5] [--batch 100] [--csv out.csv]

Each kernel is warmed up once (numba compiles on first call), then timed as
the best of ``--repeat`` runs. A full forward+backward pass of the default network on one
batch is timed the same way.
"""

import argparse
import csv
import sys
import time

import numpy as np

from semface import kernels
from semface import layers as L
from semface.network import network_backward, network_forward, default_net


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(batch):
    g = np.random.default_rng(0)
    x1 = g.normal(size=(batch, 1, 48, 48)).astype(np.float32)
    x2 = g.normal(size=(batch, 64, 22, 22)).astype(np.float32)
    a1 = g.normal(size=(batch, 64, 44, 44)).astype(np.float32)
    cols = kernels.im2col(x2, 5, 5, 1)
    pooled, arg = kernels.maxpool_forward(a1, 3, 2)
    gpool = np.ones_like(pooled)
    taps = L.gaussian_taps(9).astype(np.float32)
    lcn_in = a1.reshape(-1, 44, 44)[:512]
    net = default_net(seed=0)
    labels = np.arange(batch) % 7

    def train_step():
        preds, cache = network_forward(net, x1)
        grad = preds.copy()
        grad[np.arange(batch), labels] -= 1
        network_backward(net, cache, grad / batch)

    return {
        "im2col conv1 (5x5 on 48x48)": lambda: kernels.im2col(x1, 5, 5, 1),
        "im2col conv2 (5x5 on 64x22x22)": lambda: kernels.im2col(x2, 5, 5, 1),
        "col2im conv2": lambda: kernels.col2im(cols, x2.shape, 5, 5, 1),
        "maxpool 3/2 forward (64x44x44)": lambda: kernels.maxpool_forward(a1, 3, 2),
        "maxpool 3/2 backward": lambda: kernels.maxpool_backward(arg, gpool, a1.shape),
        "gaussian 9x9 same (512 maps)": lambda: kernels.gauss_same(lcn_in, taps),
        "default network forward+backward": train_step,
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--batch", type=int, default=100)
    p.add_argument("--csv", help="also write the table here")
    args = p.parse_args(argv)

    backends = kernels.available_backends()
    results = {}
    for name in backends:
        prev = kernels.use_backend(name)
        for label, fn in cases(args.batch).items():
            results.setdefault(label, {})[name] = best_of(fn, args.repeat)
        kernels.use_backend(prev)

    header = ["kernel", *[f"{b}_s" for b in backends]] + (["numpy/numba"] if len(backends) == 2 else [])
    rows = []
    for label, t in results.items():
        row = [label, *[f"{t[b]:.4f}" for b in backends]]
        if len(backends) == 2:
            row.append(f"{t['numpy'] / t['numba']:.2f}")
        rows.append(row)
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    for r in [header, *rows]:
        print("  ".join(str(v).ljust(w) for v, w in zip(r, widths)))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            csv.writer(fh).writerows([header, *rows])
    return 0


if __name__ == "__main__":
    sys.exit(main())
