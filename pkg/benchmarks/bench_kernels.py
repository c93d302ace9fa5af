"""Time the compiled and numpy kernels on the trainer's hot path.

    python3 benchmarks/bench_kernels.py [--dims 1 10 50] [--batch 64] [--repeat 2000]

Prints microseconds per call for each backend plus the end-to-end cost of
one training iteration (batch simulation, labels, loss/gradient, Adam).
"""

import argparse
import importlib
import os
import sys
import timeit

import numpy as np

from spde_deepsplit import nn
from spde_deepsplit._backend import get_kernels
from spde_deepsplit.rng import make_stream


def bench_backend(K, d, J, repeat):
    s = make_stream(0, d)
    shape = nn.NetworkShape(d)
    lay = nn.layout_for(shape)
    theta = nn.init_params(s, shape)
    X, y = s.normal((J, d)), s.normal(J)
    rm, rv = np.zeros(lay.n_stats), np.ones(lay.n_stats)
    m, v, g = np.zeros(lay.n_params), np.zeros(lay.n_params), s.normal(lay.n_params) * 1e-3
    th2 = theta.copy()
    calls = {
        "loss_grad": lambda: K.loss_grad(theta, lay, X, y, 1e-3),
        "infer+grad": lambda: K.infer(theta, lay, rm, rv, X, 1e-3, True),
        "adam": lambda: K.adam_update(th2, m, v, g, 1e-4, 0.9, 0.999, 1e-8, 1),
    }
    return {k: min(timeit.repeat(f, number=repeat, repeat=3)) / repeat * 1e6 for k, f in calls.items()}


def bench_iteration(backend, d, iters=300):
    """Per-iteration training cost in a fresh interpreter state for ``backend``."""
    os.environ["SPDE_DEEPSPLIT_BACKEND"] = backend
    for mod in [m for m in sys.modules if m.startswith("spde_deepsplit")]:
        del sys.modules[mod]
    tr = importlib.import_module("spde_deepsplit.trainer")
    paths = importlib.import_module("spde_deepsplit.paths")
    problems = importlib.import_module("spde_deepsplit.problems")
    rng = importlib.import_module("spde_deepsplit.rng")
    p = problems.make_problem("heat-mul", d)
    g = paths.make_grid(p.T, p.defaults.N)
    root = rng.make_stream(0, 0)
    z = paths.sample_noise(p, g, root.substream(0))
    cfg = tr.TrainConfig(iters=iters, schedule=p.defaults.schedule.scaled(iters / p.defaults.M))
    first = tr.train_step_network(p, g, z, 1, None, cfg, root, p.x_eval())
    t = timeit.timeit(lambda: tr.train_step_network(p, g, z, 13, first, cfg, root, p.x_eval()),
                      number=1)
    return t / iters * 1e6


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--dims", type=int, nargs="+", default=[1, 10, 50])
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=1000)
    args = ap.parse_args()
    try:
        backends = {"python": get_kernels("python"), "cython": get_kernels("cython")}
    except ImportError:
        print("compiled extension not available; timing numpy only")
        backends = {"python": get_kernels("python")}
    print(f"{'d':>4} {'kernel':<12}" + "".join(f"{b:>12}" for b in backends) + "   speedup")
    for d in args.dims:
        res = {b: bench_backend(K, d, args.batch, args.repeat) for b, K in backends.items()}
        for k in res["python"]:
            row = "".join(f"{res[b][k]:10.1f}us" for b in backends)
            sp = res["python"][k] / res["cython"][k] if "cython" in res else float("nan")
            print(f"{d:>4} {k:<12}{row}   {sp:5.2f}x")
        it = {b: bench_iteration(b, d) for b in backends}
        row = "".join(f"{it[b]:10.1f}us" for b in backends)
        sp = it["python"] / it["cython"] if "cython" in it else float("nan")
        print(f"{d:>4} {'iteration':<12}{row}   {sp:5.2f}x")


if __name__ == "__main__":
    main()
