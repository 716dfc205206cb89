"""Timing comparison of the numba-jitted kernels against the numpy fallback.

Runs each backend in a subprocess (the backend is fixed at import time by
GLT_BACKEND), times the seven hot kernels on training-shaped inputs plus one
full forward/backward step, and prints a side-by-side table.

    python3 benchmarks/bench_kernels.py --repeats 50
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def bench(fn, repeats, warmup=3):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def run_worker(repeats, rows, cols, batch):
    from glt import kernels
    from glt import tensor as T
    from glt.tensor import Tape
    from glt.training import Task, TrainConfig, batch_forward, collate

    rng = np.random.default_rng(0)
    x = rng.normal(size=(rows, cols)).astype(np.float32)
    gy = rng.normal(size=(rows, cols)).astype(np.float32)
    gain = rng.normal(size=cols).astype(np.float32)
    bias = rng.normal(size=cols).astype(np.float32)
    y = kernels.softmax2d(x)
    _, xhat, rstd = kernels.layernorm2d(x, gain, bias, 1e-5)
    idx = rng.integers(0, 64, size=rows)
    table = np.zeros((64, cols), dtype=np.float32)
    n_p = 500_000
    p = rng.normal(size=n_p).astype(np.float32)
    g = rng.normal(size=n_p).astype(np.float64)
    m = np.zeros(n_p)
    v = np.zeros(n_p)

    results = {
        "softmax2d": bench(lambda: kernels.softmax2d(x), repeats),
        "softmax2d_bwd": bench(lambda: kernels.softmax2d_bwd(y, gy), repeats),
        "layernorm2d": bench(lambda: kernels.layernorm2d(x, gain, bias, 1e-5),
                             repeats),
        "layernorm2d_bwd": bench(
            lambda: kernels.layernorm2d_bwd(xhat, rstd, gain, gy), repeats),
        "sigmoid": bench(lambda: kernels.sigmoid(x), repeats),
        "scatter_add_rows": bench(
            lambda: kernels.scatter_add_rows(table, idx, gy), repeats),
        "adam_step": bench(
            lambda: kernels.adam_step(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8,
                                      0.5, 0.5), repeats),
    }

    # one optimization step of the real model, gradient included
    tcfg = TrainConfig(task="arithmetic", split="easy", out_dir="/tmp/bench",
                       batch_size=batch, dropout=0.0)
    task = Task(tcfg)
    from glt.model import init_params
    params = init_params(task.model_cfg, np.random.default_rng(0))
    chunk = collate(task.train_batch(0), grounded=False)

    def step():
        with Tape() as tape:
            res = batch_forward(params, task.model_cfg, chunk)
            loss = T.cross_entropy(res.answer_logits, chunk.targets)
            tape.backward(loss, params=params.values())

    results["train_step"] = bench(step, max(3, repeats // 10))
    print(json.dumps({"backend": kernels.BACKEND, "results": results}))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=50)
    ap.add_argument("--rows", type=int, default=2500,
                    help="kernel input rows (chart spans x batch)")
    ap.add_argument("--cols", type=int, default=64, help="hidden width")
    ap.add_argument("--batch", type=int, default=100)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()

    if args.worker:
        run_worker(args.repeats, args.rows, args.cols, args.batch)
        return

    reports = {}
    for backend in ("numpy", "numba"):
        env = dict(os.environ, GLT_BACKEND=backend)
        proc = subprocess.run(
            [sys.executable, os.path.abspath(__file__), "--worker",
             "--repeats", str(args.repeats), "--rows", str(args.rows),
             "--cols", str(args.cols), "--batch", str(args.batch)],
            capture_output=True, text=True, env=env)
        if proc.returncode != 0:
            print(f"{backend} worker failed:\n{proc.stderr}", file=sys.stderr)
            sys.exit(1)
        payload = json.loads(proc.stdout.splitlines()[-1])
        assert payload["backend"] == backend, payload
        reports[backend] = payload["results"]

    names = list(reports["numpy"])
    width = max(len(n) for n in names)
    print(f"rows={args.rows} cols={args.cols} batch={args.batch} "
          f"(best of {args.repeats})")
    print(f"{'kernel':<{width}}  {'numpy':>10}  {'numba':>10}  {'speedup':>7}")
    for name in names:
        a = reports["numpy"][name]
        b = reports["numba"][name]
        print(f"{name:<{width}}  {a * 1e6:>8.1f}us  {b * 1e6:>8.1f}us  "
              f"{a / b:>6.2f}x")


if __name__ == "__main__":
    main()
