"""Compiled kernels vs the pure-Python fallback.

Each backend runs in its own interpreter because the choice is made at
import time (``PHONSIGN_PURE_PYTHON``). Reports median wall time of the
selective scan, one graph-attention layer and a full training step
(forward and backward) on the default model config.

    python3 benchmarks/bench_backends.py [--reps 7] [--batch 8]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def median_time(fn, reps):
    fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def measure(reps, batch):
    from phonsign import autograd as ag
    from phonsign.agan import gat_layer
    from phonsign.graph import LandmarkLayout, build_graph
    from phonsign.model import ModelConfig, forward, init_params, total_loss
    from phonsign.scan import BACKEND, scan

    rng = np.random.Generator(np.random.Philox(0))
    T, M, S, D = 30, 256, 16, 128

    u = ag.parameter(rng.normal(size=(batch, T, M)))
    a = ag.parameter(rng.uniform(0.5, 0.99, size=(batch, T, S)))
    b = ag.parameter(rng.normal(size=(batch, T, S)))
    c = ag.parameter(rng.normal(size=(batch, T, S)))

    def scan_step():
        ag.backward(ag.tsum(scan(u, a, b, c)))

    graph = build_graph(LandmarkLayout.from_name("DominantHand21"))
    h = ag.parameter(rng.normal(size=(batch, T, graph.node_count, D)))
    W = ag.parameter(rng.normal(size=(D, D)) * 0.1)
    att = ag.parameter(rng.normal(size=(4, 2 * (D // 4))) * 0.1)

    def gat_step():
        ag.backward(ag.tsum(gat_layer(h, graph, W, att)))

    cfg = ModelConfig()
    params = init_params(cfg, 0)
    x = rng.normal(size=(batch, cfg.frames, 21, 3))
    labels = np.arange(batch) % cfg.n_classes

    def train_step():
        p = {k: ag.parameter(v) for k, v in params.items()}
        ag.backward(total_loss(p, forward(p, x, cfg), labels, cfg).total)

    return {"backend": BACKEND, "scan_s": median_time(scan_step, reps),
            "gat_s": median_time(gat_step, reps), "train_step_s": median_time(train_step, reps)}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=7)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.child:
        print(json.dumps(measure(args.reps, args.batch)))
        return
    rows = []
    for pure in (False, True):
        env = dict(os.environ)
        env.pop("PHONSIGN_PURE_PYTHON", None)
        if pure:
            env["PHONSIGN_PURE_PYTHON"] = "1"
        out = subprocess.run([sys.executable, __file__, "--child", "--reps", str(args.reps),
                              "--batch", str(args.batch)], env=env, check=True, capture_output=True, text=True)
        rows.append(json.loads(out.stdout))
    keys = ("scan_s", "gat_s", "train_step_s")
    print(f"{'backend':<10}" + "".join(f"{k:>14}" for k in keys))
    for r in rows:
        print(f"{r['backend']:<10}" + "".join(f"{r[k]:>14.4f}" for k in keys))
    if len(rows) == 2 and rows[0]["backend"] != rows[1]["backend"]:
        print(f"{'speedup':<10}" + "".join(f"{rows[1][k] / rows[0][k]:>13.2f}x" for k in keys))


if __name__ == "__main__":
    main()
