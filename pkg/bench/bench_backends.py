"""Compiled vs numpy kernels: ray marching, importance scoring and one NCB training step.

    python bench/bench_backends.py [--size 64] [--repeats 3] [--json]
"""

import argparse
import json
import time

import numpy as np

from voxelzip import _backend, ncb
from voxelzip.cameras import heldout_cameras, probe_cameras
from voxelzip.compress import compute_importance
from voxelzip.render import MarchConfig, march_rays
from voxelzip.synth import SceneSpec, generate_scene


def best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args()

    grid = generate_scene(SceneSpec.make("checker", args.size))
    cams = heldout_cameras(grid.dims.spatial, 4, 64)
    rays = [c.rays() for c in cams]
    probes = probe_cameras(grid.dims.spatial, 20, 20 * 32 * 32)
    cfg = MarchConfig()
    rng = np.random.default_rng(0)
    net = ncb.NcbNetwork.create(grid.dims.c, rng, head_std=0.1, mod_std=0.1)
    n = 8192
    s = rng.normal(size=n).astype(np.float32)
    c = rng.normal(size=(n, grid.dims.c)).astype(np.float32)
    P = rng.uniform(-1, 1, size=(n, 32)).astype(np.float32)

    def train_step():
        caches = {}
        so, co = net.forward(s, c, P, caches)
        _, gs, gc = ncb.l1_loss(so, co, s, c)
        net.backward(caches, gs, gc)

    results = {}
    saved = _backend.net_kernels
    for name in _backend.available():
        kern = _backend.get(name)
        _backend.net_kernels = _backend._cnet if name == "cython" else kern
        row = {
            "render_ms": best_of(lambda: [march_rays(grid, o, d, cfg, backend=name) for o, d in rays], args.repeats),
            "importance_ms": best_of(lambda: compute_importance(grid, probes, cfg, backend=name), args.repeats),
            "ncb_step_ms": best_of(train_step, args.repeats),
        }
        results[name] = row
    _backend.net_kernels = saved

    if args.json:
        print(json.dumps(results, sort_keys=True))
        return
    print(f"{'backend':<8} {'render_ms':>10} {'importance_ms':>14} {'ncb_step_ms':>12}")
    for name, row in results.items():
        print(f"{name:<8} {row['render_ms']:>10.1f} {row['importance_ms']:>14.1f} {row['ncb_step_ms']:>12.1f}")
    if "cython" in results and "python" in results:
        sp = {k: results["python"][k] / results["cython"][k] for k in results["cython"]}
        print("speedup  " + "  ".join(f"{k}={v:.1f}x" for k, v in sp.items()))


if __name__ == "__main__":
    main()
