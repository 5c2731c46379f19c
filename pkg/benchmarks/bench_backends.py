"""Compiled vs pure-Python projector: wall time per forward/back pair and agreement.

    python3 benchmarks/bench_backends.py --shape 32,32,16 --views 32 --threads 1,2
"""

import argparse
import json
import time

import numpy as np

from spectproj import backend
from spectproj.core import Volume, uniform_angles
from spectproj.projector import SystemModel
from spectproj.psf import gaussian_psf, linear_fwhm


def timed(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run(shape, nview, threads, rotation, kernel, repeat, seed):
    rng = np.random.default_rng(seed)
    x = rng.random(shape)
    mu = Volume(rng.uniform(0, 0.02, shape))
    psf = gaussian_psf(linear_fwhm(shape[1], 4.8, 3.0, 0.05), (kernel, kernel), 4.8, nview)
    names = ["python"] + (["compiled"] if backend.HAVE_COMPILED else [])
    rows, ref = [], None
    for name in names:
        for t in threads:
            m = SystemModel(psf, uniform_angles(nview), mu, rotation_method=rotation,
                            threads=t, kernels=backend.get(name))
            v = np.empty(m.views_shape)
            b = np.empty(m.shape)
            m.forward(x, out=v)
            fwd = timed(lambda: m.forward(x, out=v), repeat)
            bwd = timed(lambda: m.back(v, out=b), repeat)
            if ref is None:
                ref = (v.copy(), b.copy())
            diff = max(np.abs(v - ref[0]).max() / np.abs(ref[0]).max(),
                       np.abs(b - ref[1]).max() / np.abs(ref[1]).max())
            rows.append({"backend": name, "threads": t, "forward_s": fwd, "back_s": bwd,
                         "max_rel_diff_vs_python": float(diff)})
    base = rows[0]["forward_s"] + rows[0]["back_s"]
    for r in rows:
        r["speedup"] = base / (r["forward_s"] + r["back_s"])
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--shape", default="32,32,16")
    p.add_argument("--views", type=int, default=32)
    p.add_argument("--threads", default="1")
    p.add_argument("--rotation", default="bilinear", choices=["bilinear", "three_pass_1d"])
    p.add_argument("--kernel", type=int, default=5)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="also write the rows to this file")
    a = p.parse_args(argv)
    shape = tuple(int(s) for s in a.shape.split(","))
    rows = run(shape, a.views, [int(t) for t in a.threads.split(",")], a.rotation, a.kernel, a.repeat, a.seed)
    print(f"shape {shape}, {a.views} views, {a.rotation}, {a.kernel}x{a.kernel} PSF")
    print(f"{'backend':10s}{'threads':>8s}{'forward s':>12s}{'back s':>12s}{'speedup':>9s}{'max rel diff':>14s}")
    for r in rows:
        print(f"{r['backend']:10s}{r['threads']:8d}{r['forward_s']:12.4f}{r['back_s']:12.4f}"
              f"{r['speedup']:9.1f}{r['max_rel_diff_vs_python']:14.1e}")
    if a.json:
        with open(a.json, "w") as f:
            json.dump(rows, f, indent=1)


if __name__ == "__main__":
    main()
