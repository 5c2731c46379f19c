"""Command-line interface.

Most commands operate on a *case directory* written by ``simulate``::

    activity.*  attenuation.*  labels.*  psf.*  y.*  rbar.*  case.json

Values resolve as flags > ``--config`` JSON > built-in defaults, and every
command that writes files also writes ``run.json`` with the resolved values.
Exit codes: 0 success, 1 validation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, backend
from .core import (ProjectionViews, SpectError, Volume, atomic_write_text, read_labels, read_psf,
                   read_views, read_volume, uniform_angles, write_labels, write_psf, write_views,
                   write_volume)
from .neural import load_weights, save_weights
from .projector import SystemModel, adjoint_discrepancy, random_system
from .psf import gaussian_psf, linear_fwhm
from .recon import PoissonProblem, mlem, osem
from .simulate import PhantomSpec, count_scale, make_phantom, mae, nrmse, simulate_measurements
from .training import TrainConfig, make_sample, train, unrolled_forward, write_curves

DEFAULTS = {
    "seed": 0, "threads": 1, "rotation": "bilinear", "views": 32, "kernel": 5,
    "psf_near": 3.0, "psf_slope": 0.05, "scatter_fraction": 0.1,
    "iters": 16, "subsets": 4, "beta": 1.0, "outer": 3, "inner": 1,
    "epochs": 50, "lr": 0.002, "weight_decay": 0.01, "checkpoint_every": 0,
    "trials": 100, "shape": "8,8,6", "tolerance": 1e-6, "repeat": 3, "backend": "both",
}

_COMMAND_DEFAULTS = {"adjoint-check": {"views": 7}, "bench": {"shape": "64,64,40", "views": 64, "threads": "1"}}


class Failure(Exception):
    """Check ran but did not pass (exit code 1)."""


def _shape(s) -> tuple[int, ...]:
    if isinstance(s, (list, tuple)):
        return tuple(int(v) for v in s)
    try:
        out = tuple(int(v) for v in str(s).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {s!r}") from None
    if len(out) != 3 or min(out) < 1:
        raise argparse.ArgumentTypeError(f"shape must be three positive ints, got {s!r}")
    return out


def _resolve(args: argparse.Namespace) -> dict:
    cfg = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as f:
            cfg = json.load(f)
    defaults = {**DEFAULTS, **_COMMAND_DEFAULTS.get(args.command, {})}
    out = {}
    for key, val in vars(args).items():
        if key in ("func", "config"):
            continue
        if val is None:
            val = cfg.get(key, defaults.get(key))
        out[key] = val
    return out


def _write_run(directory, command: str, resolved: dict, extra: dict | None = None) -> None:
    rec = {"command": command, "version": __version__, "backend": backend.BACKEND,
           "config": resolved, **(extra or {})}
    atomic_write_text(Path(directory) / "run.json", json.dumps(rec, indent=1, sort_keys=True, default=str) + "\n")


def _outdir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _parent(path) -> Path:
    """Create the parent directory of an output stem and return it."""
    return _outdir(Path(path).parent)


def _model(att: Volume, psf, angles, r: dict) -> SystemModel:
    return SystemModel(psf, angles, att, rotation_method=r["rotation"], threads=int(r["threads"]))


def _load_case(d) -> dict:
    d = Path(d)
    case = {"dir": d, "attenuation": read_volume(d / "attenuation"), "psf": read_psf(d / "psf"),
            "y": read_views(d / "y"), "rbar": read_views(d / "rbar")}
    with open(d / "case.json", encoding="utf-8") as f:
        case["meta"] = json.load(f)
    return case


def _case_problem(case: dict, r: dict) -> PoissonProblem:
    model = _model(case["attenuation"], case["psf"], case["y"].angles, r)
    return PoissonProblem(case["y"].data, case["rbar"].data, model)


# -- commands -----------------------------------------------------------------

def cmd_phantom(r: dict) -> None:
    spec = PhantomSpec.from_json(r["spec"])
    act, att, masks = make_phantom(spec, seed=int(r["seed"]))
    out = _outdir(r["out"])
    write_volume(act, out / "activity")
    write_volume(att, out / "attenuation")
    write_labels(masks.labels, masks.legend, out / "labels", spec.voxel_size)
    for w in masks.warnings:
        print(f"warning: {w}", file=sys.stderr)
    _write_run(out, "phantom", r, {"warnings": masks.warnings})


def cmd_simulate(r: dict) -> None:
    if r["total_counts"] is None:
        raise SystemExit("simulate: --total-counts is required")
    src = Path(r["phantom"])
    act, att = read_volume(src / "activity"), read_volume(src / "attenuation")
    nview = int(r["views"])
    k = int(r["kernel"])
    fwhm = linear_fwhm(act.shape[1], act.voxel_size[1], float(r["psf_near"]), float(r["psf_slope"]))
    psf = gaussian_psf(fwhm, (k, k), act.voxel_size[0], nview)
    model = _model(att, psf, uniform_angles(nview), r)
    sf, tc = float(r["scatter_fraction"]), float(r["total_counts"])
    y, rbar = simulate_measurements(act, model, sf, tc, int(r["seed"]))
    out = _outdir(r["out"])
    write_volume(act, out / "activity")
    write_volume(att, out / "attenuation")
    if (src / "labels.json").exists():
        labels, legend = read_labels(src / "labels")
        write_labels(labels, legend, out / "labels", act.voxel_size)
    write_psf(psf, out / "psf")
    write_views(y, out / "y")
    write_views(rbar, out / "rbar")
    meta = {"count_scale": count_scale(act, model, sf, tc), "scatter_fraction": sf,
            "total_counts": tc, "seed": int(r["seed"])}
    atomic_write_text(out / "case.json", json.dumps(meta, indent=1, sort_keys=True) + "\n")
    _write_run(out, "simulate", r)


def _geometry_for(shape_like: Volume, r: dict, nview: int, angles=None):
    if r.get("psf"):
        psf = read_psf(r["psf"])
    else:
        k = int(r["kernel"])
        fwhm = linear_fwhm(shape_like.shape[1], shape_like.voxel_size[1], float(r["psf_near"]),
                           float(r["psf_slope"]))
        psf = gaussian_psf(fwhm, (k, k), shape_like.voxel_size[0], nview)
    angles = uniform_angles(nview) if angles is None else angles
    att = read_volume(r["attenuation"]) if r.get("attenuation") else None
    return SystemModel(psf, angles, att, shape=shape_like.shape, voxel_size=shape_like.voxel_size,
                       rotation_method=r["rotation"], threads=int(r["threads"]))


def cmd_project(r: dict) -> None:
    x = read_volume(r["input"])
    model = _geometry_for(x, r, int(r["views"]))
    v = model.forward(x.data)
    d = _parent(r["out"])
    write_views(ProjectionViews(v, model.angles), r["out"])
    _write_run(d, "project", r)


def cmd_backproject(r: dict) -> None:
    v = read_views(r["input"])
    if r.get("attenuation"):
        like = read_volume(r["attenuation"])
    else:
        if not r.get("image_shape"):
            raise SystemExit("backproject: need --attenuation or --image-shape")
        shp = _shape(r["image_shape"])
        like = Volume(np.zeros(shp, dtype=np.float32))
    model = _geometry_for(like, r, v.nview, v.angles)
    x = model.back(v.data)
    d = _parent(r["out"])
    write_volume(Volume(x, model.voxel_size), r["out"])
    _write_run(d, "backproject", r)


def _load_nets(d, K: int):
    return [load_weights(Path(d) / f"net{k}") for k in range(K)]


def cmd_recon(r: dict) -> None:
    case = _load_case(r["case"])
    prob = _case_problem(case, r)
    x0 = np.ones(prob.model.shape)
    algo = r["algo"]
    if algo == "mlem":
        x = mlem(prob, x0, int(r["iters"]))
    elif algo == "osem":
        x = osem(prob, x0, int(r["iters"]), int(r["subsets"]))
    else:
        if not r.get("nets"):
            raise SystemExit("recon: --nets is required for cnn-em")
        cfg = TrainConfig(K=int(r["outer"]), n_inner=int(r["inner"]), beta=float(r["beta"]),
                          osem_iters=int(r["iters"]), osem_subsets=int(r["subsets"]))
        start = osem(prob, x0, cfg.osem_iters, cfg.osem_subsets)
        x, _ = unrolled_forward(prob, start, _load_nets(r["nets"], cfg.K), cfg)
    d = _parent(r["out"])
    write_volume(Volume(np.asarray(x, dtype=np.float32), case["attenuation"].voxel_size), r["out"])
    _write_run(d, "recon", r)


def cmd_train(r: dict) -> None:
    cfg = TrainConfig(K=int(r["outer"]), n_inner=int(r["inner"]), beta=float(r["beta"]),
                      epochs=int(r["epochs"]), lr=float(r["lr"]), weight_decay=float(r["weight_decay"]),
                      method=r["method"], seed=int(r["seed"]), osem_iters=int(r["iters"]),
                      osem_subsets=int(r["subsets"]), checkpoint_every=int(r["checkpoint_every"]),
                      checkpoint_dir=str(Path(r["out"]) / "checkpoints"))

    def samples(dirs):
        out = []
        for d in dirs:
            case = _load_case(d)
            prob = _case_problem(case, r)
            target = read_volume(Path(d) / "activity").data * case["meta"]["count_scale"]
            out.append(make_sample(prob, target, cfg))
        return out

    train_set = samples(r["train"])
    valid_set = samples(r["valid"] or [])
    nets, curves = train(train_set, valid_set, cfg)
    out = _outdir(r["out"])
    for k, w in enumerate(nets):
        save_weights(w, out / f"net{k}")
    write_curves(curves, out / "curves.csv")
    _write_run(out, "train", r, {"train_config": cfg.to_dict()})


def cmd_eval(r: dict) -> None:
    x = read_volume(r["recon"])
    truth = read_volume(r["truth"])
    labels, legend = read_labels(r["labels"])
    lines = ["label,mae_percent,nrmse_percent"]
    for name, val in legend.items():
        m = labels == val
        if not m.any():
            continue
        lines.append(f"{name},{mae(x, truth, m)!r},{nrmse(x, truth, m)!r}")
    text = "\n".join(lines) + "\n"
    if r.get("out"):
        atomic_write_text(r["out"], text)
    sys.stdout.write(text)


def cmd_adjoint_check(r: dict) -> None:
    shape = _shape(r["shape"])
    rng = np.random.default_rng(int(r["seed"]))
    worst = 0.0
    for t in range(int(r["trials"])):
        model = random_system(rng, shape, int(r["views"]), rotation_method=r["rotation"])
        diff, norm = adjoint_discrepancy(model)
        worst = max(worst, diff / norm)
    tol = float(r["tolerance"])
    status = "PASS" if worst <= tol else "FAIL"
    print(f"adjoint-check trials={r['trials']} shape={shape} views={r['views']} "
          f"max ||A'-A^T||_F/||A||_F = {worst:.3e} (tolerance {tol:g}) {status}")
    if status == "FAIL":
        raise Failure("adjoint discrepancy above tolerance")


def cmd_bench(r: dict) -> None:
    shape = _shape(r["shape"])
    threads = [int(t) for t in str(r["threads"]).split(",")]
    names = ["compiled", "python"] if r["backend"] == "both" else [r["backend"]]
    rng = np.random.default_rng(int(r["seed"]))
    x = rng.random(shape).astype(np.float32)
    nview = int(r["views"])
    mu = Volume(rng.uniform(0, 0.02, shape).astype(np.float32))
    fwhm = linear_fwhm(shape[1], 4.8, float(r["psf_near"]), float(r["psf_slope"]))
    psf = gaussian_psf(fwhm, (int(r["kernel"]),) * 2, 4.8, nview)
    rows = []
    for name in names:
        if name == "compiled" and not backend.HAVE_COMPILED:
            print("compiled backend not built; skipping", file=sys.stderr)
            continue
        for t in threads:
            model = SystemModel(psf, uniform_angles(nview), mu, rotation_method=r["rotation"],
                                threads=t, kernels=backend.get(name))
            out = np.empty(model.views_shape, dtype=np.float32)
            back = np.empty(model.shape, dtype=np.float32)
            model.forward(x, out=out)
            fw, bw = [], []
            for _ in range(int(r["repeat"])):
                t0 = time.perf_counter()
                model.forward(x, out=out)
                t1 = time.perf_counter()
                model.back(out, out=back)
                fw.append(t1 - t0)
                bw.append(time.perf_counter() - t1)
            digest = hashlib.sha256(out.tobytes() + back.tobytes()).hexdigest()[:16]
            row = {"backend": name, "threads": t, "forward_s": min(fw), "back_s": min(bw),
                   "workspace_bytes": model.workspace_nbytes(t), "checksum": digest}
            rows.append(row)
            print(f"{name:8s} threads={t:<3d} forward {row['forward_s']:.4f}s  back {row['back_s']:.4f}s  "
                  f"workspace {row['workspace_bytes']} B  checksum {digest}")
    if r.get("out"):
        atomic_write_text(r["out"], json.dumps(rows, indent=1) + "\n")


# -- parser -------------------------------------------------------------------

def _geometry_flags(p) -> None:
    p.add_argument("--views", type=int)
    p.add_argument("--kernel", type=int, help="odd PSF kernel side")
    p.add_argument("--psf-near", type=float, help="FWHM (mm) at the detector face")
    p.add_argument("--psf-slope", type=float, help="FWHM growth per mm of depth")
    p.add_argument("--rotation", choices=["bilinear", "three_pass_1d"])
    p.add_argument("--threads", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spectproj", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON file of default values")
        p.add_argument("--seed", type=int)
        p.set_defaults(func=func)
        return p

    p = add("phantom", cmd_phantom, "rasterize an ellipsoid phantom spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = add("simulate", cmd_simulate, "simulate noisy views into a case directory")
    p.add_argument("--phantom", required=True, help="directory written by `phantom`")
    p.add_argument("--out", required=True)
    p.add_argument("--total-counts", type=float)
    p.add_argument("--scatter-fraction", type=float)
    _geometry_flags(p)

    for name, func, what in (("project", cmd_project, "forward-project a volume"),
                             ("backproject", cmd_backproject, "back-project views")):
        p = add(name, func, what)
        p.add_argument("--in", dest="input", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--attenuation")
        p.add_argument("--psf", help="PSF stack file (overrides --kernel/--psf-*)")
        if name == "backproject":
            p.add_argument("--image-shape")
        _geometry_flags(p)

    p = add("recon", cmd_recon, "reconstruct a case")
    p.add_argument("--case", required=True)
    p.add_argument("--algo", choices=["mlem", "osem", "cnn-em"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int)
    p.add_argument("--subsets", type=int)
    p.add_argument("--nets", help="directory of trained networks (cnn-em)")
    p.add_argument("--beta", type=float)
    p.add_argument("--outer", type=int)
    p.add_argument("--inner", type=int)
    p.add_argument("--rotation", choices=["bilinear", "three_pass_1d"])
    p.add_argument("--threads", type=int)

    p = add("train", cmd_train, "train the unrolled CNN-regularized EM network")
    p.add_argument("--method", choices=["seq", "trunc", "e2e"], required=True)
    p.add_argument("--train", nargs="+", required=True, help="case directories")
    p.add_argument("--valid", nargs="*")
    p.add_argument("--out", required=True)
    for flag, typ in (("--iters", int), ("--subsets", int), ("--beta", float), ("--outer", int),
                      ("--inner", int), ("--epochs", int), ("--lr", float), ("--weight-decay", float),
                      ("--checkpoint-every", int), ("--threads", int)):
        p.add_argument(flag, type=typ)
    p.add_argument("--rotation", choices=["bilinear", "three_pass_1d"])

    p = add("eval", cmd_eval, "MAE/NRMSE per labeled VOI as CSV")
    p.add_argument("--recon", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out")

    p = add("adjoint-check", cmd_adjoint_check, "materialize A and A' on random systems")
    p.add_argument("--trials", type=int)
    p.add_argument("--shape")
    p.add_argument("--views", type=int)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--rotation", choices=["bilinear", "three_pass_1d"])

    p = add("bench", cmd_bench, "time projections per backend and thread count")
    p.add_argument("--threads", help="comma-separated thread counts")
    p.add_argument("--shape")
    p.add_argument("--views", type=int)
    p.add_argument("--repeat", type=int)
    p.add_argument("--backend", choices=["both", "compiled", "python"])
    p.add_argument("--kernel", type=int)
    p.add_argument("--psf-near", type=float)
    p.add_argument("--psf-slope", type=float)
    p.add_argument("--rotation", choices=["bilinear", "three_pass_1d"])
    p.add_argument("--out")
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        resolved = _resolve(args)
        args.func(resolved)
    except argparse.ArgumentTypeError as e:
        parser.error(str(e))
    except Failure as e:
        print(f"FAIL: {e}", file=sys.stderr)
        return 1
    except (SpectError, OSError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:
        if isinstance(e.code, str):
            parser.error(e.code)
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
