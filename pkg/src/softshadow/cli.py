"""Command-line entry point: ``softshadow <command> [options]``.

Every invocation writes one JSON run manifest next to its outputs. Exit codes:
0 success, 2 invalid input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from importlib import resources

import numpy as np

from .geometry import PointCloud, SceneConfig, build_cfov_frustum, make_voxel_grid, voxelize_points
from .inversion import (DivergenceError, SingularSystemError, SolverOptions, alternating_minimize, read_occupancy,
                        write_loss_trace, write_occupancy)
from .metrics import CHAMFER_CONVENTION, EvalReport, mse, voxel_iou
from .transport import (PenumbraImage, add_noise, build_transport, build_visibility, build_visibility_dense,
                        constant_background, occlusion_mask, render_linearized, render_masked)

log = logging.getLogger("softshadow")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class InputError(Exception):
    """Bad or missing input; reported with exit code 2."""


def load_defaults() -> dict:
    with resources.files("softshadow").joinpath("defaults.json").open(encoding="utf-8") as fh:
        return json.load(fh)


DEFAULTS = load_defaults()


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hashes(paths):
    out = {}
    for p in paths:
        if p and os.path.isfile(p):
            out[p] = _sha256(p)
        elif p and os.path.isdir(p):
            for root, _, files in os.walk(p):
                for name in sorted(files):
                    full = os.path.join(root, name)
                    if not name.endswith("run-manifest.json"):
                        out[full] = _sha256(full)
    return dict(sorted(out.items()))


def write_manifest(path, command, args, inputs, outputs, seeds, started):
    config = {k: v for k, v in vars(args).items() if k not in ("func",)}
    manifest = {
        "command": command,
        "config": config,
        "defaults": DEFAULTS,
        "seeds": seeds,
        "inputs": _hashes(inputs),
        "outputs": _hashes(outputs),
        "duration_s": time.perf_counter() - started,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True, default=str)
    return manifest


def _need_file(path, what):
    if path is None or not os.path.isfile(path):
        raise InputError(f"{what} not found: {path}")
    return path


def _load_scene(path) -> SceneConfig:
    _need_file(path, "scene config")
    try:
        return SceneConfig.load(path)
    except (ValueError, TypeError) as exc:
        raise InputError(f"invalid scene config {path}: {exc}") from None


def _load_image(path, width, height, what) -> PenumbraImage:
    _need_file(path, what)
    try:
        img = PenumbraImage.load(path)
    except ValueError as exc:
        raise InputError(f"invalid {what} {path}: {exc}") from None
    if (img.width, img.height) != (width, height):
        raise InputError(f"{what} {path} is {img.width}x{img.height}, scene expects {width}x{height}")
    return img


def _grid(cfg):
    return make_voxel_grid(build_cfov_frustum(cfg), cfg.voxel_nx, cfg.voxel_ny, cfg.voxel_nz)


def _counts(cfg):
    return cfg.voxel_nx, cfg.voxel_ny, cfg.voxel_nz


def _parse_grid(text):
    try:
        nx, ny, nz = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise InputError(f"bad grid {text!r}; expected NXxNYxNZ") from None
    if min(nx, ny, nz) < 1:
        raise InputError(f"bad grid {text!r}; counts must be >= 1")
    return nx, ny, nz


def _parse_levels(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"bad level list {text!r}") from None


def _manifest_for(out_file):
    return out_file + ".manifest.json"


def _dir_manifest(out_dir):
    return os.path.join(out_dir, "run-manifest.json")


# ---------------------------------------------------------------- render

def cmd_render(args):
    started = time.perf_counter()
    cfg = _load_scene(args.scene)
    grid = _grid(cfg)
    emitter = _load_image(args.emitter, cfg.emitter_res_x, cfg.emitter_res_z, "emitter image")
    f = emitter.vector()
    if np.any(f < 0):
        raise InputError("emitter image has negative values")
    if args.occupancy and args.cloud:
        raise InputError("give either --occupancy or --cloud, not both")
    if args.occupancy:
        _need_file(args.occupancy, "occupancy file")
        try:
            alpha = read_occupancy(args.occupancy, _counts(cfg)).astype(bool)
        except ValueError as exc:
            raise InputError(f"invalid occupancy {args.occupancy}: {exc}") from None
    elif args.cloud:
        _need_file(args.cloud, "point cloud")
        try:
            alpha = voxelize_points(PointCloud.load_xyz(args.cloud).points, grid)
        except ValueError as exc:
            raise InputError(f"invalid point cloud {args.cloud}: {exc}") from None
    else:
        alpha = np.zeros(grid.K, dtype=bool)

    A = build_transport(cfg).entries
    if args.model == "exact":
        blocked = occlusion_mask(cfg, grid.lo[alpha], grid.hi[alpha]) if alpha.any() else np.zeros((cfg.M, cfg.N), bool)
        y = render_masked(A, ~blocked, f)
    else:
        y = render_linearized(A, build_visibility(cfg, grid), alpha.astype(float), f)
    if args.sbr_db is not None:
        y = y + constant_background(y, args.sbr_db)
    if args.snr_db is not None:
        y = add_noise(y, args.snr_db, args.seed)
    PenumbraImage.from_vector(y, cfg.wall_res_x, cfg.wall_res_z).save(args.out)
    write_manifest(_manifest_for(args.out), "render", args, [args.scene, args.emitter, args.occupancy, args.cloud],
                   [args.out], {"seed": args.seed}, started)
    print(f"wrote {args.out} ({cfg.wall_res_x}x{cfg.wall_res_z}, {int(alpha.sum())} active voxels)")


# ---------------------------------------------------------------- invert-grad

def cmd_invert_grad(args):
    started = time.perf_counter()
    cfg = _load_scene(args.scene)
    img = _load_image(args.measurement, cfg.wall_res_x, cfg.wall_res_z, "measurement")
    if img.channels != 1:
        raise InputError("invert-grad expects a single-channel measurement")
    y = img.vector()
    grid = _grid(cfg)
    A = build_transport(cfg).entries
    vis = build_visibility(cfg, grid)
    opts = SolverOptions(num_iter=args.iters, eta_z=args.eta_z, eta_b=args.eta_b, eta_lambda=args.eta_lambda,
                         lambda0=args.lambda0, background="neglect" if args.no_background else "estimate",
                         threshold=args.threshold, seed=args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    trace_path = os.path.join(args.out_dir, "loss_trace.csv")
    try:
        res = alternating_minimize(A, vis, y, opts)
    except DivergenceError as exc:
        write_loss_trace(trace_path, exc.trace)
        raise
    occ_path = os.path.join(args.out_dir, "occupancy.txt")
    em_path = os.path.join(args.out_dir, "emitter.nlsi")
    write_loss_trace(trace_path, res.trace)
    write_occupancy(occ_path, res.alpha, _counts(cfg))
    PenumbraImage.from_vector(res.f, cfg.emitter_res_x, cfg.emitter_res_z).save(em_path)
    write_manifest(_dir_manifest(args.out_dir), "invert-grad", args, [args.scene, args.measurement],
                   [occ_path, em_path, trace_path], {"seed": args.seed}, started)
    print(f"{int(res.alpha.sum())} active voxels, final loss {res.trace[-1][1]:.6g}, lambda {res.lam:.6g}")


# ---------------------------------------------------------------- ssd

def _ssd_scene(args):
    if getattr(args, "scene", None):
        return _load_scene(args.scene)
    return SceneConfig(**DEFAULTS["ssd"]["scene"])


def cmd_ssd_dataset_gen(args):
    from .diffusion.dataset import DatasetSpec, generate_dataset

    started = time.perf_counter()
    cfg = _ssd_scene(args)
    if args.n < 1:
        raise InputError("--n must be >= 1")
    if not 0 <= args.test_fraction < 1:
        raise InputError("--test-fraction must lie in [0, 1)")
    spec = DatasetSpec(n_points=args.points, n_dense=args.dense_points)
    n_test = int(round(args.n * args.test_fraction))
    if args.test_fraction > 0:
        n_test = max(n_test, 1)
    n_train = args.n - n_test
    outputs = []
    if n_train:
        d = os.path.join(args.out_dir, "train")
        generate_dataset(n_train, cfg, args.seed, spec, out_dir=d)
        outputs.append(d)
    if n_test:
        d = os.path.join(args.out_dir, "test")
        generate_dataset(n_test, cfg, args.seed, spec, out_dir=d, start=n_train)
        outputs.append(d)
    write_manifest(_dir_manifest(args.out_dir), "ssd dataset-gen", args, [args.scene], outputs,
                   {"seed": args.seed}, started)
    print(f"wrote {n_train} training and {n_test} held-out instances to {args.out_dir}")


def _load_data(path):
    from .diffusion.dataset import load_dataset

    if not os.path.isfile(os.path.join(path, "manifest.csv")):
        raise InputError(f"no dataset manifest in {path}")
    try:
        return load_dataset(path)
    except (ValueError, KeyError) as exc:
        raise InputError(f"invalid dataset {path}: {exc}") from None


def cmd_ssd_train(args):
    import torch

    from .diffusion.networks import NetworkConfig, SSDModel
    from .diffusion.training import Trainer, TrainingConfig

    started = time.perf_counter()
    cfg, _, items = _load_data(args.data)
    if cfg.wall_res_x != cfg.wall_res_z:
        raise InputError("the shadow encoder needs square measurements")
    torch.manual_seed(args.seed)
    model = SSDModel(NetworkConfig(image_size=cfg.wall_res_x))
    tc = TrainingConfig(T=args.T, lr=args.lr, batch_size=args.batch_size, iterations=args.iters,
                        points_per_step=args.points_per_step, seed=args.seed)
    trainer = Trainer(model, tc)
    U = np.stack([it.cloud.points for it in items])
    Y = np.stack([it.measurement for it in items])
    trainer.fit(U, Y)
    trainer.save(args.out)
    curve = args.out + ".loss.csv"
    with open(curve, "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for i, loss in enumerate(trainer.losses, 1):
            fh.write(f"{i},{loss!r}\n")
    write_manifest(_manifest_for(args.out), "ssd train", args, [args.data], [args.out, curve],
                   {"seed": args.seed}, started)
    print(f"trained {args.iters} steps on {len(items)} instances; final loss {np.mean(trainer.losses[-100:]):.4f}")


def _load_model(path, weights):
    from .diffusion.training import load_checkpoint

    _need_file(path, "checkpoint")
    try:
        model, ema, tc, _ = load_checkpoint(path)
    except (ValueError, KeyError, RuntimeError) as exc:
        raise InputError(f"checkpoint rejected: {exc}") from None
    return (ema if weights == "ema" else model), tc


def cmd_ssd_sample(args):
    from .diffusion.sampling import reverse_sample
    from .diffusion.schedule import cosine_schedule

    started = time.perf_counter()
    model, tc = _load_model(args.checkpoint, args.weights)
    size = model.config.image_size
    img = _load_image(args.measurement, size, size, "measurement")
    cloud = reverse_sample(img.vector(), model, cosine_schedule(tc.T), args.points, seed=args.seed)
    cloud.save_xyz(args.out)
    write_manifest(_manifest_for(args.out), "ssd sample", args, [args.checkpoint, args.measurement], [args.out],
                   {"seed": args.seed}, started)
    print(f"wrote {len(cloud)} points to {args.out}")


def cmd_ssd_pipeline(args):
    from .diffusion.dataset import DatasetSpec
    from .diffusion.schedule import cosine_schedule
    from .metrics import chamfer
    from .pipeline import reconstruct

    started = time.perf_counter()
    model, tc = _load_model(args.checkpoint, args.weights)
    if args.data:
        cfg, spec, _ = _load_data(args.data)
    else:
        cfg, spec = _ssd_scene(args), DatasetSpec()
    img = _load_image(args.measurement, cfg.wall_res_x, cfg.wall_res_z, "measurement")
    if model.config.image_size != cfg.wall_res_x:
        raise InputError("checkpoint image size does not match the scene")
    res = reconstruct(img.vector(), cfg, model, cosine_schedule(tc.T), spec, args.points, seed=args.seed,
                      lam_tv=args.lambda_tv)
    os.makedirs(args.out_dir, exist_ok=True)
    paths = {k: os.path.join(args.out_dir, v) for k, v in
             (("cloud", "cloud.xyz"), ("translation", "translation.txt"), ("occupancy", "occupancy.txt"),
              ("emitter", "emitter.nlsi"), ("report", "report.txt"))}
    res.cloud.save_xyz(paths["cloud"])
    np.savetxt(paths["translation"], res.translation[None, :], fmt="%.17g")
    write_occupancy(paths["occupancy"], res.occupancy, _counts(cfg))
    PenumbraImage.from_vector(res.emitter, cfg.emitter_res_x, cfg.emitter_res_z).save(paths["emitter"])
    report = EvalReport(metadata={"scene": cfg.digest(), "seed": args.seed,
                                  "chamfer": CHAMFER_CONVENTION})
    if args.truth_cloud:
        _need_file(args.truth_cloud, "truth cloud")
        report.chamfer_3d = chamfer(res.cloud, PointCloud.load_xyz(args.truth_cloud))
    if args.truth_emitter:
        truth = _load_image(args.truth_emitter, cfg.emitter_res_x, cfg.emitter_res_z, "truth emitter")
        report.mse_2d = mse(res.emitter, truth.vector())
    if args.truth_occupancy:
        _need_file(args.truth_occupancy, "truth occupancy")
        report.voxel_iou = voxel_iou(res.occupancy, read_occupancy(args.truth_occupancy, _counts(cfg)))
    with open(paths["report"], "w", encoding="utf-8") as fh:
        fh.write(report.to_line() + "\n")
    write_manifest(_dir_manifest(args.out_dir), "ssd pipeline", args,
                   [args.checkpoint, args.measurement, args.truth_cloud, args.truth_emitter], list(paths.values()),
                   {"seed": args.seed}, started)
    print(report.to_line())


# ---------------------------------------------------------------- bench

def dense_visibility_bytes(cfg: SceneConfig, grid_counts, itemsize: int = 4) -> int:
    """Bytes for all ``K`` dense ``M x N`` visibility masks."""
    nx, ny, nz = grid_counts
    return cfg.M * cfg.N * nx * ny * nz * itemsize


def cmd_bench(args):
    started = time.perf_counter()
    cfg = _load_scene(args.scene)
    grids = [_parse_grid(g) for g in args.grids.split(",") if g.strip()]
    if not grids:
        raise InputError("no grids given")
    if args.repeat < 1:
        raise InputError("--repeat must be >= 1")
    cap = int(args.memory_cap_gb * 2**30)
    rows = []
    for counts in grids:
        gcfg = cfg.replace(voxel_nx=counts[0], voxel_ny=counts[1], voxel_nz=counts[2])
        grid = _grid(gcfg)
        projected = dense_visibility_bytes(gcfg, counts)
        row = {"grid": "x".join(map(str, counts)), "M": gcfg.M, "N": gcfg.N, "K": gcfg.K,
               "dense_projected_bytes": projected, "sparse_seconds": "", "sparse_bytes": "",
               "dense_seconds": "", "dense_bytes": "", "dense_status": "skipped"}
        if not args.projected_only:
            times = []
            for _ in range(args.repeat):
                t0 = time.perf_counter()
                vis = build_visibility(gcfg, grid)
                times.append(time.perf_counter() - t0)
            row["sparse_seconds"] = min(times)
            row["sparse_bytes"] = vis.nbytes
            del vis
            if projected <= cap:
                times = []
                for _ in range(args.repeat):
                    t0 = time.perf_counter()
                    dense = build_visibility_dense(gcfg, grid, np.float32)
                    times.append(time.perf_counter() - t0)
                row["dense_seconds"] = min(times)
                row["dense_bytes"] = dense.nbytes
                row["dense_status"] = "built"
                del dense
            else:
                row["dense_status"] = "over-cap"
        rows.append(row)
    fields = list(rows[0])
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.DictWriter(out, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    finally:
        if args.out:
            out.close()
    if args.out:
        write_manifest(_manifest_for(args.out), "bench", args, [args.scene], [args.out], {}, started)
        for r in rows:
            print(f"{r['grid']}: projected dense {r['dense_projected_bytes']} bytes "
                  f"({r['dense_projected_bytes'] / 2**30:.1f} GiB), sparse {r['sparse_bytes'] or '-'} bytes")


# ---------------------------------------------------------------- sweep

def _nanmean(values):
    v = np.asarray(values, dtype=float)
    v = v[~np.isnan(v)]
    return float(v.mean()) if v.size else float("nan")


def cmd_sweep(args):
    from .diffusion.schedule import cosine_schedule
    from .pipeline import corrupt, sbr_sweep

    started = time.perf_counter()
    levels = _parse_levels(args.levels)
    if not levels:
        raise InputError("no sweep levels")
    reports = []
    os.makedirs(args.out_dir, exist_ok=True)
    if args.method == "ssd":
        if args.kind != "sbr":
            raise InputError("the ssd sweep varies background (--kind sbr)")
        model, tc = _load_model(args.checkpoint, "ema")
        cfg, spec, items = _load_data(args.data)
        items = items[: args.max_instances] if args.max_instances else items
        from .diffusion.dataset import place, scene_grid

        grid = scene_grid(cfg)
        for it in items:
            it.occupancy = voxelize_points(place(it.cloud, cfg, spec, it.translation), grid)
        for s in range(args.seeds):
            reports += sbr_sweep(items, cfg, model, cosine_schedule(tc.T), spec, levels, seed=args.seed + s,
                                 lam_tv=args.lambda_tv)
    else:
        cfg = _load_scene(args.scene)
        grid = _grid(cfg)
        f = _load_image(args.emitter, cfg.emitter_res_x, cfg.emitter_res_z, "emitter image").vector()
        _need_file(args.occupancy, "occupancy file")
        alpha = read_occupancy(args.occupancy, _counts(cfg))
        A = build_transport(cfg).entries
        vis = build_visibility(cfg, grid)
        y_clean = render_masked(A, ~vis.union_mask(alpha), f)
        for s in range(args.seeds):
            for level in levels:
                kw = {"sbr_db": level} if args.kind == "sbr" else {"snr_db": level}
                y = corrupt(y_clean, seed=args.seed + s, **kw)
                res = alternating_minimize(A, vis, y, SolverOptions(num_iter=args.iters, seed=args.seed + s))
                rep = EvalReport(mse_2d=mse(res.f, f), voxel_iou=voxel_iou(res.alpha, alpha),
                                 metadata={"mode": "grad", "seed": args.seed + s, "scene": cfg.digest()})
                setattr(rep, f"{args.kind}_db", float(level))
                reports.append(rep)
    rep_path = os.path.join(args.out_dir, "reports.txt")
    with open(rep_path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(r.to_line() + "\n")
    csv_path = os.path.join(args.out_dir, "summary.csv")
    key = f"{args.kind}_db"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([key, "mode", "n", "mse_2d", "chamfer_3d", "voxel_iou"])
        modes = sorted({r.metadata.get("mode", "") for r in reports})
        for level in levels:
            for mode in modes:
                sel = [r for r in reports if getattr(r, key) == level and r.metadata.get("mode", "") == mode]
                if sel:
                    w.writerow([level, mode, len(sel)] + [_nanmean([getattr(r, m) for r in sel])
                                                          for m in ("mse_2d", "chamfer_3d", "voxel_iou")])
    write_manifest(_dir_manifest(args.out_dir), "sweep", args, [args.checkpoint, args.data, args.scene],
                   [rep_path, csv_path], {"seed": args.seed, "seeds": args.seeds}, started)
    with open(csv_path, encoding="utf-8") as fh:
        print(fh.read(), end="")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    d = DEFAULTS
    p = argparse.ArgumentParser(prog="softshadow", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap worker threads (1 = bit-reproducible)")
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("render", help="render a penumbra image")
    r.add_argument("--scene", required=True)
    r.add_argument("--occupancy")
    r.add_argument("--cloud", help="scene-frame .xyz point cloud, voxelised onto the scene grid")
    r.add_argument("--emitter", required=True)
    r.add_argument("--model", choices=("exact", "linearized"), default=d["render"]["model"])
    r.add_argument("--snr-db", type=float)
    r.add_argument("--sbr-db", type=float)
    r.add_argument("--seed", type=int, default=d["render"]["seed"])
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    di = d["invert_grad"]
    g = sub.add_parser("invert-grad", help="alternating minimisation over occupancy, emitter and background")
    g.add_argument("measurement")
    g.add_argument("--scene", required=True)
    g.add_argument("--iters", type=int, default=di["iters"])
    g.add_argument("--eta-z", type=float, default=di["eta_z"])
    g.add_argument("--eta-b", type=float, default=di["eta_b"])
    g.add_argument("--eta-lambda", type=float, default=di["eta_lambda"])
    g.add_argument("--lambda0", type=float, default=di["lambda0"])
    g.add_argument("--threshold", type=float, default=di["threshold"])
    g.add_argument("--no-background", action="store_true")
    g.add_argument("--seed", type=int, default=di["seed"])
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_invert_grad)

    ds = d["ssd"]
    s = sub.add_parser("ssd", help="shadow-conditioned diffusion")
    ssub = s.add_subparsers(dest="ssd_command", required=True)
    a = ssub.add_parser("dataset-gen")
    a.add_argument("--scene")
    a.add_argument("--n", type=int, default=ds["n_instances"])
    a.add_argument("--test-fraction", type=float, default=ds["test_fraction"])
    a.add_argument("--points", type=int, default=ds["n_points"])
    a.add_argument("--dense-points", type=int, default=ds["n_dense"])
    a.add_argument("--seed", type=int, default=ds["seed"])
    a.add_argument("--out-dir", required=True)
    a.set_defaults(func=cmd_ssd_dataset_gen)

    t = ssub.add_parser("train")
    t.add_argument("--data", required=True, help="dataset directory (with manifest.csv)")
    t.add_argument("--T", type=int, default=ds["T"])
    t.add_argument("--iters", type=int, default=ds["iterations"])
    t.add_argument("--lr", type=float, default=ds["lr"])
    t.add_argument("--batch-size", type=int, default=ds["batch_size"])
    t.add_argument("--points-per-step", type=int, default=ds["points_per_step"])
    t.add_argument("--seed", type=int, default=ds["seed"])
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_ssd_train)

    sm = ssub.add_parser("sample")
    sm.add_argument("--checkpoint", required=True)
    sm.add_argument("--measurement", required=True)
    sm.add_argument("--points", type=int, default=ds["sample_points"])
    sm.add_argument("--weights", choices=("ema", "raw"), default="ema")
    sm.add_argument("--seed", type=int, default=ds["seed"])
    sm.add_argument("--out", required=True)
    sm.set_defaults(func=cmd_ssd_sample)

    pl = ssub.add_parser("pipeline")
    pl.add_argument("--checkpoint", required=True)
    pl.add_argument("--measurement", required=True)
    pl.add_argument("--data", help="dataset directory supplying scene and placement settings")
    pl.add_argument("--scene")
    pl.add_argument("--points", type=int, default=ds["n_points"])
    pl.add_argument("--lambda-tv", type=float, default=ds["lambda_tv"])
    pl.add_argument("--weights", choices=("ema", "raw"), default="ema")
    pl.add_argument("--truth-cloud")
    pl.add_argument("--truth-emitter")
    pl.add_argument("--truth-occupancy")
    pl.add_argument("--seed", type=int, default=ds["seed"])
    pl.add_argument("--out-dir", required=True)
    pl.set_defaults(func=cmd_ssd_pipeline)

    db = d["bench"]
    b = sub.add_parser("bench", help="sparse vs dense visibility memory and time")
    b.add_argument("--scene", required=True)
    b.add_argument("--grids", default=db["grids"])
    b.add_argument("--repeat", type=int, default=db["repeat"])
    b.add_argument("--memory-cap-gb", type=float, default=db["memory_cap_gb"])
    b.add_argument("--projected-only", action="store_true", help="report projected sizes without assembling")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    dw = d["sweep"]
    w = sub.add_parser("sweep", help="robustness sweep over SBR or SNR")
    w.add_argument("--method", choices=("ssd", "grad"), default="ssd")
    w.add_argument("--kind", choices=("sbr", "snr"), default=dw["kind"])
    w.add_argument("--levels", default=dw["levels"])
    w.add_argument("--seeds", type=int, default=dw["seeds"])
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--checkpoint")
    w.add_argument("--data", help="held-out dataset directory (ssd method)")
    w.add_argument("--max-instances", type=int)
    w.add_argument("--lambda-tv", type=float, default=ds["lambda_tv"])
    w.add_argument("--scene")
    w.add_argument("--occupancy")
    w.add_argument("--emitter")
    w.add_argument("--iters", type=int, default=di["iters"])
    w.add_argument("--out-dir", required=True)
    w.set_defaults(func=cmd_sweep)
    return p


def _limit_threads(n):
    if n is None:
        return None
    if n < 1:
        raise InputError("--threads must be >= 1")
    import torch
    from threadpoolctl import threadpool_limits

    torch.set_num_threads(n)
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        limiter = _limit_threads(args.threads)
        try:
            args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DivergenceError, SingularSystemError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
