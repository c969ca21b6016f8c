"""Command-line entry point ``kspace-bo``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bayesopt import maximin_design
from .core import psnr
from .density import DensityGrid, GeneratorBox, box_to_dict, save_basis
from .errors import (
    ConvergenceError,
    DegenerateFamilyError,
    FactorizationError,
    InvalidInputError,
    InvalidParameterError,
)
from .io import read_image, read_raster, read_trajectory, write_image, write_trajectory
from .pipeline import (
    RunConfig,
    baseline_radial_density,
    build_context,
    compare_kernels,
    detrended_amplitude,
    get_basis,
    run_optimize,
    scan_landscape,
    scheme_from_density,
)
from .recon import reconstruction_errors

CONFIG_ERRORS = (InvalidParameterError, InvalidInputError, FileNotFoundError, json.JSONDecodeError)
NUMERICAL_ERRORS = (ConvergenceError, FactorizationError, DegenerateFamilyError, FloatingPointError, np.linalg.LinAlgError)


def _load_config(args) -> RunConfig:
    d = {}
    if args.config:
        d = json.loads(Path(args.config).read_text())
        if not isinstance(d, dict):
            raise InvalidParameterError("config file must hold a JSON object")
    try:
        cfg = RunConfig.from_dict(d)
    except TypeError as exc:
        raise InvalidParameterError(f"bad config: {exc}") from exc
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def _baseline(cfg: RunConfig) -> DensityGrid:
    return baseline_radial_density(cfg.baseline_sigmas[0], cfg.baseline_gammas[0], cfg.baseline_level, cfg.grid, cfg.undersampling)


def _density_arg(path, cfg: RunConfig) -> DensityGrid:
    return _baseline(cfg) if path is None else DensityGrid.from_raster(read_raster(path).real)


def cmd_pca_build(args, cfg, out):
    basis, domain = get_basis(cfg)
    spec = {"n_generators": cfg.n_generators, "seed": cfg.basis_seed, "box": box_to_dict(GeneratorBox(undersampling=cfg.undersampling))}
    save_basis(out / "basis", basis, domain, spec)
    print(f"basis L={basis.L} resolution={basis.resolution} tail={basis.tail_energy_fraction():.4%} -> {out / 'basis'}")


def cmd_design_init(args, cfg, out):
    _, domain = get_basis(cfg)
    design = maximin_design(domain, cfg.n_init, cfg.seed)
    _write_json(out / "design.json", {"seed": cfg.seed, "points": design.tolist()})
    print(f"{len(design)} design points -> {out / 'design.json'}")


def cmd_sample(args, cfg, out):
    ctx = build_context(cfg, with_basis=False)
    rho = _density_arg(args.density, cfg)
    scheme = scheme_from_density(rho, ctx, seed=cfg.seed)
    stem = write_trajectory(out / "trajectory", scheme)
    print(f"trajectory {scheme.n_shots}x{scheme.p} -> {stem}")


def cmd_reconstruct(args, cfg, out):
    scheme = read_trajectory(args.trajectory)
    image = read_image(args.image)
    err, rec = reconstruction_errors(scheme, [image], cfg.tv(), cfg.noise(), return_recons=True)
    stem = write_image(out / "reconstruction", rec[0])
    value = psnr(image.values, rec[0])
    _write_json(out / "reconstruction_metrics.json", {"cost": float(err[0]), "psnr": value})
    print(f"psnr {value:.3f} dB, cost {err[0]:.6g} -> {stem}")


def cmd_optimize(args, cfg, out):
    report = run_optimize(cfg, out, tune=not args.no_tune)
    print(
        f"best cost {report.best_cost:.6g}; held-out PSNR {report.heldout_psnr_mean:.3f} dB "
        f"(baseline {report.baseline_heldout_psnr_mean:.3f} dB) -> {out / 'report.json'}"
    )


def cmd_scan(args, cfg, out):
    ctx = build_context(cfg, with_basis=args.mode == "density_plane")
    k = args.k if args.k is not None else cfg.k_train
    images = ctx.train[:k]
    half = args.extent * ctx.cfg.shannon if args.mode == "shift" else args.extent
    xs = np.linspace(-half, half, args.points)
    if args.mode == "shift":
        scheme = read_trajectory(args.trajectory) if args.trajectory else scheme_from_density(_baseline(cfg), ctx, seed=cfg.seed)
        res = scan_landscape("shift", ctx, xs, xs, images, scheme=scheme)
    else:
        res = scan_landscape("density_plane", ctx, xs, xs, images, axes=tuple(args.axes))
    amp = detrended_amplitude(res["cost"], res["x"], res["y"])
    _write_json(out / f"scan_{args.mode}.json", {**res, "cost": res["cost"].tolist(), "k": k, "detrended_amplitude": amp})
    print(f"{args.mode} scan {args.points}x{args.points}, K={k}: detrended amplitude {amp:.6g}")


def cmd_compare_kernels(args, cfg, out):
    ctx = build_context(cfg, with_basis=False)
    report = compare_kernels(ctx, _density_arg(args.density, cfg), init_seeds=tuple(range(cfg.seed, cfg.seed + args.inits)))
    _write_json(out / "kernels.json", report)
    for kind, row in report.items():
        print(f"{kind:>6}: PSNR {row['psnr_mean']:.3f} +/- {row['psnr_std']:.3f} dB, d = {row['d']:.3f}")


COMMANDS = {
    "pca-build": cmd_pca_build,
    "design-init": cmd_design_init,
    "sample": cmd_sample,
    "reconstruct": cmd_reconstruct,
    "optimize": cmd_optimize,
    "scan": cmd_scan,
    "compare-kernels": cmd_compare_kernels,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with RunConfig fields")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out-dir", default=".", help="output directory")
    common.add_argument("--threads", type=int, help="limit BLAS threads")

    p = argparse.ArgumentParser(prog="kspace-bo", description="Density optimization for k-space trajectories.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pca-build", parents=[common], help="build the density basis")
    sub.add_parser("design-init", parents=[common], help="dump the initial maximin design")
    s = sub.add_parser("sample", parents=[common], help="density raster -> trajectory")
    s.add_argument("--density", help="density raster stem (default: baseline radial density)")
    r = sub.add_parser("reconstruct", parents=[common], help="trajectory + image -> reconstruction")
    r.add_argument("--trajectory", required=True)
    r.add_argument("--image", required=True)
    o = sub.add_parser("optimize", parents=[common], help="full Bayesian optimization run")
    o.add_argument("--no-tune", action="store_true", help="skip the baseline grid search")
    sc = sub.add_parser("scan", parents=[common], help="cost landscape on a 2D grid")
    sc.add_argument("--mode", choices=("shift", "density_plane"), default="shift")
    sc.add_argument("--points", type=int, default=11)
    sc.add_argument("--extent", type=float, default=2.0, help="half-width: Shannon steps (shift) or coordinate units (density_plane)")
    sc.add_argument("--k", type=int, help="number of training images (default: k_train)")
    sc.add_argument("--trajectory", help="trajectory stem for shift mode")
    sc.add_argument("--axes", type=int, nargs=2, default=(0, 1))
    ck = sub.add_parser("compare-kernels", parents=[common], help="linear / sqrt / log discrepancy kernels")
    ck.add_argument("--density", help="density raster stem (default: baseline radial density)")
    ck.add_argument("--inits", type=int, default=3, help="number of shared init seeds")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args)
        if args.threads is not None and args.threads < 1:
            raise InvalidParameterError("--threads must be >= 1")
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                COMMANDS[args.command](args, cfg, out)
        else:
            COMMANDS[args.command](args, cfg, out)
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
