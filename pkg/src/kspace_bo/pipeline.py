"""End-to-end wiring: coordinates -> density -> trajectory -> reconstruction cost.

A :class:`RunConfig` describes one desk-scale experiment.  :func:`build_context`
materializes everything that does not depend on the density coordinates
(basis, hull, constraints, radial prefix, training and held-out images) and
the remaining functions evaluate, scan and optimize on top of it.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .bayesopt import BoConfig, optimize_density
from .core import ConstraintSpec, SamplingScheme, psnr
from .density import (
    DensityBasis,
    DensityGrid,
    ElementaryParams,
    GeneratorBox,
    HullDomain,
    _calibrate_r,
    _quadratic_form,
    box_to_dict,
    build_basis,
    cell_grid,
    elementary_density,
    generate_density,
    load_basis,
    project_onto_hull,
    random_generators,
    save_basis,
)
from .errors import InvalidParameterError
from .io import read_image, write_raster, write_trajectory
from .recon import NoiseSpec, TvConfig, reconstruction_errors
from .sampler import (
    DiscrepancyKernel,
    RadialPrefix,
    SamplerConfig,
    initial_scheme,
    neighbor_spacing,
    radial_prefix,
    sample_scheme,
)


# --------------------------------------------------------------------------
# synthetic data


def _ellipse(x, y, cx, cy, ax, ay, theta):
    c, s = math.cos(theta), math.sin(theta)
    u = (x - cx) * c + (y - cy) * s
    v = -(x - cx) * s + (y - cy) * c
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1


def phantoms(k: int, n: int = 32, seed: int = 0) -> np.ndarray:
    """Piecewise-constant test images in [0, 1], shape ``(k, n, n)``.

    Each image is a random elliptical body with 3 to 7 ellipses or
    rectangles of random contrast inside it.
    """
    rng = np.random.default_rng(seed)
    a = (np.arange(n) - n / 2 + 0.5) / (n / 2)
    x, y = np.meshgrid(a, a, indexing="ij")
    out = np.zeros((k, n, n))
    for i in range(k):
        img = np.zeros((n, n))
        cx, cy = rng.uniform(-0.1, 0.1, 2)
        ax, ay = rng.uniform(0.6, 0.9, 2)
        body = _ellipse(x, y, cx, cy, ax, ay, rng.uniform(0, math.pi))
        img[body] = rng.uniform(0.6, 0.9)
        for _ in range(int(rng.integers(3, 8))):
            val = rng.uniform(-0.4, 0.4)
            if rng.random() < 0.5:
                cx, cy = rng.uniform(-0.6, 0.6, 2)
                ax, ay = rng.uniform(0.05, 0.35, 2)
                mask = _ellipse(x, y, cx, cy, ax, ay, rng.uniform(0, math.pi))
            else:
                x0, y0 = rng.uniform(-0.6, 0.6, 2)
                w, h = rng.uniform(0.05, 0.4, 2)
                mask = (np.abs(x - x0) < w) & (np.abs(y - y0) < h)
            img[mask & body] += val
        out[i] = np.clip(img, 0, 1)
    return out


def load_dataset(path, limit: int | None = None) -> np.ndarray:
    """Stack of images stored in the core raster format under ``path`` (sorted by name)."""
    stems = sorted(p.with_suffix("") for p in Path(path).glob("*.json"))
    if limit is not None:
        stems = stems[:limit]
    if not stems:
        raise InvalidParameterError(f"no images found in {path}")
    return np.stack([read_image(s).values for s in stems])


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    """One desk-scale experiment.

    Constraints: ``alpha`` defaults to the Shannon spacing ``2 pi / grid``
    and ``beta = beta_ratio * alpha``.  The shot length is derived from the
    undersampling target, ``P = round(undersampling * grid^2 / n_shots)``.
    Training images use ``data_seed`` and held-out images ``data_seed + 1``
    (disjoint streams).
    """

    grid: int = 32
    undersampling: float = 0.25
    n_shots: int = 8
    alpha: float | None = None
    beta_ratio: float = 1.0
    # basis
    n_generators: int = 10_000
    L: int = 8
    basis_seed: int = 0
    basis_path: str | None = None
    # sampler
    kernel: str = "log"
    sampler_tau: float = 1.0
    sampler_iterations: int = 200
    # reconstruction
    tv_lam: float = 10.0
    tv_eps: float = 1e-2
    tv_iterations: int = 120
    tv_momentum: float = 0.9
    noise_level: float = 0.0
    # data
    k_train: int = 32
    k_test: int = 16
    data_seed: int = 0
    dataset_path: str | None = None
    # optimization
    n_init: int = 20
    n_evals: int = 80
    n_starts: int = 10
    pool_size: int = 1000
    seed: int = 0
    # baseline search: isotropic widths and decays tried on the training set
    baseline_sigmas: tuple = (0.5, 1.0, 2.0, 3.0)
    baseline_gammas: tuple = (0.75, 1.5, 3.0)
    baseline_level: float = 3.0
    center_radius: float = math.pi / 8

    def __post_init__(self):
        if self.grid < 4 or self.grid % 2:
            raise InvalidParameterError(f"grid must be even and >= 4, got {self.grid}")
        if not 0 < self.undersampling <= 1:
            raise InvalidParameterError("undersampling must lie in (0, 1]")
        if self.n_shots < 1:
            raise InvalidParameterError("n_shots must be >= 1")
        if self.shot_length < 3:
            raise InvalidParameterError(f"shot length {self.shot_length} < 3; reduce n_shots")
        if self.n_shots * self.shot_length > self.grid**2:
            raise InvalidParameterError("more samples than pixels")
        if self.k_train < 1 or self.k_test < 0:
            raise InvalidParameterError("k_train must be >= 1 and k_test >= 0")

    @property
    def shot_length(self) -> int:
        return int(round(self.undersampling * self.grid**2 / self.n_shots))

    @property
    def shannon(self) -> float:
        return 2 * math.pi / self.grid

    def constraints(self) -> ConstraintSpec:
        alpha = self.shannon if self.alpha is None else self.alpha
        return ConstraintSpec(alpha, self.beta_ratio * alpha)

    def sampler(self, exclusion_radius: float, kernel: str | None = None) -> SamplerConfig:
        return SamplerConfig(
            tau=self.sampler_tau,
            iterations=self.sampler_iterations,
            kernel=DiscrepancyKernel(kernel or self.kernel),
            exclusion_radius=exclusion_radius,
            spacing=self.shannon,
        )

    def tv(self) -> TvConfig:
        return TvConfig(self.tv_lam, self.tv_eps, self.tv_iterations, self.tv_momentum)

    def noise(self) -> NoiseSpec:
        return NoiseSpec(self.noise_level, self.data_seed)

    def bo(self) -> BoConfig:
        return BoConfig(self.n_init, self.n_evals, self.n_starts, self.seed, self.pool_size)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InvalidParameterError(f"unknown config keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


# --------------------------------------------------------------------------
# context

_BASIS_CACHE: dict = {}


def get_basis(cfg: RunConfig):
    """Basis and hull for ``cfg``, loaded from ``basis_path`` or built (and memoized)."""
    if cfg.basis_path:
        basis, domain, _ = load_basis(cfg.basis_path)
        if basis.resolution != cfg.grid:
            raise InvalidParameterError(f"basis resolution {basis.resolution} != grid {cfg.grid}")
        return basis, domain
    key = (cfg.n_generators, cfg.L, cfg.basis_seed, cfg.grid, cfg.undersampling)
    if key not in _BASIS_CACHE:
        box = GeneratorBox(undersampling=cfg.undersampling)
        gens = random_generators(cfg.n_generators, box, cfg.grid, cfg.basis_seed)
        _BASIS_CACHE[key] = build_basis(gens, cfg.L, cfg.grid, cfg.basis_seed)
    return _BASIS_CACHE[key]


@dataclass
class Context:
    cfg: RunConfig
    basis: DensityBasis
    domain: HullDomain
    constraints: ConstraintSpec
    prefix: RadialPrefix
    train: np.ndarray
    test: np.ndarray

    @property
    def sampler_cfg(self) -> SamplerConfig:
        return self.cfg.sampler(self.prefix.exclusion_radius)


def build_context(cfg: RunConfig, with_basis: bool = True) -> Context:
    base = cfg.constraints()
    prefix = radial_prefix(base, cfg.n_shots, n_grid=cfg.grid, max_len=cfg.shot_length)
    constraints = base.with_pins(prefix.pins())
    if cfg.dataset_path:
        data = load_dataset(cfg.dataset_path)
        if len(data) < cfg.k_train + cfg.k_test:
            raise InvalidParameterError(f"dataset holds {len(data)} images, need {cfg.k_train + cfg.k_test}")
        train, test = data[: cfg.k_train], data[cfg.k_train : cfg.k_train + cfg.k_test]
    else:
        train = phantoms(cfg.k_train, cfg.grid, seed=2 * cfg.data_seed)
        test = phantoms(cfg.k_test, cfg.grid, seed=2 * cfg.data_seed + 1)
    if with_basis:
        basis, domain = get_basis(cfg)
    else:
        basis, domain = None, None
    return Context(cfg, basis, domain, constraints, prefix, train, test)


# --------------------------------------------------------------------------
# density -> scheme -> cost


def _seed_from(*arrays) -> int:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(np.asarray(a, dtype=np.float64)).tobytes())
    return int.from_bytes(h.digest()[:8], "little")


def scheme_from_density(rho: DensityGrid, ctx: Context, seed: int | None = None, kernel: str | None = None) -> SamplingScheme:
    """Prefix + i.i.d. init from ``rho`` + discrepancy descent.

    The init seed defaults to a hash of the density raster.
    """
    seed = _seed_from(rho.weights) if seed is None else seed
    init = initial_scheme(rho, ctx.prefix, ctx.cfg.shot_length, seed)
    return sample_scheme(rho, ctx.constraints, ctx.cfg.sampler(ctx.prefix.exclusion_radius, kernel), init)


def density_to_scheme(z, basis: DensityBasis, domain: HullDomain, constraints: ConstraintSpec, sampler_cfg: SamplerConfig, prefix: RadialPrefix, p: int) -> SamplingScheme:
    """``xi(z)``: project ``z`` onto the hull, build the density and sample it.

    Deterministic: the init seed is a hash of the projected coordinates.
    """
    z = project_onto_hull(domain, np.asarray(z, dtype=np.float64))
    rho = generate_density(basis, z)
    init = initial_scheme(rho, prefix, p, _seed_from(z))
    return sample_scheme(rho, constraints, sampler_cfg, init)


def context_scheme(z, ctx: Context) -> SamplingScheme:
    return density_to_scheme(z, ctx.basis, ctx.domain, ctx.constraints, ctx.sampler_cfg, ctx.prefix, ctx.cfg.shot_length)


def scheme_cost(scheme: SamplingScheme, ctx: Context, images=None) -> float:
    imgs = ctx.train if images is None else images
    return float(np.mean(reconstruction_errors(scheme, imgs, ctx.cfg.tv(), ctx.cfg.noise())))


def evaluate_density_cost(z, ctx: Context, images=None) -> float:
    """``F(z)``: mean reconstruction cost of the training images under ``xi(z)``."""
    return scheme_cost(context_scheme(z, ctx), ctx, images)


def heldout_psnr(scheme: SamplingScheme, ctx: Context, images=None) -> np.ndarray:
    imgs = ctx.test if images is None else images
    _, rec = reconstruction_errors(scheme, imgs, ctx.cfg.tv(), ctx.cfg.noise(), return_recons=True)
    return np.array([psnr(a, b) for a, b in zip(imgs, rec)])


# --------------------------------------------------------------------------
# baseline


def baseline_radial_density(sigma: float = 1.0, gamma: float = 1.5, level: float = 3.0, resolution: int = 32, undersampling: float = 0.25, eps: float = 1e-2, kappa: float = math.pi / 16) -> DensityGrid:
    """Isotropic member of the elementary family.

    ``level`` is the pre-smoothing peak cell weight in units of the
    Shannon-rate weight ``1 / (undersampling * resolution^2)``; the plateau
    ``r`` is solved for accordingly.
    """
    q = _quadratic_form(cell_grid(resolution), sigma, sigma, 0.0).ravel()[None]
    target = np.array([level / (undersampling * resolution**2)])
    r = float(_calibrate_r(q, np.array([gamma]), eps, target, GeneratorBox().r_bounds)[0])
    return elementary_density(ElementaryParams(sigma, sigma, 0.0, r, gamma, eps, kappa), resolution)


def tune_baseline(ctx: Context):
    """Grid search of the baseline width and decay on the training cost.

    Returns ``(best_params, table)`` where ``table`` lists every tried
    ``{"sigma", "gamma", "cost"}``.
    """
    cfg = ctx.cfg
    table = []
    for s in cfg.baseline_sigmas:
        for g in cfg.baseline_gammas:
            rho = baseline_radial_density(s, g, cfg.baseline_level, cfg.grid, cfg.undersampling)
            table.append({"sigma": float(s), "gamma": float(g), "cost": scheme_cost(scheme_from_density(rho, ctx), ctx)})
    best = min(table, key=lambda r: r["cost"])
    return {"sigma": best["sigma"], "gamma": best["gamma"], "level": cfg.baseline_level}, table


# --------------------------------------------------------------------------
# diagnostics


def detrended_amplitude(surface, xs, ys) -> float:
    """Max minus min of the residual after a least-squares quadratic fit."""
    X, Y = np.meshgrid(np.asarray(xs, float), np.asarray(ys, float), indexing="ij")
    s = np.asarray(surface, dtype=float)
    if s.size < 6:
        return float(s.max() - s.min())
    x, y = X.ravel(), Y.ravel()
    design = np.column_stack([np.ones_like(x), x, y, x * x, x * y, y * y])
    coef, *_ = np.linalg.lstsq(design, s.ravel(), rcond=None)
    res = s.ravel() - design @ coef
    return float(res.max() - res.min())


def scan_landscape(mode: str, ctx: Context, xs, ys, images=None, scheme: SamplingScheme | None = None, z_center=None, axes=(0, 1)):
    """Cost surface over a 2D grid.

    ``shift``: the fixed ``scheme`` translated by ``(x, y)``.
    ``density_plane``: densities at ``z_center + x e_i + y e_j`` for the
    basis indices ``axes`` (clipped when outside the hull, never projected).

    Returns ``{"mode", "x", "y", "cost"}`` with ``cost[i, j]`` at ``(xs[i], ys[j])``.
    """
    xs = [float(v) for v in xs]
    ys = [float(v) for v in ys]
    cost = np.empty((len(xs), len(ys)))
    if mode == "shift":
        if scheme is None:
            raise InvalidParameterError("shift scan needs a scheme")
        for i, dx in enumerate(xs):
            for j, dy in enumerate(ys):
                cost[i, j] = scheme_cost(scheme.translated((dx, dy)), ctx, images)
    elif mode == "density_plane":
        zc = np.zeros(ctx.domain.L) if z_center is None else np.asarray(z_center, dtype=float)
        a, b = axes
        for i, dx in enumerate(xs):
            for j, dy in enumerate(ys):
                z = zc.copy()
                z[a] += dx
                z[b] += dy
                rho = generate_density(ctx.basis, z)
                cost[i, j] = scheme_cost(scheme_from_density(rho, ctx), ctx, images)
    else:
        raise InvalidParameterError(f"unknown scan mode {mode!r}")
    return {"mode": mode, "x": xs, "y": ys, "cost": cost}


def compare_kernels(ctx: Context, rho: DensityGrid, init_seeds=(0, 1, 2)) -> dict:
    """PSNR (held-out) and center spacing ``d`` of the three discrepancy kernels.

    Every kernel starts from the same inits (one per seed); the report
    averages over them.
    """
    report = {}
    for kind in ("linear", "sqrt", "log"):
        ps, ds = [], []
        for s in init_seeds:
            scheme = scheme_from_density(rho, ctx, seed=int(s), kernel=kind)
            ps.append(heldout_psnr(scheme, ctx).mean())
            ds.append(neighbor_spacing(scheme, ctx.cfg.center_radius, ctx.cfg.grid))
        report[kind] = {
            "psnr_mean": float(np.mean(ps)),
            "psnr_std": float(np.std(ps)),
            "d": float(np.mean(ds)),
        }
    return report


# --------------------------------------------------------------------------
# full run


@dataclass
class RunReport:
    best_z: list
    best_cost: float
    best_density: str
    best_trajectory: str
    heldout_psnr: list
    heldout_psnr_mean: float
    baseline: dict
    baseline_density: str
    baseline_trajectory: str
    baseline_heldout_psnr: list
    baseline_heldout_psnr_mean: float
    history: str
    n_evaluations: int
    timings: str
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def run_optimize(cfg: RunConfig, out_dir, tune: bool = True, progress=None) -> RunReport:
    """Baseline tuning, Bayesian optimization and held-out evaluation.

    Writes into ``out_dir``: ``config.json``, ``basis/`` (manifest and
    buffers), ``history.jsonl``, density and trajectory artifacts for the
    optimum and the baseline, ``report.json`` and ``timings.json``.  Only
    ``timings.json`` depends on wall-clock time.
    """
    import time

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "config.json", cfg.to_dict())
    clock = {"start": time.perf_counter()}
    ctx = build_context(cfg)
    save_basis(out / "basis", ctx.basis, ctx.domain, {
        "n_generators": cfg.n_generators, "seed": cfg.basis_seed, "box": box_to_dict(GeneratorBox(undersampling=cfg.undersampling)),
    })
    clock["setup"] = time.perf_counter() - clock["start"]

    t0 = time.perf_counter()
    if tune:
        base_params, base_table = tune_baseline(ctx)
    else:
        base_params = {"sigma": cfg.baseline_sigmas[0], "gamma": cfg.baseline_gammas[0], "level": cfg.baseline_level}
        base_table = []
    base_rho = baseline_radial_density(base_params["sigma"], base_params["gamma"], base_params["level"], cfg.grid, cfg.undersampling)
    base_scheme = scheme_from_density(base_rho, ctx)
    clock["baseline"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    timings: list = []

    def objective(z):
        f = evaluate_density_cost(z, ctx)
        if progress is not None:
            progress(len(timings), f)
        return f

    z_best, history = optimize_density(objective, ctx.domain, cfg.bo(), out / "history.jsonl", timings=timings)
    clock["optimize"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    best_rho = generate_density(ctx.basis, project_onto_hull(ctx.domain, z_best))
    best_scheme = context_scheme(z_best, ctx)
    best_psnr = heldout_psnr(best_scheme, ctx)
    base_psnr = heldout_psnr(base_scheme, ctx)
    write_raster(out / "best_density", best_rho.weights, "f32")
    write_trajectory(out / "best_trajectory", best_scheme)
    write_raster(out / "baseline_density", base_rho.weights, "f32")
    write_trajectory(out / "baseline_trajectory", base_scheme)
    clock["evaluate"] = time.perf_counter() - t0
    clock["total"] = time.perf_counter() - clock.pop("start")
    _dump(out / "timings.json", {"phases": clock, "evaluations": timings})

    ok = [e for e in history if e.f is not None]
    report = RunReport(
        best_z=[float(v) for v in z_best],
        best_cost=float(min(e.f for e in ok)),
        best_density="best_density",
        best_trajectory="best_trajectory",
        heldout_psnr=[float(v) for v in best_psnr],
        heldout_psnr_mean=float(best_psnr.mean()),
        baseline={**base_params, "table": base_table},
        baseline_density="baseline_density",
        baseline_trajectory="baseline_trajectory",
        baseline_heldout_psnr=[float(v) for v in base_psnr],
        baseline_heldout_psnr_mean=float(base_psnr.mean()),
        history="history.jsonl",
        n_evaluations=len(history),
        timings="timings.json",
    )
    (out / "report.json").write_text(report.to_json())
    return report


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, **kw)
