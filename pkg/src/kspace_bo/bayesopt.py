"""Bayesian optimization over a convex hull of density coordinates.

Surrogate: Gaussian process with a constant mean (the data mean), Matérn-5/2
covariance ``sigma2 * (R_nu + g I)`` on standardized outputs, with the
signal variance profiled out of the likelihood and the length scale ``nu``
chosen by a log-grid search refined with golden-section search.

Acquisition: expected improvement (minimization), maximized by projected
gradient ascent from the best points of a space-filling pool.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import cho_solve, cholesky
from scipy.spatial.distance import cdist, pdist
from scipy.stats import norm

from .density import HULL_TOL, HullDomain, project_onto_hull
from .errors import FactorizationError, InvalidInputError, InvalidParameterError

SQRT5 = math.sqrt(5.0)
_GOLDEN = (math.sqrt(5.0) - 1) / 2


# --------------------------------------------------------------------------
# kernel


def _matern_r(r, nu):
    s = SQRT5 * r / nu
    return (1 + s + s * s / 3) * np.exp(-s)


def matern52(z1, z2, nu: float) -> float:
    """Matérn-5/2 correlation between two points."""
    if not nu > 0:
        raise InvalidParameterError(f"nu must be > 0, got {nu}")
    r = float(np.linalg.norm(np.asarray(z1, dtype=float) - np.asarray(z2, dtype=float)))
    return float(_matern_r(r, nu))


def matern52_matrix(a, b, nu: float) -> np.ndarray:
    return _matern_r(cdist(np.atleast_2d(a), np.atleast_2d(b)), nu)


def _matern_grad(z, pts, nu):
    """d k(z, pts_i) / dz, shape (n, L)."""
    diff = z[None, :] - pts
    r = np.sqrt(np.sum(diff * diff, axis=1))
    s = SQRT5 * r / nu
    # dk/dr = -(5 r / (3 nu^2)) (1 + s) exp(-s), and dr/dz = diff / r
    coef = -(5.0 / (3 * nu * nu)) * (1 + s) * np.exp(-s)
    return coef[:, None] * diff


# --------------------------------------------------------------------------
# GP model


@dataclass(frozen=True)
class BoConfig:
    """Budget and randomness of one optimization run."""

    n_init: int = 20
    n_evals: int = 80
    n_starts: int = 10
    seed: int = 0
    pool_size: int = 1000
    jitter: float = 1e-8
    ascent_iters: int = 50

    def __post_init__(self):
        if self.n_init < 2:
            raise InvalidParameterError(f"n_init must be >= 2, got {self.n_init}")
        if self.n_evals < self.n_init:
            raise InvalidParameterError(f"n_evals ({self.n_evals}) must be >= n_init ({self.n_init})")
        if self.n_starts < 1:
            raise InvalidParameterError("n_starts must be >= 1")
        if self.pool_size < 1:
            raise InvalidParameterError("pool_size must be >= 1")


@dataclass(frozen=True)
class GpModel:
    """Fitted GP surrogate; all stored quantities are in standardized units."""

    Z: np.ndarray
    f: np.ndarray
    nu: float
    sigma2: float
    jitter: float
    y_mean: float
    y_scale: float
    chol: np.ndarray
    alpha: np.ndarray
    lml_standardized: float

    @property
    def signal_variance(self) -> float:
        """Prior variance in original output units."""
        return self.sigma2 * self.y_scale**2

    @property
    def log_marginal_likelihood(self) -> float:
        """Log marginal likelihood of the original outputs at the fitted ``nu``."""
        return self.lml_standardized - len(self.f) * math.log(self.y_scale)


def _standardize(f):
    m = float(np.mean(f))
    s = float(np.std(f))
    if not s > 0:
        s = 1.0
    return (f - m) / s, m, s


def _factor(Z, nu, jitter):
    r = matern52_matrix(Z, Z, nu)
    r[np.diag_indices_from(r)] += jitter
    return cholesky(r, lower=True)


def _profiled_lml(chol, y):
    """Log likelihood with sigma2 profiled: returns (lml, sigma2, alpha=R^-1 y)."""
    n = len(y)
    alpha = cho_solve((chol, True), y)
    sigma2 = max(float(y @ alpha) / n, 1e-300)
    logdet = 2 * np.sum(np.log(np.diag(chol)))
    lml = -0.5 * n * math.log(2 * math.pi * sigma2) - 0.5 * logdet - 0.5 * n
    return lml, sigma2, alpha


def gp_log_likelihood(Z, f, nu: float, jitter: float = 1e-8) -> float:
    """Profiled log marginal likelihood of ``f`` (original units) at a given ``nu``."""
    y, _, s = _standardize(np.asarray(f, dtype=float))
    chol = _factor(np.asarray(Z, dtype=float), nu, jitter)
    return _profiled_lml(chol, y)[0] - len(y) * math.log(s)


def gp_fit(
    Z,
    f,
    jitter: float = 1e-8,
    nu: float | None = None,
    nu_bounds=(1e-2, 1e1),
    n_grid: int = 25,
    max_jitter: float = 1e-2,
) -> GpModel:
    """Fit the surrogate, selecting ``nu`` by maximum likelihood.

    The search interval is ``nu_bounds`` times the median pairwise distance
    of the inputs.  Jitter is multiplied by 10 until the kernel matrix
    factorizes, up to ``max_jitter``.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    f = np.asarray(f, dtype=float).ravel()
    if len(Z) != len(f):
        raise InvalidInputError(f"{len(Z)} inputs but {len(f)} outputs")
    if len(np.unique(Z, axis=0)) < 2:
        raise InvalidInputError("need at least two distinct input points")
    if not np.all(np.isfinite(f)):
        raise InvalidInputError("outputs must be finite")
    y, m, s = _standardize(f)
    med = float(np.median(pdist(Z)))
    if not med > 0:
        med = 1.0

    g = jitter
    while True:
        def objective(log_nu):
            try:
                return _profiled_lml(_factor(Z, math.exp(log_nu), g), y)[0]
            except np.linalg.LinAlgError:
                return -np.inf

        if nu is None:
            lo, hi = math.log(nu_bounds[0] * med), math.log(nu_bounds[1] * med)
            grid = np.linspace(lo, hi, n_grid)
            vals = np.array([objective(t) for t in grid])
            if np.isfinite(vals).any():
                i = int(np.argmax(vals))
                a, b = grid[max(i - 1, 0)], grid[min(i + 1, n_grid - 1)]
                log_nu = _golden_max(objective, a, b, grid[i], vals[i])
                chosen = math.exp(log_nu)
            else:
                chosen = None
        else:
            chosen = float(nu)
        if chosen is not None:
            try:
                chol = _factor(Z, chosen, g)
                lml, sigma2, alpha = _profiled_lml(chol, y)
                return GpModel(Z, f, chosen, sigma2, g, m, s, chol, alpha, lml)
            except np.linalg.LinAlgError:
                pass
        g *= 10
        if g > max_jitter:
            raise FactorizationError(f"kernel matrix not positive definite with jitter up to {max_jitter:g}")


def _golden_max(fun, a, b, x_best, f_best, iters=30):
    """Golden-section maximization on [a, b]; never returns worse than ``x_best``."""
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(iters):
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = fun(d)
    for x, v in ((c, fc), (d, fd)):
        if v > f_best:
            x_best, f_best = x, v
    return x_best


def _predict_std(model: GpModel, Zs):
    """Standardized predictive mean and latent variance at rows of ``Zs``."""
    k = matern52_matrix(Zs, model.Z, model.nu)
    mean = k @ model.alpha
    v = cho_solve((model.chol, True), k.T)
    var = model.sigma2 * (1.0 - np.sum(k * v.T, axis=1))
    return mean, np.maximum(var, 0.0)


def gp_predict(model: GpModel, z):
    """Posterior mean and variance in original units.

    Accepts one point ``(L,)`` (returns scalars) or a batch ``(n, L)``.
    """
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    mean, var = _predict_std(model, np.atleast_2d(z))
    mean = model.y_mean + model.y_scale * mean
    var = var * model.y_scale**2
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


# --------------------------------------------------------------------------
# expected improvement


def ei_from_moments(mean, std, best):
    """``E[max(best - Y, 0)]`` for ``Y ~ N(mean, std^2)``."""
    mean, std, best = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (mean, std, best)))
    shape = mean.shape
    mean, std, best = (np.atleast_1d(v).ravel() for v in (mean, std, best))
    out = np.maximum(best - mean, 0.0)
    # beyond |u| = 40 the closed form equals the hinge to double precision
    pos = 40 * std > np.abs(best - mean)
    u = (best[pos] - mean[pos]) / std[pos]
    out[pos] = std[pos] * (u * norm.cdf(u) + norm.pdf(u))
    out = np.maximum(out, 0.0).reshape(shape)
    return float(out) if out.ndim == 0 else out


def _ei_standardized(model, Zs, best_std):
    mean, var = _predict_std(model, Zs)
    return ei_from_moments(mean, np.sqrt(var), best_std)


def expected_improvement(model: GpModel, z, best_f: float):
    """Expected improvement below ``best_f`` (original units)."""
    z = np.asarray(z, dtype=float)
    best_std = (best_f - model.y_mean) / model.y_scale
    ei = model.y_scale * _ei_standardized(model, np.atleast_2d(z), best_std)
    return float(ei[0]) if z.ndim == 1 else ei


def expected_improvement_grad(model: GpModel, z, best_f: float):
    """EI and its gradient at a single point (original units)."""
    z = np.asarray(z, dtype=float)
    best = (best_f - model.y_mean) / model.y_scale
    k = matern52_matrix(z[None], model.Z, model.nu)[0]
    dk = _matern_grad(z, model.Z, model.nu)
    mean = k @ model.alpha
    v = cho_solve((model.chol, True), k)
    var = model.sigma2 * (1.0 - k @ v)
    dmean = dk.T @ model.alpha
    if var <= 1e-300:
        ei = max(best - mean, 0.0)
        grad = -dmean if best > mean else np.zeros_like(z)
        return model.y_scale * ei, model.y_scale * grad
    std = math.sqrt(var)
    dstd = -model.sigma2 * (dk.T @ v) / std
    u = (best - mean) / std
    cdf, pdf = norm.cdf(u), norm.pdf(u)
    ei = std * (u * cdf + pdf)
    grad = -cdf * dmean + pdf * dstd
    return model.y_scale * float(ei), model.y_scale * grad


# --------------------------------------------------------------------------
# designs


def _candidate_pool(domain: HullDomain, size: int, rng) -> np.ndarray:
    """Points of the hull: vertices, sparse convex combinations, projected box draws."""
    verts = domain.vertices
    n_vert = min(len(verts), size // 3 + 1)
    idx = rng.choice(len(verts), size=n_vert, replace=False)
    parts = [verts[np.sort(idx)]]
    n_mix = size // 2
    k_max = min(len(verts), domain.L + 1)
    mix = np.empty((n_mix, domain.L))
    for i in range(n_mix):
        k = int(rng.integers(2, k_max + 1)) if k_max >= 2 else 1
        sel = rng.choice(len(verts), size=k, replace=False)
        mix[i] = rng.dirichlet(np.ones(k)) @ verts[sel]
    parts.append(mix)
    lo, hi = domain.bounding_box()
    n_box = max(size - n_vert - n_mix, 0)
    box = rng.uniform(lo, hi, size=(n_box, domain.L))
    parts.append(np.array([project_onto_hull(domain, b) for b in box]).reshape(-1, domain.L))
    return np.concatenate(parts)


def _greedy_farthest(pool, n, start):
    chosen = [start]
    dmin = np.linalg.norm(pool - pool[start], axis=1)
    for _ in range(1, n):
        j = int(np.argmax(dmin))
        chosen.append(j)
        dmin = np.minimum(dmin, np.linalg.norm(pool - pool[j], axis=1))
    return chosen


def _min_pairwise(x):
    return float(pdist(x).min()) if len(x) > 1 else np.inf


def _exchange(pool, chosen, passes=10):
    """Swap design points for pool candidates while the minimum distance grows."""
    chosen = list(chosen)
    pts = pool[chosen]
    d_pool = cdist(pool, pts)
    for _ in range(passes):
        improved = False
        cur = _min_pairwise(pts)
        d = cdist(pts, pts)
        np.fill_diagonal(d, np.inf)
        worst = np.unique(np.argwhere(d <= cur * (1 + 1e-12)).ravel())
        for i in worst:
            others = np.delete(np.arange(len(chosen)), i)
            rest_min = _min_pairwise(pts[others])
            cand = d_pool[:, others].min(axis=1)
            cand[chosen] = -np.inf
            j = int(np.argmax(cand))
            new = min(rest_min, cand[j])
            if new > cur * (1 + 1e-9):
                chosen[i] = j
                pts = pool[chosen]
                d_pool[:, i] = np.linalg.norm(pool - pool[j], axis=1)
                cur = _min_pairwise(pts)
                improved = True
        if not improved:
            break
    return chosen


def maximin_design(domain: HullDomain, n: int, seed: int = 0, pool_size: int | None = None, exchange: bool = True) -> np.ndarray:
    """Space-filling design of ``n`` hull points with a large minimum distance.

    Greedy farthest-point insertion over a candidate pool, starting from the
    candidate farthest from the vertex centroid, then exchange passes that
    swap points of the closest pairs for better candidates.
    """
    if n < 1:
        raise InvalidParameterError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    size = pool_size or max(20 * n, 2000)
    pool = _candidate_pool(domain, max(size, n), rng)
    centroid = domain.vertices.mean(axis=0)
    start = int(np.argmax(np.linalg.norm(pool - centroid, axis=1)))
    chosen = _greedy_farthest(pool, n, start)
    if exchange and n > 1:
        chosen = _exchange(pool, chosen)
    return pool[chosen].copy()


# --------------------------------------------------------------------------
# acquisition


def _ascent(model, domain, z0, best_f, iters, step0):
    z = z0.copy()
    val, g = expected_improvement_grad(model, z, best_f)
    step = step0
    for _ in range(iters):
        gn = np.linalg.norm(g)
        if gn == 0 or not np.isfinite(gn):
            break
        accepted = False
        while step > step0 * 1e-6:
            cand = project_onto_hull(domain, z + step * g / gn)
            cval, cg = expected_improvement_grad(model, cand, best_f)
            if cval > val:
                moved = np.linalg.norm(cand - z)
                z, val, g = cand, cval, cg
                step *= 2.0
                accepted = True
                break
            step *= 0.5
        if not accepted or moved < 1e-10:
            break
    return z, val


def acquire_next(
    model: GpModel,
    domain: HullDomain,
    n_starts: int = 10,
    seed: int = 0,
    pool: np.ndarray | None = None,
    pool_size: int = 1000,
    iters: int = 50,
    best_f: float | None = None,
) -> np.ndarray:
    """Maximize expected improvement over the hull.

    The pool (by default a maximin design of ``pool_size`` points) is
    scored, the ``n_starts`` best points seed projected gradient ascent with
    adaptive steps, and the terminal point with the largest EI is returned.
    """
    if pool is None:
        pool = maximin_design(domain, pool_size, seed, exchange=False)
    best_f = float(np.min(model.f)) if best_f is None else best_f
    ei = expected_improvement(model, pool, best_f)
    order = np.argsort(-ei, kind="stable")[:n_starts]
    lo, hi = domain.bounding_box()
    step0 = 0.05 * float(np.linalg.norm(hi - lo))
    best_z, best_v = pool[order[0]].copy(), float(ei[order[0]])
    for i in order:
        z, v = _ascent(model, domain, pool[i], best_f, iters, step0)
        if v > best_v:
            best_z, best_v = z, v
    return best_z


# --------------------------------------------------------------------------
# optimization loop


@dataclass
class Evaluation:
    z: list
    f: float | None
    tag: str
    wall_time: float | None = None
    error: str | None = None

    def to_json(self) -> str:
        rec = {"z": self.z, "f": self.f, "tag": self.tag, "wall_time": self.wall_time}
        if self.error is not None:
            rec["error"] = self.error
        return json.dumps(rec, sort_keys=True)


def _evaluate(objective, z, tag, record_time):
    err = None
    for _ in range(2):
        t0 = time.perf_counter()
        try:
            f = float(objective(z))
            if not math.isfinite(f):
                raise ValueError(f"objective returned {f}")
            elapsed = time.perf_counter() - t0
            return Evaluation([float(v) for v in z], f, tag, elapsed if record_time else None), elapsed
        except Exception as exc:  # noqa: BLE001 - any failure is recorded, never imputed
            err = f"{type(exc).__name__}: {exc}"
    return Evaluation([float(v) for v in z], None, tag, None, err), 0.0


def optimize_density(
    objective: Callable[[np.ndarray], float],
    domain: HullDomain,
    cfg: BoConfig,
    history_path=None,
    record_time: bool = False,
    design: np.ndarray | None = None,
    timings: list | None = None,
):
    """Minimize a black-box objective over the hull.

    Evaluates a maximin design of ``cfg.n_init`` points, then alternates
    GP fit, EI maximization and evaluation until ``cfg.n_evals`` evaluations
    have been attempted.  A failing evaluation is retried once and then
    recorded with ``f = None``.  Returns ``(z_best, history)``.

    With ``record_time`` the per-evaluation wall time is stored in the
    history; it is off by default so reruns produce identical files.
    """
    if design is None:
        design = maximin_design(domain, cfg.n_init, cfg.seed)
    history: list[Evaluation] = []
    if timings is None:
        timings = []
    out = None
    if history_path is not None:
        Path(history_path).parent.mkdir(parents=True, exist_ok=True)
        out = open(history_path, "w")

    def record(ev, elapsed):
        history.append(ev)
        timings.append(elapsed)
        if out is not None:
            out.write(ev.to_json() + "\n")
            out.flush()

    try:
        for z in design[: cfg.n_evals]:
            record(*_evaluate(objective, z, "design", record_time))
        pool = None
        it = 0
        while len(history) < cfg.n_evals:
            ok = [e for e in history if e.f is not None]
            Z = np.array([e.z for e in ok]).reshape(-1, domain.L)
            f = np.array([e.f for e in ok])
            tag = "acquisition"
            if pool is None:
                pool = maximin_design(domain, cfg.pool_size, cfg.seed + 1, exchange=False)
            try:
                model = gp_fit(Z, f, cfg.jitter)
                z = acquire_next(model, domain, cfg.n_starts, cfg.seed + it, pool=pool, iters=cfg.ascent_iters)
            except (FactorizationError, InvalidInputError):
                # too few usable points or a singular fit: fall back to space filling
                known = np.array([e.z for e in history])
                z = pool[int(np.argmax(cdist(pool, known).min(axis=1)))]
                tag = "fallback"
            record(*_evaluate(objective, z, tag, record_time))
            it += 1
    finally:
        if out is not None:
            out.close()
    ok = [e for e in history if e.f is not None]
    if not ok:
        raise InvalidInputError("every objective evaluation failed")
    best = min(ok, key=lambda e: e.f)
    return np.array(best.z), history


def read_history(path) -> list[Evaluation]:
    recs = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            recs.append(Evaluation(d["z"], d["f"], d["tag"], d.get("wall_time"), d.get("error")))
    return recs


def best_so_far(history) -> np.ndarray:
    vals = np.array([np.inf if e.f is None else e.f for e in history])
    return np.minimum.accumulate(vals)


def hull_member(domain: HullDomain, z) -> bool:
    return float(np.linalg.norm(project_onto_hull(domain, z) - np.asarray(z))) <= HULL_TOL
