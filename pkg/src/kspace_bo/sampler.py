"""Density-to-trajectory sampler: kernel discrepancy descent under kinematic constraints.

The discrepancy between the empirical measure of the free sample points and a
raster density is the quadratic form

    D(mu, nu) = <k * (mu - nu), mu - nu>,   k = -h,

with ``h`` one of the radial kernels ``|x|``, ``sqrt|x|`` or ``log|x|``.
These are conditionally negative definite, so ``-h`` is conditionally
positive definite and ``D >= 0`` for measures of equal mass.  Both measures
are restricted to the exterior of an exclusion disk around the origin and
renormalized; pinned points never enter ``mu``.

Kinematic feasibility (box, speed ``alpha``, acceleration ``beta``, pins) is
enforced after every step by an exact Euclidean projection computed with an
accelerated dual ascent on the constraint multipliers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import ConstraintSpec, SamplingScheme
from .density import DensityGrid
from .errors import ConvergenceError, InvalidInputError, InvalidParameterError

KERNELS = ("linear", "sqrt", "log")
DEFAULT_DELTA = 1e-6 * 2 * math.pi
# projection tolerances inside the descent loop and for the returned scheme
INNER_TOL = 1e-7
FINAL_TOL = 1e-9


@dataclass(frozen=True)
class DiscrepancyKernel:
    """Radial kernel ``h``; distances below ``delta`` are clamped to ``delta``."""

    kind: str = "log"
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise InvalidParameterError(f"unknown kernel {self.kind!r}, expected one of {KERNELS}")
        if not self.delta > 0:
            raise InvalidParameterError(f"delta must be > 0, got {self.delta}")

    def h(self, r) -> np.ndarray:
        r = np.maximum(r, self.delta)
        if self.kind == "linear":
            return r
        if self.kind == "sqrt":
            return np.sqrt(r)
        return np.log(r)

    def dh(self, r) -> np.ndarray:
        """``h'(r)``, zero below the guard."""
        rr = np.maximum(r, self.delta)
        if self.kind == "linear":
            d = np.ones_like(rr)
        elif self.kind == "sqrt":
            d = 0.5 / np.sqrt(rr)
        else:
            d = 1.0 / rr
        return np.where(r < self.delta, 0.0, d)


@dataclass(frozen=True)
class SamplerConfig:
    """Fixed-step projected descent settings.

    The step is ``tau * (M'/2) * grad D / h'(spacing)``: the factor
    ``M'/2`` removes the dependence on the number of free points ``M'`` and
    ``h'(spacing)`` (the pair force at the reference spacing, by default the
    Shannon spacing of a 32-pixel grid) puts the three kernels on a common
    scale, so ``tau`` is a displacement in k-space units.
    """

    tau: float = 0.5
    iterations: int = 200
    kernel: DiscrepancyKernel = field(default_factory=DiscrepancyKernel)
    exclusion_radius: float = 0.0
    spacing: float = 2 * math.pi / 32

    def __post_init__(self):
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise InvalidParameterError(f"tau must be > 0, got {self.tau}")
        if self.iterations < 1:
            raise InvalidParameterError(f"iterations must be >= 1, got {self.iterations}")
        if not self.exclusion_radius >= 0:
            raise InvalidParameterError("exclusion_radius must be >= 0")
        if not self.spacing > 0:
            raise InvalidParameterError(f"spacing must be > 0, got {self.spacing}")

    @property
    def step_scale(self) -> float:
        return self.tau / float(self.kernel.dh(np.asarray(self.spacing)))


# --------------------------------------------------------------------------
# discrepancy


def _distances(a, b):
    dx = a[:, 0, None] - b[None, :, 0]
    dy = a[:, 1, None] - b[None, :, 1]
    return np.sqrt(dx * dx + dy * dy)


class DiscrepancyField:
    """Discrepancy against a fixed density, with the density-only term cached.

    Parameters
    ----------
    rho : DensityGrid
    kernel : DiscrepancyKernel
    exclusion_radius : float
        Cells and points with ``|x| < exclusion_radius`` are discarded.
    """

    def __init__(self, rho: DensityGrid, kernel: DiscrepancyKernel, exclusion_radius: float = 0.0):
        centers = rho.centers()
        w = rho.weights.ravel()
        keep = (np.linalg.norm(centers, axis=1) >= exclusion_radius) & (w > 0)
        if not keep.any() or w[keep].sum() <= 0:
            raise InvalidInputError("density has no mass outside the exclusion disk")
        self.kernel = kernel
        self.exclusion_radius = float(exclusion_radius)
        self.cells = centers[keep]
        self.weights = w[keep] / w[keep].sum()
        self._cell_term = None

    @property
    def cell_term(self) -> float:
        """``sum_c sum_c' w_c w_c' k(c - c')`` by chunked direct summation."""
        if self._cell_term is None:
            total = 0.0
            step = max(1, 2_000_000 // len(self.cells))
            for s in range(0, len(self.cells), step):
                r = _distances(self.cells[s : s + step], self.cells)
                total += self.weights[s : s + step] @ (-self.kernel.h(r)) @ self.weights
            self._cell_term = float(total)
        return self._cell_term

    def free_mask(self, points, pinned=None) -> np.ndarray:
        mask = np.linalg.norm(points, axis=1) >= self.exclusion_radius
        if pinned is not None:
            mask &= ~pinned
        return mask

    def _interactions(self, free, want_grad):
        m = len(free)
        r_pp = _distances(free, free)
        r_pc = _distances(free, self.cells)
        h_pc = self.kernel.h(r_pc) @ self.weights
        value = float(-self.kernel.h(r_pp).sum() / m**2 + 2 * h_pc.sum() / m + self.cell_term)
        if not want_grad:
            return value, None
        # grad_x k(x) = -h'(|x|) x / |x|, so sum_j c_ij (x_i - x_j) with c = h'(r)/r
        c_pp = self.kernel.dh(r_pp) / np.maximum(r_pp, self.kernel.delta)
        c_pc = self.kernel.dh(r_pc) / np.maximum(r_pc, self.kernel.delta) * self.weights
        g_pp = -(c_pp.sum(1)[:, None] * free - c_pp @ free)
        g_pc = -(c_pc.sum(1)[:, None] * free - c_pc @ self.cells)
        return value, 2 * g_pp / m**2 - 2 * g_pc / m

    def value(self, points, pinned=None) -> float:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        free = pts[self.free_mask(pts, pinned)]
        if len(free) == 0:
            raise InvalidInputError("no sample points outside the exclusion disk")
        return self._interactions(free, False)[0]

    def value_and_gradient(self, points, pinned=None):
        """Value and gradient w.r.t. every point, shape ``(M, 2)``; zero on excluded points."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        mask = self.free_mask(pts, pinned)
        if not mask.any():
            raise InvalidInputError("no sample points outside the exclusion disk")
        value, g = self._interactions(pts[mask], True)
        grad = np.zeros_like(pts)
        grad[mask] = g
        return value, grad

    def gradient(self, points, pinned=None) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        if not self.free_mask(pts, pinned).any():
            return np.zeros_like(pts)
        return self.value_and_gradient(pts, pinned)[1]


def _pinned_mask(scheme: SamplingScheme, constraints: ConstraintSpec | None = None) -> np.ndarray:
    mask = np.zeros((scheme.n_shots, scheme.p), dtype=bool)
    mask[:, : scheme.fixed_prefix_len] = True
    if constraints is not None and constraints.pinned_points:
        mask |= constraints.pin_arrays(scheme.n_shots, scheme.p)[0]
    return mask.ravel()


def discrepancy(scheme: SamplingScheme, rho: DensityGrid, k: DiscrepancyKernel, exclusion_radius: float = 0.0) -> float:
    """Discrepancy between the free points of ``scheme`` and ``rho``.

    Points in the pinned prefix and inside the exclusion disk are dropped,
    as is density mass inside the disk; both measures are renormalized.
    Self-interactions use the guarded value ``h(delta)`` on both sides, so
    a point mass matched by a single cell at the same location gives 0.
    """
    return DiscrepancyField(rho, k, exclusion_radius).value(scheme.flat(), _pinned_mask(scheme))


def discrepancy_gradient(scheme: SamplingScheme, rho: DensityGrid, k: DiscrepancyKernel, exclusion_radius: float = 0.0) -> np.ndarray:
    """Analytic gradient, shape ``(n_shots, P, 2)``, zero on pinned and excluded points."""
    g = DiscrepancyField(rho, k, exclusion_radius).gradient(scheme.flat(), _pinned_mask(scheme))
    return g.reshape(scheme.points.shape)


# --------------------------------------------------------------------------
# radial prefix


@dataclass(frozen=True)
class RadialPrefix:
    """Pinned straight segments leaving the origin, one per shot."""

    points: np.ndarray  # (n_shots, length, 2)
    exclusion_radius: float

    @property
    def length(self) -> int:
        return self.points.shape[1]

    def pins(self):
        return tuple(
            (s, i, (float(x), float(y)))
            for s in range(self.points.shape[0])
            for i, (x, y) in enumerate(self.points[s])
        )


def radial_prefix(
    constraints: ConstraintSpec,
    n_shots: int,
    shannon_gap: float | None = None,
    n_grid: int = 32,
    max_len: int | None = None,
) -> RadialPrefix:
    """Radial segments at maximal acceleration, then maximal speed.

    Shot ``s`` leaves the origin along angle ``2 pi s / n_shots`` with
    step lengths ``min(k * beta, alpha)``.  The prefix stops at the first
    radius ``r`` where neighboring shots are ``shannon_gap`` apart
    (``2 r sin(pi / n_shots) >= shannon_gap``); ``shannon_gap`` defaults to
    half a pixel, ``pi / n_grid``.  The exclusion radius is that final
    radius.
    """
    if n_shots < 1:
        raise InvalidParameterError(f"n_shots must be >= 1, got {n_shots}")
    gap = math.pi / n_grid if shannon_gap is None else float(shannon_gap)
    if n_shots == 1:
        return RadialPrefix(np.zeros((1, 1, 2)), 0.0)
    alpha, beta = constraints.alpha, constraints.beta
    spread = 2 * math.sin(math.pi / n_shots)
    radii = [0.0]
    k = 0
    while spread * radii[-1] < gap:
        k += 1
        step = min(k * beta, alpha)
        radii.append(radii[-1] + step)
        if radii[-1] > math.pi or (max_len is not None and len(radii) > max_len):
            raise InvalidParameterError(
                f"constraints alpha={alpha:g}, beta={beta:g} too tight: prefix does not "
                f"reach spacing {gap:g} within {len(radii) - 1} steps"
            )
    radii = np.asarray(radii)
    angles = 2 * np.pi * np.arange(n_shots) / n_shots
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    pts = radii[None, :, None] * dirs[:, None, :]
    return RadialPrefix(pts, float(radii[-1]))


# --------------------------------------------------------------------------
# constraint projection


def _d1(x):
    return x[:, 1:] - x[:, :-1]


def _d2(x):
    return x[:, 2:] - 2 * x[:, 1:-1] + x[:, :-2]


def _d1t(q, p):
    out = np.zeros(q.shape[:1] + (p,) + q.shape[2:])
    out[:, :-1] -= q
    out[:, 1:] += q
    return out


def _d2t(q, p):
    out = np.zeros(q.shape[:1] + (p,) + q.shape[2:])
    out[:, :-2] += q
    out[:, 1:-1] -= 2 * q
    out[:, 2:] += q
    return out


def _ball_residual(v, radius):
    """``v - Pi_ball(v)`` row-wise."""
    n = np.sqrt(v[..., 0] ** 2 + v[..., 1] ** 2)
    scale = np.maximum(0.0, 1.0 - radius / np.maximum(n, 1e-300))
    return v * scale[..., None]


def constraint_violation(points, constraints: ConstraintSpec, pin_mask=None, pin_values=None) -> float:
    """Largest violation of speed, acceleration, box and pin constraints."""
    x = np.asarray(points, dtype=np.float64)
    worst = max(0.0, float(np.abs(x).max() - math.pi))
    if x.shape[1] >= 2:
        d = _d1(x)
        worst = max(worst, float(np.sqrt((d * d).sum(-1).max()) - constraints.alpha))
    if x.shape[1] >= 3:
        d = _d2(x)
        worst = max(worst, float(np.sqrt((d * d).sum(-1).max()) - constraints.beta))
    if pin_mask is not None and pin_mask.any():
        worst = max(worst, float(np.abs(x[pin_mask] - pin_values[pin_mask]).max()))
    return worst


class ConstraintProjector:
    """Euclidean projection onto the kinematic constraint set, with warm starts.

    Solves ``min 1/2 |x - z|^2`` subject to ``x`` in the box with pins fixed,
    ``|D1 x| <= alpha`` and ``|D2 x| <= beta`` row-wise, by FISTA on the
    dual of the splitting ``y = (D1 x, D2 x)``.  The primal iterate
    ``x(q) = Pi_X(z - D1^T q1 - D2^T q2)`` always satisfies the box and
    pins exactly; the dual state is kept between calls.
    """

    def __init__(self, constraints: ConstraintSpec, n_shots: int, p: int, tol: float = 1e-9, max_iter: int = 50_000):
        self.constraints = constraints
        self.shape = (n_shots, p, 2)
        self.pin_mask, self.pin_values = constraints.pin_arrays(n_shots, p)
        self.tol = tol
        self.max_iter = max_iter
        self.check_every = 5
        # when False, stop at the first feasible primal iterate (fast, inexact projection)
        self.stationary = True
        self.q1 = np.zeros((n_shots, max(p - 1, 0), 2))
        self.q2 = np.zeros((n_shots, max(p - 2, 0), 2))
        # |D1|^2 <= 4 and |D2|^2 <= 16
        self.step = 1.0 / (4.0 + (16.0 if p >= 3 else 0.0))

    def _primal(self, z, q1, q2):
        p = self.shape[1]
        x = z.copy()
        if p >= 2:
            x -= _d1t(q1, p)
        if p >= 3:
            x -= _d2t(q2, p)
        np.clip(x, -math.pi, math.pi, out=x)
        x[self.pin_mask] = self.pin_values[self.pin_mask]
        return x

    def violation(self, x) -> float:
        return constraint_violation(x, self.constraints, self.pin_mask, self.pin_values)

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64).reshape(self.shape)
        if not np.all(np.isfinite(z)):
            raise InvalidInputError("points must be finite")
        if self.violation(z) <= self.tol:
            return z.copy()
        p = self.shape[1]
        a, b, t = self.constraints.alpha, self.constraints.beta, self.step
        q1, q2 = self.q1, self.q2
        y1, y2 = q1.copy(), q2.copy()
        mom = 1.0
        x_prev = None
        worst = np.inf
        for it in range(self.max_iter):
            x = self._primal(z, y1, y2)
            if it % self.check_every == 0:
                worst = self.violation(x)
                settled = not self.stationary or (
                    x_prev is not None and np.abs(x - x_prev).max() <= self.tol
                )
                if worst <= self.tol and settled:
                    self.q1, self.q2 = q1, q2
                    return x
                x_prev = x
            # prox of the support function through Moreau: t * (v - Pi_Y(v)), v = y/t + A x
            n1 = t * _ball_residual(y1 / t + _d1(x), a) if p >= 2 else y1
            n2 = t * _ball_residual(y2 / t + _d2(x), b) if p >= 3 else y2
            # gradient-based restart of the momentum
            if np.vdot(y1 - n1, n1 - q1) + np.vdot(y2 - n2, n2 - q2) > 0:
                mom = 1.0
            mom_next = 0.5 * (1 + math.sqrt(1 + 4 * mom * mom))
            beta_m = (mom - 1) / mom_next
            y1 = n1 + beta_m * (n1 - q1)
            y2 = n2 + beta_m * (n2 - q2)
            q1, q2, mom = n1, n2, mom_next
        self.q1 = np.zeros_like(self.q1)
        self.q2 = np.zeros_like(self.q2)
        raise ConvergenceError(
            f"constraint projection did not converge in {self.max_iter} iterations "
            f"(worst violation {worst:.3e})",
            worst,
        )


def project_constraints(scheme: SamplingScheme, constraints: ConstraintSpec, tol: float = 1e-9, max_iter: int = 50_000) -> SamplingScheme:
    """Project every shot onto box, speed, acceleration and pin constraints."""
    proj = ConstraintProjector(constraints, scheme.n_shots, scheme.p, tol, max_iter)
    return SamplingScheme(proj(scheme.points), scheme.fixed_prefix_len)


# --------------------------------------------------------------------------
# sampler


@dataclass
class SamplerTrace:
    values: list
    best_iteration: int


def sample_scheme(
    rho: DensityGrid,
    constraints: ConstraintSpec,
    cfg: SamplerConfig,
    init: SamplingScheme,
    return_trace: bool = False,
):
    """Projected gradient descent on the discrepancy from ``init``.

    Runs ``cfg.iterations`` steps of ``x <- Pi(x - tau * (M'/2) grad D(x))``
    and returns the iterate (including the projected init) with the lowest
    discrepancy.
    """
    field_ = DiscrepancyField(rho, cfg.kernel, cfg.exclusion_radius)
    proj = ConstraintProjector(constraints, init.n_shots, init.p, tol=INNER_TOL)
    proj.stationary = False
    pinned = _pinned_mask(init, constraints)
    x0 = proj(init.points)
    x = x0
    best_x, best_v, best_j = x, np.inf, 0
    values = []
    for j in range(cfg.iterations + 1):
        flat = x.reshape(-1, 2)
        v, g = field_.value_and_gradient(flat, pinned)
        values.append(v)
        if v < best_v:
            best_x, best_v, best_j = x, v, j
        if j == cfg.iterations:
            break
        n_free = int(field_.free_mask(flat, pinned).sum())
        x = proj(x - cfg.step_scale * 0.5 * n_free * g.reshape(x.shape))
    # polish the winner to the tight tolerance; fall back to the init if that loses
    proj.tol, proj.stationary = FINAL_TOL, True
    out = proj(best_x)
    if best_j > 0 and field_.value(out.reshape(-1, 2), pinned) > field_.value(proj(x0).reshape(-1, 2), pinned):
        out, best_j = proj(x0), 0
    scheme = SamplingScheme(out, init.fixed_prefix_len)
    if return_trace:
        return scheme, SamplerTrace(values, best_j)
    return scheme


def neighbor_spacing(scheme: SamplingScheme, center_radius: float, n_grid: int) -> float:
    """Mean distance between consecutive free points inside a disk, in pixels.

    A pair ``(p, p+1)`` counts when both points lie within ``center_radius``
    of the origin and neither belongs to the pinned prefix.  Distances are
    converted to pixel units with the factor ``n_grid / (2 pi)``.
    """
    pts = scheme.points
    if scheme.p < 2:
        raise InvalidInputError("neighbor spacing needs P >= 2")
    inside = np.linalg.norm(pts, axis=-1) <= center_radius
    free = np.ones(scheme.p, dtype=bool)
    free[: scheme.fixed_prefix_len] = False
    ok = inside[:, 1:] & inside[:, :-1] & free[1:] & free[:-1]
    if not ok.any():
        raise InvalidInputError("no consecutive free pairs inside the center disk")
    d = np.linalg.norm(np.diff(pts, axis=1), axis=-1)[ok]
    return float(d.mean() * n_grid / (2 * math.pi))


def initial_scheme(rho: DensityGrid, prefix: RadialPrefix, p: int, seed: int = 0) -> SamplingScheme:
    """Prefix plus i.i.d. draws from ``rho`` (outside the exclusion disk).

    Draws are jittered uniformly within their cell, assigned to shots by
    polar angle in equal-size groups, and ordered within each shot by a
    greedy nearest-neighbor tour starting from the prefix end.  The result
    is usually infeasible and is meant to be projected.
    """
    n_shots, k = prefix.points.shape[:2]
    if p < k:
        raise InvalidParameterError(f"shot length {p} shorter than the prefix ({k})")
    rng = np.random.default_rng(seed)
    n_free = n_shots * (p - k)
    centers = rho.centers()
    w = rho.weights.ravel().copy()
    w[np.linalg.norm(centers, axis=1) < prefix.exclusion_radius] = 0.0
    if w.sum() <= 0:
        w = rho.weights.ravel().copy()
    h = 2 * math.pi / rho.resolution
    idx = rng.choice(len(w), size=n_free, p=w / w.sum())
    draws = centers[idx] + rng.uniform(-h / 2, h / 2, size=(n_free, 2))
    angle = np.mod(np.arctan2(draws[:, 1], draws[:, 0]) + math.pi / n_shots, 2 * math.pi)
    groups = np.argsort(angle, kind="stable").reshape(n_shots, p - k)
    pts = np.empty((n_shots, p, 2))
    pts[:, :k] = prefix.points
    for s in range(n_shots):
        pool = list(draws[groups[s]])
        cur = prefix.points[s, -1]
        for i in range(k, p):
            d = [np.sum((q - cur) ** 2) for q in pool]
            cur = pool.pop(int(np.argmin(d)))
            pts[s, i] = cur
    return SamplingScheme(pts, k)
