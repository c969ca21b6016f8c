"""Parametric sampling densities over the k-space box ``[-pi, pi]^2``.

The pipeline here is:

1. draw elementary densities (clipped anisotropic power laws, optionally
   Gaussian-smoothed) from a parameter box,
2. run an uncentered PCA on the rasters and turn the leading components into
   an affine family ``rho(z) = mu0 + sum_l z_l mu_l`` whose members all have
   unit mass,
3. describe the admissible coordinates as the convex hull of the projected
   generators, with a Euclidean projection onto that hull.

Rasters are sampled at cell centers and normalized to unit *cell mass*
(weights sum to one), not unit integral.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import (
    ConvergenceError,
    DegenerateFamilyError,
    InvalidInputError,
    InvalidParameterError,
)

MASS_TOL = 1e-9
HULL_TOL = 1e-7


def cell_centers(resolution: int) -> np.ndarray:
    """Centers of ``resolution`` equal cells covering ``[-pi, pi]``."""
    h = 2 * np.pi / resolution
    return -np.pi + h * (np.arange(resolution) + 0.5)


def cell_grid(resolution: int) -> np.ndarray:
    """Cell-center coordinates, shape ``(resolution, resolution, 2)``; axis 0 is kx."""
    c = cell_centers(resolution)
    kx, ky = np.meshgrid(c, c, indexing="ij")
    return np.stack([kx, ky], axis=-1)


@dataclass(frozen=True)
class ElementaryParams:
    """Parameters of one elementary density.

    The unnormalized profile is ``min(r, 1 / (q + eps)**gamma)`` with
    ``q = (x_theta/sigma_x)**2 + (y_theta/sigma_y)**2`` in the frame rotated
    by ``theta``.  ``kappa`` is the standard deviation (k-space units) of the
    Gaussian used to smooth the normalized profile; 0 disables smoothing.
    """

    sigma_x: float
    sigma_y: float
    theta: float
    r: float
    gamma: float
    eps: float = 1e-2
    kappa: float = 0.0

    def __post_init__(self):
        for name in ("sigma_x", "sigma_y", "r", "gamma", "eps"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise InvalidParameterError(f"{name} must be > 0, got {v}")
        if not (0 <= self.theta < math.pi):
            raise InvalidParameterError(f"theta must lie in [0, pi), got {self.theta}")
        if not (self.kappa >= 0 and math.isfinite(self.kappa)):
            raise InvalidParameterError(f"kappa must be >= 0, got {self.kappa}")


@dataclass(frozen=True)
class DensityGrid:
    """Nonnegative cell weights on ``[-pi, pi]^2`` summing to one."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise InvalidInputError(f"density raster must be 2D, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise InvalidInputError("density has non-finite weights")
        if w.min() < 0:
            raise InvalidInputError(f"density has negative weight {w.min():.3e}")
        if abs(w.sum() - 1.0) > MASS_TOL:
            raise InvalidInputError(f"density mass {w.sum():.12f} != 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_raster(cls, values) -> "DensityGrid":
        """Clip negatives and normalize to unit cell mass."""
        w = np.clip(np.asarray(values, dtype=np.float64), 0, None)
        total = w.sum()
        if not total > 0:
            raise InvalidInputError("raster has no positive mass")
        return cls(w / total)

    @property
    def resolution(self) -> int:
        return self.weights.shape[0]

    def centers(self) -> np.ndarray:
        return cell_grid(self.resolution).reshape(-1, 2)


# --------------------------------------------------------------------------
# elementary densities


def _profile(q, r, gamma, eps):
    # (q + eps)**(-gamma) overflows nowhere since q + eps >= eps > 0
    return np.minimum(r, (q + eps) ** (-gamma))


def _quadratic_form(grid, sigma_x, sigma_y, theta):
    x, y = grid[..., 0], grid[..., 1]
    c, s = np.cos(theta), np.sin(theta)
    xt = x * c + y * s
    yt = -s * x + c * y
    return (xt / sigma_x) ** 2 + (yt / sigma_y) ** 2


def _smooth(raster, kappa, resolution):
    if kappa <= 0:
        return raster
    sigma_cells = kappa * resolution / (2 * np.pi)
    out = gaussian_filter(raster, sigma_cells, mode="constant", cval=0.0, truncate=4.0)
    return out / out.sum()


def elementary_density(p: ElementaryParams, resolution: int = 64) -> DensityGrid:
    """Rasterize, normalize, smooth (zero padding) and renormalize one density."""
    if resolution < 2:
        raise InvalidParameterError(f"resolution must be >= 2, got {resolution}")
    q = _quadratic_form(cell_grid(resolution), p.sigma_x, p.sigma_y, p.theta)
    g = _profile(q, p.r, p.gamma, p.eps)
    g = g / g.sum()
    return DensityGrid.from_raster(_smooth(g, p.kappa, resolution))


@dataclass(frozen=True)
class GeneratorBox:
    """Parameter box for random elementary densities.

    The plateau ``r`` is not drawn directly: a target center level ``t`` is
    drawn from ``center_level`` and ``r`` is solved for so that the
    normalized (pre-smoothing) peak cell weight equals ``t`` times the
    Shannon-rate cell weight ``1 / (undersampling * resolution**2)``.

    The smoothing width is a fixed family-wide constant by default; pass a
    nondegenerate ``kappa`` interval to draw it per generator instead.
    """

    sigma: tuple = (math.pi / 16, math.pi)
    gamma: tuple = (0.5, 3.0)
    center_level: tuple = (1.0, 4.0)
    kappa: tuple = (math.pi / 16, math.pi / 16)
    eps: float = 1e-2
    undersampling: float = 0.25
    r_bounds: tuple = (1e-3, 1e8)


def _calibrate_r(q, gamma, eps, target, r_bounds, iters=50):
    """Vectorized bisection on log r so that max(g)/sum(g) == target.

    ``q`` has shape (B, R*R).  The peak-to-mass ratio is nondecreasing in r.
    """
    lo = np.full(len(q), math.log(r_bounds[0]))
    hi = np.full(len(q), math.log(r_bounds[1]))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        g = _profile(q, np.exp(mid)[:, None], gamma[:, None], eps)
        ratio = g.max(axis=1) / g.sum(axis=1)
        too_high = ratio > target
        hi = np.where(too_high, mid, hi)
        lo = np.where(too_high, lo, mid)
    return np.exp(0.5 * (lo + hi))


def random_generators(n: int, box: GeneratorBox = GeneratorBox(), resolution: int = 64, seed: int = 0):
    """Draw ``n`` elementary parameter sets uniformly in ``box``."""
    rng = np.random.default_rng(seed)
    sx = rng.uniform(*box.sigma, size=n)
    sy = rng.uniform(*box.sigma, size=n)
    theta = rng.uniform(0.0, math.pi, size=n)
    level = rng.uniform(*box.center_level, size=n)
    gamma = rng.uniform(*box.gamma, size=n)
    kappa = rng.uniform(*box.kappa, size=n)
    theta = np.where(theta >= math.pi, 0.0, theta)

    grid = cell_grid(resolution)
    shannon = 1.0 / (box.undersampling * resolution**2)
    r = np.empty(n)
    chunk = 256
    for start in range(0, n, chunk):
        sl = slice(start, min(n, start + chunk))
        q = np.stack(
            [_quadratic_form(grid, a, b, t).ravel() for a, b, t in zip(sx[sl], sy[sl], theta[sl])]
        )
        r[sl] = _calibrate_r(q, gamma[sl], box.eps, level[sl] * shannon, box.r_bounds)
    return [
        ElementaryParams(float(a), float(b), float(t), float(rr), float(g), box.eps, float(k))
        for a, b, t, rr, g, k in zip(sx, sy, theta, r, gamma, kappa)
    ]


def rasterize_family(generators, resolution: int = 64) -> np.ndarray:
    """Stack of elementary densities, shape ``(I, resolution, resolution)``."""
    return np.stack([elementary_density(p, resolution).weights for p in generators])


# --------------------------------------------------------------------------
# PCA basis and hull domain


@dataclass(frozen=True)
class DensityBasis:
    """Affine density family ``mu0 + sum_l z_l directions[l]``.

    ``mu0`` has unit mass; the directions have zero mass and are orthonormal.
    ``singular_values`` are those of the raster family (all of them when the
    PCA was dense, the leading ones otherwise) and ``total_energy`` is the
    squared Frobenius norm of the family.
    """

    mu0: np.ndarray
    directions: np.ndarray
    singular_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    total_energy: float = float("nan")

    def __post_init__(self):
        mu0 = np.array(self.mu0, dtype=np.float64)
        dirs = np.array(self.directions, dtype=np.float64)
        if dirs.ndim == 2:
            dirs = dirs[None]
        if mu0.ndim != 2 or dirs.shape[1:] != mu0.shape:
            raise InvalidInputError(f"incompatible shapes mu0 {mu0.shape}, directions {dirs.shape}")
        mu0.setflags(write=False)
        dirs.setflags(write=False)
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "directions", dirs)

    @property
    def L(self) -> int:
        return self.directions.shape[0]

    @property
    def resolution(self) -> int:
        return self.mu0.shape[0]

    def tail_energy_fraction(self) -> float:
        """Energy of the family outside the ``L + 1`` leading components, relative to the total."""
        kept = np.sum(self.singular_values[: self.L + 1] ** 2)
        return float(max(0.0, 1.0 - kept / self.total_energy))

    def coordinates(self, rasters) -> np.ndarray:
        """Coordinates of the orthogonal projection onto the affine family.

        ``rasters`` has shape ``(R, R)`` or ``(I, R, R)``.
        """
        x = np.asarray(rasters, dtype=np.float64)
        flat = x.reshape(-1, self.mu0.size) - self.mu0.ravel()
        z = flat @ self.directions.reshape(self.L, -1).T
        return z[0] if x.ndim == 2 else z

    def raw(self, z) -> np.ndarray:
        """``mu0 + sum_l z_l mu_l`` without clipping."""
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.L,):
            raise InvalidInputError(f"z must have shape ({self.L},), got {z.shape}")
        return self.mu0 + np.tensordot(z, self.directions, axes=1)


@dataclass(frozen=True)
class HullDomain:
    """Convex hull of ``I`` coordinate vectors in ``R^L``."""

    vertices: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise InvalidInputError(f"vertices must have shape (I, L), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("vertices must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    @property
    def L(self) -> int:
        return self.vertices.shape[1]

    @property
    def I(self) -> int:  # noqa: E743
        return self.vertices.shape[0]

    def bounding_box(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def contains(self, z, tol: float = HULL_TOL) -> bool:
        return hull_distance(self, z) <= tol


def _leading_svd(x, k, seed, power_iters=6, oversample=20):
    """Top-k singular triplets of ``x`` (I x N).

    Dense SVD when the matrix is small, randomized subspace iteration
    otherwise.  Returns ``(s, vt)`` with ``s`` sorted decreasingly.
    """
    n_rows, n_cols = x.shape
    if min(n_rows, n_cols) <= 2048:
        _, s, vt = np.linalg.svd(x, full_matrices=False)
        return s, vt
    rng = np.random.default_rng(seed)
    width = min(k + oversample, min(n_rows, n_cols))
    y = x @ rng.standard_normal((n_cols, width))
    q, _ = np.linalg.qr(y)
    for _ in range(power_iters):
        q, _ = np.linalg.qr(x.T @ q)
        q, _ = np.linalg.qr(x @ q)
    b = q.T @ x
    _, s, vt = np.linalg.svd(b, full_matrices=False)
    return s, vt


def basis_from_rasters(rasters, L: int, seed: int = 0):
    """PCA basis and hull domain from a stack of unit-mass rasters.

    Returns ``(DensityBasis, HullDomain)``.
    """
    x = np.asarray(rasters, dtype=np.float64)
    if x.ndim != 3:
        raise InvalidInputError(f"rasters must have shape (I, R, R), got {x.shape}")
    if L < 1:
        raise InvalidParameterError(f"L must be >= 1, got {L}")
    n_gen, res = x.shape[0], x.shape[1:]
    flat = x.reshape(n_gen, -1)
    if n_gen < L + 1:
        raise DegenerateFamilyError(n_gen, L + 1)

    s, vt = _leading_svd(flat, L + 1, seed)
    tol = s[0] * max(flat.shape) * np.finfo(float).eps * 10 if s.size else 0.0
    rank = int(np.sum(s > tol))
    if rank < L + 1:
        raise DegenerateFamilyError(rank, L + 1)

    u = vt[: L + 1].T  # (N, L+1), orthonormal columns
    if u[:, 0].sum() < 0:
        u[:, 0] = -u[:, 0]
    nu0 = u[:, 0]
    mu0 = nu0 / nu0.sum()

    # zero-mass subspace of span(u): orthogonal complement of the mass vector
    # in coefficient space, which drops one of the L + 1 dimensions
    mass = u.sum(axis=0)
    householder = np.linalg.qr(np.column_stack([mass, np.eye(L + 1)[:, :L]]))[0]
    coeffs = householder[:, 1:]
    dirs = (u @ coeffs).T
    # re-orthonormalize and remove residual mass from rounding
    dirs -= dirs.mean(axis=1, keepdims=True)
    q, _ = np.linalg.qr(dirs.T)
    dirs = q.T

    basis = DensityBasis(
        mu0=mu0.reshape(res),
        directions=dirs.reshape((L,) + res),
        singular_values=s,
        total_energy=float(np.sum(flat**2)),
    )
    return basis, HullDomain(basis.coordinates(x))


def build_basis(generators, L: int, resolution: int = 64, seed: int = 0):
    """Rasterize ``generators`` and build the PCA basis and hull domain."""
    return basis_from_rasters(rasterize_family(generators, resolution), L, seed)


def generate_density(basis: DensityBasis, z, clip: bool = True) -> DensityGrid:
    """Density at coordinates ``z``.

    Negative cells can only appear for coordinates outside the hull (or from
    truncation error in the projected generators); they are clipped to zero
    and the raster renormalized.  With ``clip=False`` a negative cell raises.
    """
    raw = basis.raw(z)
    if not np.all(np.isfinite(raw)):
        raise InvalidInputError("density coordinates must be finite")
    if raw.min() >= 0:
        return DensityGrid(raw / raw.sum())
    if not clip:
        raise InvalidInputError(f"density has negative weight {raw.min():.3e}")
    return DensityGrid.from_raster(raw)


# --------------------------------------------------------------------------
# projection onto the hull


def _affine_minimizer(pts):
    """Weights (summing to one) of the min-norm point of the affine hull of ``pts``."""
    k = len(pts)
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = pts @ pts.T
    kkt[:k, k] = 1.0
    kkt[k, :k] = 1.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    return sol[:k]


def hull_weights(domain: HullDomain, z, tol: float = 1e-14, max_iter: int = 10_000):
    """Convex weights of the point of the hull nearest to ``z``.

    Wolfe's minimum-norm-point method on the translated vertices
    ``v_i - z``: each major step adds the vertex minimizing the linear model,
    minor steps move to the affine minimizer of the active set while keeping
    weights nonnegative.  Terminates exactly for interior points.

    Returns ``(weights, residual)`` where ``residual`` is the final
    optimality gap ``||x||^2 - min_j <p_j, x>``.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (domain.L,):
        raise InvalidInputError(f"z must have shape ({domain.L},), got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("z must be finite")
    p = domain.vertices - z
    norms2 = np.einsum("ij,ij->i", p, p)
    scale = max(norms2.max(), np.finfo(float).tiny)
    active = [int(np.argmin(norms2))]
    lam = np.array([1.0])
    x = p[active[0]].copy()
    gap = np.inf
    for _ in range(max_iter):
        dots = p @ x
        j = int(np.argmin(dots))
        xx = x @ x
        gap = xx - dots[j]
        if gap <= tol * scale or xx <= 1e-30 * scale or j in active:
            break
        active.append(j)
        lam = np.append(lam, 0.0)
        while True:
            alpha = _affine_minimizer(p[active])
            if np.all(alpha > 1e-15):
                lam = alpha
                break
            neg = alpha <= 1e-15
            theta = np.min(lam[neg] / (lam[neg] - alpha[neg]))
            lam = lam + theta * (alpha - lam)
            keep = lam > 1e-15
            keep[np.argmin(np.where(neg, lam, np.inf))] = False
            active = [a for a, k in zip(active, keep) if k]
            lam = lam[keep]
            lam /= lam.sum()
            if len(active) == 1:
                break
        x = lam @ p[active]
    else:
        raise ConvergenceError("hull projection did not converge", gap)
    w = np.zeros(domain.I)
    w[active] = lam
    return w, max(float(gap), 0.0)


def project_onto_hull(domain: HullDomain, z, max_iter: int = 10_000) -> np.ndarray:
    """Euclidean projection of ``z`` onto the hull; ``z`` itself if already inside."""
    z = np.asarray(z, dtype=np.float64)
    w, _ = hull_weights(domain, z, max_iter=max_iter)
    proj = w @ domain.vertices
    if np.linalg.norm(proj - z) <= HULL_TOL:
        return z.copy()
    return proj


def hull_distance(domain: HullDomain, z) -> float:
    z = np.asarray(z, dtype=np.float64)
    w, _ = hull_weights(domain, z)
    return float(np.linalg.norm(w @ domain.vertices - z))


# --------------------------------------------------------------------------
# persistence


def save_basis(directory, basis: DensityBasis, domain: HullDomain, generator_spec: dict | None = None) -> Path:
    """Write a JSON manifest plus raw little-endian float32 buffers."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "L": basis.L,
        "resolution": basis.resolution,
        "n_vertices": domain.I,
        "generator": generator_spec or {},
        "singular_values": [float(v) for v in basis.singular_values],
        "total_energy": basis.total_energy,
        "rasters": "basis_rasters.bin",
        "vertices": "hull_vertices.bin",
    }
    (directory / "basis.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    stack = np.concatenate([basis.mu0[None], basis.directions])
    stack.astype("<f4").tofile(directory / manifest["rasters"])
    domain.vertices.astype("<f4").tofile(directory / manifest["vertices"])
    return directory


def load_basis(directory):
    """Read a basis written by :func:`save_basis`.

    float32 storage breaks the unit-mass and zero-mass identities at the
    1e-8 level, so they are restored in float64 on load.
    """
    directory = Path(directory)
    manifest = json.loads((directory / "basis.json").read_text())
    L, res = int(manifest["L"]), int(manifest["resolution"])
    stack = np.fromfile(directory / manifest["rasters"], dtype="<f4").astype(np.float64)
    stack = stack.reshape(L + 1, res, res)
    mu0 = stack[0] / stack[0].sum()
    dirs = stack[1:].reshape(L, -1)
    dirs -= dirs.mean(axis=1, keepdims=True)
    q, rr = np.linalg.qr(dirs.T)
    q = q * np.sign(np.diag(rr))
    basis = DensityBasis(
        mu0=mu0,
        directions=q.T.reshape(L, res, res),
        singular_values=np.asarray(manifest.get("singular_values", []), dtype=np.float64),
        total_energy=float(manifest.get("total_energy", float("nan"))),
    )
    verts = np.fromfile(directory / manifest["vertices"], dtype="<f4").astype(np.float64)
    domain = HullDomain(verts.reshape(int(manifest["n_vertices"]), L))
    return basis, domain, manifest


def box_to_dict(box: GeneratorBox) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(box).items()}
