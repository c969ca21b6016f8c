"""Shared geometry: images, sampling schemes, kinematic constraints and metrics.

Conventions
-----------
* k-space coordinates are in radians per pixel, the sampling box is
  ``[-pi, pi]^2`` and one pixel of the image grid corresponds to a k-space
  spacing of ``2*pi/n`` (the Shannon spacing).
* An image of shape ``(n1, n2)`` stores pixel ``(i, j)`` at the lattice
  position ``(i - n1/2, j - n2/2)``; the first array axis is the first
  k-space coordinate.
* A sampling scheme is stored as a float array of shape ``(n_shots, P, 2)``.

Units for hardware constraints
------------------------------
:class:`HardwareParams` takes the customary scanner units (mT/m, T/m/s,
MHz/T, ms).  :func:`hardware_constraints` converts them to SI
(T/m, T/m/s, Hz/T, s) in one place, ``_to_si``, and evaluates

    alpha = dt * gyro * g_max / k_max
    beta  = dt**2 * gyro * s_max / k_max

with ``k_max`` used as given.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidInputError, InvalidParameterError

#: value returned by :func:`psnr` when the two images are identical
PSNR_CAP = 200.0


@dataclass(frozen=True)
class ImageGrid:
    """Complex image on the centered integer lattice."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise InvalidInputError(f"image must be 2D, got shape {v.shape}")
        n1, n2 = v.shape
        if n1 < 2 or n2 < 2 or n1 % 2 or n2 % 2:
            raise InvalidInputError(f"image sides must be even and >= 2, got {v.shape}")
        v = np.array(v, dtype=np.complex128)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n1(self) -> int:
        return self.values.shape[0]

    @property
    def n2(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def positions(self) -> np.ndarray:
        """Lattice positions ``p_n`` as an array of shape ``(n1*n2, 2)``, row-major."""
        return lattice_positions(self.n1, self.n2)

    @classmethod
    def zeros(cls, n1, n2=None):
        return cls(np.zeros((n1, n1 if n2 is None else n2), dtype=np.complex128))


def lattice_positions(n1: int, n2: int) -> np.ndarray:
    a = np.arange(n1) - n1 // 2
    b = np.arange(n2) - n2 // 2
    pa, pb = np.meshgrid(a, b, indexing="ij")
    return np.stack([pa.ravel(), pb.ravel()], axis=1).astype(np.float64)


@dataclass(frozen=True)
class SamplingScheme:
    """Ordered shots of 2D k-space points.

    Parameters
    ----------
    points : array_like, shape (n_shots, P, 2)
        Sample locations in radians.
    fixed_prefix_len : int
        Number of leading points per shot that are pinned (radial prefix).
    """

    points: np.ndarray
    fixed_prefix_len: int = 0

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim == 2 and pts.shape[1] == 2:
            pts = pts[None]
        if pts.ndim != 3 or pts.shape[2] != 2:
            raise InvalidInputError(f"points must have shape (n_shots, P, 2), got {pts.shape}")
        if pts.shape[0] < 1 or pts.shape[1] < 1:
            raise InvalidInputError("scheme needs at least one shot with one point")
        if not 0 <= self.fixed_prefix_len <= pts.shape[1]:
            raise InvalidInputError(
                f"fixed_prefix_len={self.fixed_prefix_len} outside [0, {pts.shape[1]}]"
            )
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n_shots(self) -> int:
        return self.points.shape[0]

    @property
    def p(self) -> int:
        return self.points.shape[1]

    @property
    def m(self) -> int:
        return self.n_shots * self.p

    def flat(self) -> np.ndarray:
        """All points as a ``(M, 2)`` array, shot-major."""
        return self.points.reshape(-1, 2)

    def translated(self, shift) -> "SamplingScheme":
        return SamplingScheme(self.points + np.asarray(shift, dtype=np.float64), self.fixed_prefix_len)

    def digest(self) -> bytes:
        import hashlib

        return hashlib.sha256(np.ascontiguousarray(self.points).tobytes()).digest()


@dataclass(frozen=True)
class ConstraintSpec:
    """Kinematic constraint set: speed bound, acceleration bound and pinned points.

    ``pinned_points`` is a tuple of ``(shot, index, (kx, ky))`` triples
    encoding the affine constraint ``C xi = b``.
    """

    alpha: float
    beta: float
    pinned_points: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise InvalidParameterError(f"alpha must be > 0, got {self.alpha}")
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise InvalidParameterError(f"beta must be > 0, got {self.beta}")
        pins = []
        for shot, index, pos in self.pinned_points:
            pos = (float(pos[0]), float(pos[1]))
            if max(abs(pos[0]), abs(pos[1])) > math.pi:
                raise InvalidParameterError(f"pinned position {pos} outside [-pi, pi]^2")
            pins.append((int(shot), int(index), pos))
        object.__setattr__(self, "pinned_points", tuple(pins))

    def with_pins(self, pinned_points) -> "ConstraintSpec":
        return ConstraintSpec(self.alpha, self.beta, tuple(pinned_points))

    def pin_arrays(self, n_shots: int, p: int):
        """Boolean mask ``(n_shots, P)`` of pinned samples and their positions."""
        mask = np.zeros((n_shots, p), dtype=bool)
        values = np.zeros((n_shots, p, 2))
        for shot, index, pos in self.pinned_points:
            if not (0 <= shot < n_shots and 0 <= index < p):
                raise InvalidInputError(f"pin ({shot}, {index}) outside a {n_shots}x{p} scheme")
            mask[shot, index] = True
            values[shot, index] = pos
        return mask, values


@dataclass(frozen=True)
class HardwareParams:
    """Scanner limits in customary units.

    g_max in mT/m, s_max in T/m/s, k_max in rad, gyro in MHz/T, dt in ms.
    ``dt=None`` selects the interval at which ``alpha`` equals the Shannon
    spacing of the image grid (see :func:`shannon_dt`).
    """

    g_max: float = 40.0
    s_max: float = 180.0
    k_max: float = 2 * math.pi
    gyro: float = 42.57
    dt: float | None = None

    def __post_init__(self):
        for name in ("g_max", "s_max", "k_max", "gyro", "dt"):
            value = getattr(self, name)
            if name == "dt" and value is None:
                continue
            if not (value > 0 and math.isfinite(value)):
                raise InvalidParameterError(f"{name} must be strictly positive, got {value}")


def _to_si(hw: HardwareParams):
    """(g_max [T/m], s_max [T/m/s], gyro [Hz/T], dt [s], k_max)."""
    return hw.g_max * 1e-3, hw.s_max, hw.gyro * 1e6, hw.dt * 1e-3, hw.k_max


def hardware_constraints(hw: HardwareParams, n: int | None = None) -> ConstraintSpec:
    """Speed and acceleration bounds from scanner limits (no pinned points).

    ``n`` is the image size used to calibrate ``dt`` when ``hw.dt`` is None.
    """
    if hw.dt is None:
        if n is None:
            raise InvalidParameterError("dt is unset; pass the image size n to calibrate it")
        hw = replace(hw, dt=shannon_dt(hw, n))
    g, s, gyro, dt, k_max = _to_si(hw)
    alpha = dt * gyro * g / k_max
    beta = dt**2 * gyro * s / k_max
    return ConstraintSpec(alpha=alpha, beta=beta)


def shannon_dt(hw: HardwareParams, n: int) -> float:
    """Sampling interval (ms) such that ``alpha`` equals the Shannon spacing ``2*pi/n``."""
    g, gyro, k_max = hw.g_max * 1e-3, hw.gyro * 1e6, hw.k_max
    dt_s = (2 * math.pi / n) * k_max / (gyro * g)
    return dt_s * 1e3


def speed_acceleration(scheme: SamplingScheme) -> tuple[float, float]:
    """Largest first- and second-difference norms over all shots."""
    pts = scheme.points
    if pts.shape[1] < 3:
        raise InvalidInputError(f"each shot needs at least 3 points, got P={pts.shape[1]}")
    d1 = np.linalg.norm(np.diff(pts, axis=1), axis=-1)
    d2 = np.linalg.norm(pts[:, 2:] + pts[:, :-2] - 2 * pts[:, 1:-1], axis=-1)
    return float(d1.max()), float(d2.max())


def psnr(reference, candidate) -> float:
    """Peak signal-to-noise ratio in dB, peak = max modulus of ``reference``.

    Identical images give :data:`PSNR_CAP`.
    """
    ref = _values(reference)
    cand = _values(candidate)
    if ref.shape != cand.shape:
        raise InvalidInputError(f"shape mismatch {ref.shape} vs {cand.shape}")
    mse = np.mean(np.abs(ref - cand) ** 2)
    peak = np.max(np.abs(ref))
    if mse == 0:
        return PSNR_CAP
    if peak == 0:
        return -PSNR_CAP
    return float(min(PSNR_CAP, 10 * np.log10(peak**2 / mse)))


def _values(img) -> np.ndarray:
    return img.values if isinstance(img, ImageGrid) else np.asarray(img)
