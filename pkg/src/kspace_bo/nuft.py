"""Exact non-uniform discrete Fourier transform on the centered lattice.

The forward operator maps an image ``x`` to

    y[m] = Psi(xi_m) * sum_n x[n] * exp(-1j * <p_n, xi_m>)

by direct summation.  At the grid sizes targeted here (up to 64x64) the
dense ``M x N`` matrix fits comfortably in memory, so :class:`NudftOperator`
builds it once and reuses it for forward, adjoint and power iterations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ImageGrid, SamplingScheme
from .errors import InvalidInputError, InvalidParameterError

WINDOWS = ("dirac", "pixel_indicator")


@dataclass(frozen=True)
class InterpWindow:
    """Fourier transform ``Psi`` of the interpolation function.

    ``dirac`` gives ``Psi = 1``; ``pixel_indicator`` (indicator of one grid
    cell) gives ``sinc(kx/2) * sinc(ky/2)`` with ``sinc(t) = sin(t)/t``.
    """

    kind: str = "dirac"

    def __post_init__(self):
        if self.kind not in WINDOWS:
            raise InvalidParameterError(f"unknown window {self.kind!r}, expected one of {WINDOWS}")

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        if self.kind == "dirac":
            return np.ones(len(pts))
        # np.sinc(u) = sin(pi u)/(pi u), so sinc(t/2) = np.sinc(t / (2 pi))
        return np.sinc(pts[:, 0] / (2 * np.pi)) * np.sinc(pts[:, 1] / (2 * np.pi))


def _as_points(scheme) -> np.ndarray:
    if isinstance(scheme, SamplingScheme):
        return scheme.flat()
    pts = np.asarray(scheme, dtype=np.float64)
    return pts.reshape(-1, 2)


class NudftOperator:
    """Dense NUDFT matrix for a fixed set of k-space points and image shape.

    Parameters
    ----------
    scheme : SamplingScheme or array_like of shape (..., 2)
    shape : (n1, n2)
    window : InterpWindow, optional
    """

    def __init__(self, scheme, shape, window: InterpWindow | None = None):
        pts = _as_points(scheme)
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("sampling points must be finite")
        n1, n2 = int(shape[0]), int(shape[1])
        self.points = pts
        self.shape = (n1, n2)
        self.window = window or InterpWindow()
        a = np.arange(n1) - n1 // 2
        b = np.arange(n2) - n2 // 2
        e1 = np.exp(-1j * np.outer(pts[:, 0], a))
        e2 = np.exp(-1j * np.outer(pts[:, 1], b))
        mat = (e1[:, :, None] * e2[:, None, :]).reshape(len(pts), n1 * n2)
        mat *= self.window(pts)[:, None]
        self.matrix = mat
        self._norm = None

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    @property
    def n(self) -> int:
        return self.matrix.shape[1]

    def forward(self, x) -> np.ndarray:
        """Apply to one image ``(n1, n2)`` or a stack ``(K, n1, n2)``."""
        x = np.asarray(x.values if isinstance(x, ImageGrid) else x)
        if x.shape[-2:] != self.shape:
            raise InvalidInputError(f"image shape {x.shape[-2:]} does not match {self.shape}")
        if x.ndim == 2:
            return self.matrix @ x.ravel()
        return x.reshape(x.shape[0], -1) @ self.matrix.T

    def adjoint(self, y) -> np.ndarray:
        """Conjugate transpose; ``y`` of shape ``(M,)`` or ``(K, M)``."""
        y = np.asarray(y)
        if y.shape[-1] != self.m:
            raise InvalidInputError(f"measurement length {y.shape[-1]} != M={self.m}")
        if y.ndim == 1:
            return (self.matrix.conj().T @ y).reshape(self.shape)
        return (y @ self.matrix.conj()).reshape((y.shape[0],) + self.shape)

    def normal(self, x) -> np.ndarray:
        return self.adjoint(self.forward(x))

    def spectral_norm(self, iters: int = 30, seed: int = 0) -> float:
        """Power-iteration estimate of the largest singular value.

        The estimate is the Rayleigh quotient ``||A v||`` of the last iterate,
        which is non-decreasing in ``iters``.
        """
        if iters < 1:
            raise InvalidParameterError(f"iters must be >= 1, got {iters}")
        rng = np.random.default_rng(seed)
        v = rng.standard_normal(self.shape) + 1j * rng.standard_normal(self.shape)
        v /= np.linalg.norm(v)
        for _ in range(iters):
            w = self.normal(v)
            nw = np.linalg.norm(w)
            if nw == 0:
                return 0.0
            v = w / nw
        return float(np.linalg.norm(self.forward(v)))

    def norm(self) -> float:
        """Cached spectral norm with the default iteration count and seed."""
        if self._norm is None:
            self._norm = self.spectral_norm()
        return self._norm


def forward(scheme, image: ImageGrid, win: InterpWindow | None = None) -> np.ndarray:
    image = image if isinstance(image, ImageGrid) else ImageGrid(image)
    return NudftOperator(scheme, image.shape, win).forward(image.values)


def adjoint(scheme, y, shape, win: InterpWindow | None = None) -> ImageGrid:
    op = NudftOperator(scheme, shape, win)
    return ImageGrid(op.adjoint(np.asarray(y, dtype=np.complex128)))


def spectral_norm(scheme, shape, win: InterpWindow | None = None, iters: int = 30, seed: int = 0) -> float:
    return NudftOperator(scheme, shape, win).spectral_norm(iters, seed)
