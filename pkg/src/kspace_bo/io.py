"""On-disk formats for images, densities and trajectories.

Rasters are a pair of files sharing a stem: ``<stem>.json`` holds
``{"n1", "n2", "dtype"}`` with dtype ``"c64"`` or ``"f32"``, and
``<stem>.bin`` holds the row-major little-endian buffer (complex values
interleaved real then imaginary).

Trajectories use ``<stem>.json`` with ``{"n_shots", "p", "fixed_prefix_len"}``
and ``<stem>.bin`` with little-endian float32 ``(kx, ky)`` pairs, shot-major.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import ImageGrid, SamplingScheme
from .errors import InvalidInputError

_DTYPES = {"c64": np.dtype("<c8"), "f32": np.dtype("<f4")}


def _stem(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".json", ".bin") else path


def write_raster(path, values, dtype: str = "c64") -> Path:
    """Write a 2D raster; returns the stem path."""
    if dtype not in _DTYPES:
        raise InvalidInputError(f"unknown dtype {dtype!r}")
    arr = np.asarray(values.values if isinstance(values, ImageGrid) else values)
    if arr.ndim != 2:
        raise InvalidInputError(f"raster must be 2D, got shape {arr.shape}")
    if dtype == "f32" and np.iscomplexobj(arr):
        if np.any(arr.imag != 0):
            raise InvalidInputError("f32 rasters cannot hold complex values")
        arr = arr.real
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    header = {"n1": int(arr.shape[0]), "n2": int(arr.shape[1]), "dtype": dtype}
    stem.with_suffix(".json").write_text(json.dumps(header, sort_keys=True))
    np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tofile(stem.with_suffix(".bin"))
    return stem


def read_raster(path) -> np.ndarray:
    stem = _stem(path)
    header = json.loads(stem.with_suffix(".json").read_text())
    dtype = _DTYPES.get(header.get("dtype"))
    if dtype is None:
        raise InvalidInputError(f"unknown dtype in {stem}.json: {header.get('dtype')!r}")
    n1, n2 = int(header["n1"]), int(header["n2"])
    data = np.fromfile(stem.with_suffix(".bin"), dtype=dtype)
    if data.size != n1 * n2:
        raise InvalidInputError(f"{stem}.bin holds {data.size} values, header says {n1 * n2}")
    return data.reshape(n1, n2)


def write_image(path, image: ImageGrid, dtype: str = "c64") -> Path:
    return write_raster(path, image, dtype)


def read_image(path) -> ImageGrid:
    return ImageGrid(read_raster(path))


def write_trajectory(path, scheme: SamplingScheme) -> Path:
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "n_shots": scheme.n_shots,
        "p": scheme.p,
        "fixed_prefix_len": scheme.fixed_prefix_len,
    }
    stem.with_suffix(".json").write_text(json.dumps(header, sort_keys=True))
    np.ascontiguousarray(scheme.points, dtype="<f4").tofile(stem.with_suffix(".bin"))
    return stem


def read_trajectory_buffer(path):
    """Raw float32 buffer of shape ``(n_shots, p, 2)`` and the header dict."""
    stem = _stem(path)
    header = json.loads(stem.with_suffix(".json").read_text())
    n_shots, p = int(header["n_shots"]), int(header["p"])
    data = np.fromfile(stem.with_suffix(".bin"), dtype="<f4")
    if data.size != n_shots * p * 2:
        raise InvalidInputError(f"{stem}.bin holds {data.size} floats, expected {n_shots * p * 2}")
    return data.reshape(n_shots, p, 2), header


def read_trajectory(path) -> SamplingScheme:
    data, header = read_trajectory_buffer(path)
    return SamplingScheme(data.astype(np.float64), int(header.get("fixed_prefix_len", 0)))
