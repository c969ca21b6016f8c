import json

import numpy as np
import pytest

from kspace_bo.core import ImageGrid, SamplingScheme
from kspace_bo.errors import InvalidInputError
from kspace_bo.io import (
    read_image,
    read_raster,
    read_trajectory,
    read_trajectory_buffer,
    write_image,
    write_raster,
    write_trajectory,
)


def test_complex_image_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    v = (rng.standard_normal((6, 4)) + 1j * rng.standard_normal((6, 4))).astype(np.complex64)
    stem = write_image(tmp_path / "img", ImageGrid(v))
    header = json.loads(stem.with_suffix(".json").read_text())
    assert header == {"n1": 6, "n2": 4, "dtype": "c64"}
    raw = np.fromfile(stem.with_suffix(".bin"), dtype="<f4")
    # real and imaginary parts interleaved, row-major
    assert raw[0] == v[0, 0].real and raw[1] == v[0, 0].imag and raw[2] == v[0, 1].real
    back = read_image(stem)
    assert back.values.astype(np.complex64).tobytes() == v.tobytes()


def test_f32_raster_round_trip(tmp_path):
    v = np.random.default_rng(1).random((8, 8)).astype(np.float32)
    stem = write_raster(tmp_path / "r", v, "f32")
    assert read_raster(stem).tobytes() == v.tobytes()


def test_f32_rejects_complex(tmp_path):
    with pytest.raises(InvalidInputError):
        write_raster(tmp_path / "r", np.ones((2, 2)) * 1j, "f32")


def test_bad_buffer_length(tmp_path):
    stem = write_raster(tmp_path / "r", np.ones((4, 4)), "f32")
    stem.with_suffix(".bin").write_bytes(b"\0" * 8)
    with pytest.raises(InvalidInputError):
        read_raster(stem)


def test_trajectory_round_trip(tmp_path):
    pts = np.random.default_rng(2).uniform(-np.pi, np.pi, (3, 5, 2)).astype(np.float32)
    scheme = SamplingScheme(pts.astype(np.float64), 2)
    stem = write_trajectory(tmp_path / "t", scheme)
    buf, header = read_trajectory_buffer(stem)
    assert header == {"n_shots": 3, "p": 5, "fixed_prefix_len": 2}
    assert buf.tobytes() == pts.tobytes()
    back = read_trajectory(stem)
    assert back.fixed_prefix_len == 2
    assert np.array_equal(back.points, scheme.points)
