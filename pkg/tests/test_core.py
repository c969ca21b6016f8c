import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kspace_bo.core import (
    PSNR_CAP,
    ConstraintSpec,
    HardwareParams,
    ImageGrid,
    SamplingScheme,
    hardware_constraints,
    lattice_positions,
    psnr,
    shannon_dt,
    speed_acceleration,
)
from kspace_bo.errors import InvalidInputError, InvalidParameterError


class TestTypes:
    def test_image_grid_validates(self):
        with pytest.raises(InvalidInputError):
            ImageGrid(np.zeros((3, 4)))
        with pytest.raises(InvalidInputError):
            ImageGrid(np.zeros(4))
        img = ImageGrid(np.ones((4, 6)))
        assert img.shape == (4, 6) and img.values.dtype == np.complex128
        assert not img.values.flags.writeable

    def test_lattice_positions_centered(self):
        p = lattice_positions(4, 4)
        assert p.shape == (16, 2)
        assert p.min() == -2 and p.max() == 1
        # pixel (2, 2) is the origin
        assert np.all(p[2 * 4 + 2] == 0)

    def test_scheme_shape_and_prefix(self):
        s = SamplingScheme(np.zeros((3, 5, 2)), 2)
        assert (s.n_shots, s.p, s.m) == (3, 5, 15)
        assert s.flat().shape == (15, 2)
        with pytest.raises(InvalidInputError):
            SamplingScheme(np.zeros((3, 5, 3)))
        with pytest.raises(InvalidInputError):
            SamplingScheme(np.zeros((3, 5, 2)), 6)

    def test_translated_keeps_digest_distinct(self):
        s = SamplingScheme(np.zeros((1, 4, 2)))
        t = s.translated((0.1, 0.0))
        assert np.allclose(t.points[..., 0], 0.1)
        assert s.digest() != t.digest()

    def test_constraint_spec_invariants(self):
        with pytest.raises(InvalidParameterError):
            ConstraintSpec(0.0, 1.0)
        with pytest.raises(InvalidParameterError):
            ConstraintSpec(1.0, -1.0)
        with pytest.raises(InvalidParameterError):
            ConstraintSpec(1.0, 1.0, ((0, 0, (4.0, 0.0)),))
        c = ConstraintSpec(1.0, 1.0, ((1, 2, (0.5, -0.5)),))
        mask, vals = c.pin_arrays(2, 4)
        assert mask.sum() == 1 and mask[1, 2]
        assert np.all(vals[1, 2] == (0.5, -0.5))
        with pytest.raises(InvalidInputError):
            c.pin_arrays(1, 4)


class TestHardware:
    def test_golden_alpha_beta(self):
        """40 mT/m, 180 T/m/s, k_max 2 pi, 42.57 MHz/T, dt 4 us."""
        c = hardware_constraints(HardwareParams(dt=0.004))
        assert c.alpha == pytest.approx(1.0840361483875176, rel=1e-12)
        assert c.beta == pytest.approx(0.019512650670975316, rel=1e-12)
        assert c.pinned_points == ()

    def test_dt_scaling(self):
        a = hardware_constraints(HardwareParams(dt=0.004))
        b = hardware_constraints(HardwareParams(dt=0.008))
        assert b.alpha == pytest.approx(2 * a.alpha)
        assert b.beta == pytest.approx(4 * a.beta)

    @pytest.mark.parametrize("field", ["g_max", "s_max", "k_max", "gyro", "dt"])
    def test_nonpositive_rejected(self, field):
        with pytest.raises(InvalidParameterError):
            HardwareParams(**{field: 0.0})

    def test_shannon_dt(self):
        hw = HardwareParams()
        dt = shannon_dt(hw, 64)
        c = hardware_constraints(HardwareParams(dt=dt))
        assert c.alpha == pytest.approx(2 * math.pi / 64, rel=1e-12)

    def test_default_dt_is_shannon(self):
        c = hardware_constraints(HardwareParams(), n=32)
        assert c.alpha == pytest.approx(2 * math.pi / 32, rel=1e-12)
        ref = hardware_constraints(HardwareParams(dt=shannon_dt(HardwareParams(), 32)))
        assert c.beta == pytest.approx(ref.beta, rel=1e-12)
        with pytest.raises(InvalidParameterError):
            hardware_constraints(HardwareParams())


class TestSpeedAcceleration:
    def test_constant(self):
        assert speed_acceleration(SamplingScheme(np.ones((1, 5, 2)))) == (0.0, 0.0)

    def test_straight_line(self):
        pts = np.stack([np.arange(6.0), np.zeros(6)], axis=1)[None]
        assert speed_acceleration(SamplingScheme(pts)) == (1.0, 0.0)

    def test_corner(self):
        pts = np.array([[[0, 0], [1, 0], [1, 1]]], dtype=float)
        v, a = speed_acceleration(SamplingScheme(pts))
        assert v == 1.0
        assert a == pytest.approx(math.sqrt(2))

    def test_short_shot(self):
        with pytest.raises(InvalidInputError):
            speed_acceleration(SamplingScheme(np.zeros((1, 2, 2))))

    @given(
        st.integers(0, 2**31 - 1),
        st.floats(-3, 3),
        st.floats(-3, 3),
        st.floats(0.1, 10),
    )
    @settings(max_examples=50, deadline=None)
    def test_translation_and_scaling(self, seed, dx, dy, c):
        pts = np.random.default_rng(seed).uniform(-1, 1, (2, 7, 2))
        v, a = speed_acceleration(SamplingScheme(pts))
        vt, at = speed_acceleration(SamplingScheme(pts + (dx, dy)))
        vs, as_ = speed_acceleration(SamplingScheme(c * pts))
        assert vt == pytest.approx(v, rel=1e-9, abs=1e-12)
        assert at == pytest.approx(a, rel=1e-9, abs=1e-12)
        assert vs == pytest.approx(c * v, rel=1e-9)
        assert as_ == pytest.approx(c * a, rel=1e-9)


class TestPsnr:
    def test_identical(self):
        x = np.random.default_rng(0).random((4, 4))
        assert psnr(x, x) == PSNR_CAP

    def test_zero_candidate(self):
        assert psnr(np.ones((4, 4)), np.zeros((4, 4))) == pytest.approx(0.0)

    def test_twenty_db(self):
        assert psnr(np.ones((4, 4)), np.full((4, 4), 0.9)) == pytest.approx(20.0)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            psnr(np.ones((4, 4)), np.ones((2, 2)))

    def test_monotone_in_noise(self):
        rng = np.random.default_rng(1)
        x = rng.random((16, 16))
        levels = [0.01, 0.03, 0.1, 0.3]
        means = [np.mean([psnr(x, x + s * rng.standard_normal(x.shape)) for _ in range(20)]) for s in levels]
        assert all(a > b for a, b in zip(means, means[1:]))
