import json
import math

import numpy as np
import pytest

from kspace_bo.errors import InvalidParameterError
from kspace_bo.io import read_raster, read_trajectory
from kspace_bo.pipeline import (
    RunConfig,
    baseline_radial_density,
    build_context,
    compare_kernels,
    context_scheme,
    detrended_amplitude,
    evaluate_density_cost,
    phantoms,
    run_optimize,
    scan_landscape,
    scheme_cost,
    scheme_from_density,
)

TINY = RunConfig(
    grid=16,
    n_shots=4,
    n_generators=400,
    L=3,
    k_train=3,
    k_test=2,
    n_init=3,
    n_evals=5,
    pool_size=50,
    n_starts=2,
    sampler_iterations=30,
    tv_iterations=30,
    baseline_sigmas=(1.0, 2.0),
    baseline_gammas=(1.5,),
    center_radius=math.pi / 2,
)


@pytest.fixture(scope="module")
def ctx():
    return build_context(TINY)


class TestPhantoms:
    def test_range_and_shape(self):
        x = phantoms(5, 24, seed=1)
        assert x.shape == (5, 24, 24)
        assert x.min() >= 0 and x.max() <= 1
        assert np.all(x[:, 0, 0] == 0)
        assert np.all(x.reshape(5, -1).std(axis=1) > 0.1)

    def test_seeded(self):
        assert np.array_equal(phantoms(3, seed=4), phantoms(3, seed=4))
        assert not np.array_equal(phantoms(3, seed=4), phantoms(3, seed=5))

    def test_train_test_disjoint(self, ctx):
        assert not any(np.array_equal(a, b) for a in ctx.train for b in ctx.test)


class TestConfig:
    def test_round_trip(self):
        d = json.loads(json.dumps(TINY.to_dict()))
        assert RunConfig.from_dict(d) == TINY

    def test_derived(self):
        cfg = RunConfig()
        assert cfg.shot_length == 32
        assert cfg.shannon == pytest.approx(2 * math.pi / 32)
        c = cfg.constraints()
        assert c.alpha == pytest.approx(cfg.shannon) and c.beta == pytest.approx(cfg.shannon)

    @pytest.mark.parametrize(
        "kw", [{"grid": 15}, {"undersampling": 0}, {"n_shots": 0}, {"n_shots": 200}, {"k_train": 0}]
    )
    def test_invalid(self, kw):
        with pytest.raises(InvalidParameterError):
            RunConfig(**kw)

    def test_unknown_key(self):
        with pytest.raises(InvalidParameterError):
            RunConfig.from_dict({"gird": 32})


class TestBaseline:
    def test_unit_mass_symmetric(self):
        rho = baseline_radial_density(2.0, 1.5, 3.0, 32)
        w = rho.weights
        assert w.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(w >= 0)
        np.testing.assert_allclose(w, w.T, atol=1e-15)
        np.testing.assert_allclose(w, w[::-1], atol=1e-15)
        np.testing.assert_allclose(w, w[:, ::-1], atol=1e-15)

    def test_radially_decreasing(self):
        w = baseline_radial_density(1.0, 1.5, 3.0, 32).weights
        profile = w[16, 16:]
        assert np.all(np.diff(profile) <= 1e-15)
        assert w.argmax() in {np.ravel_multi_index(ix, w.shape) for ix in [(15, 15), (15, 16), (16, 15), (16, 16)]}

    def test_rot90_exact(self):
        w = baseline_radial_density(1.5, 1.0, 3.0, 32).weights
        # exact up to floating-point rounding of the smoothing step
        assert np.abs(w - np.rot90(w)).max() <= 1e-14 * w.max()

    def test_golden_raster(self):
        """Default desk baseline (sigma 1, gamma 1.5, level 3, 32x32), reference values."""
        w = baseline_radial_density().weights
        assert w[15, 15] == pytest.approx(0.01171342156925223, rel=1e-9)
        assert w.max() == w[15, 15]
        assert w[0, 0] == pytest.approx(2.0527636774783976e-05, rel=1e-9)
        assert w[15, 0] == pytest.approx(8.293781791812058e-05, rel=1e-9)
        assert w[10, 20] == pytest.approx(0.001209529585419809, rel=1e-9)

    def test_level_sets_center_weight(self):
        lo = baseline_radial_density(1.0, 1.5, 2.0, 32).weights
        hi = baseline_radial_density(1.0, 1.5, 4.0, 32).weights
        assert hi.max() > lo.max()


class TestCost:
    def test_deterministic(self, ctx):
        z = np.array([0.1, -0.2, 0.05])
        assert evaluate_density_cost(z, ctx) == evaluate_density_cost(z, ctx)

    def test_projection_inside(self, ctx):
        # a far point evaluates as its hull projection
        from kspace_bo.density import project_onto_hull

        z = np.array([50.0, 0.0, 0.0])
        zp = project_onto_hull(ctx.domain, z)
        assert evaluate_density_cost(z, ctx) == evaluate_density_cost(zp, ctx)

    def test_single_image_subset(self, ctx):
        scheme = context_scheme(np.zeros(3), ctx)
        per = [scheme_cost(scheme, ctx, ctx.train[i : i + 1]) for i in range(3)]
        assert scheme_cost(scheme, ctx) == pytest.approx(np.mean(per), rel=1e-12)


    def test_blank_image_costs_nothing(self, ctx):
        blank = np.zeros((1, 16, 16))
        for z in (np.zeros(3), ctx.domain.vertices[0]):
            assert evaluate_density_cost(z, ctx, blank) <= 1e-20


@pytest.mark.slow
def test_desk_baseline_cost_golden():
    """Training cost of the tuned desk baseline (sigma 3, gamma 0.75), reference run."""
    ctx = build_context(RunConfig(), with_basis=False)
    rho = baseline_radial_density(3.0, 0.75, 3.0, 32)
    assert scheme_cost(scheme_from_density(rho, ctx), ctx) == pytest.approx(0.5632534408961531, rel=1e-9)


class TestScan:
    def test_single_point_equals_cost(self, ctx):
        scheme = context_scheme(np.zeros(3), ctx)
        res = scan_landscape("shift", ctx, [0.0], [0.0], scheme=scheme)
        assert res["cost"].shape == (1, 1)
        assert res["cost"][0, 0] == pytest.approx(scheme_cost(scheme, ctx), rel=1e-12)

    def test_shift_periodic(self, ctx):
        # samples wrap onto the same Fourier phases after a full period
        scheme = context_scheme(np.zeros(3), ctx)
        res = scan_landscape("shift", ctx, [0.0, 2 * math.pi], [0.0], scheme=scheme)
        assert res["cost"][1, 0] == pytest.approx(res["cost"][0, 0], rel=1e-6)

    def test_density_plane(self, ctx):
        res = scan_landscape("density_plane", ctx, [-0.01, 0.0], [0.0], axes=(0, 2))
        assert res["cost"].shape == (2, 1)
        assert np.all(np.isfinite(res["cost"]))

    def test_bad_mode(self, ctx):
        with pytest.raises(InvalidParameterError):
            scan_landscape("diagonal", ctx, [0.0], [0.0])
        with pytest.raises(InvalidParameterError):
            scan_landscape("shift", ctx, [0.0], [0.0])


class TestDetrend:
    def test_quadratic_removed(self):
        x = np.linspace(-1, 1, 7)
        X, Y = np.meshgrid(x, x, indexing="ij")
        assert detrended_amplitude(3 + X - 2 * Y + X * X + 0.5 * X * Y - Y * Y, x, x) < 1e-12

    def test_oscillation_kept(self):
        x = np.linspace(-1, 1, 21)
        X, Y = np.meshgrid(x, x, indexing="ij")
        osc = 0.1 * np.cos(8 * math.pi * X)
        amp = detrended_amplitude(X**2 + osc, x, x)
        assert amp == pytest.approx(0.2, rel=0.1)

    def test_small_surface(self):
        assert detrended_amplitude(np.array([[1.0, 3.0]]), [0.0], [0.0, 1.0]) == 2.0


def test_compare_kernels(ctx):
    rho = baseline_radial_density(1.0, 1.5, 3.0, 16)
    a = compare_kernels(ctx, rho, init_seeds=(0, 1))
    assert set(a) == {"linear", "sqrt", "log"}
    for row in a.values():
        assert set(row) == {"psnr_mean", "psnr_std", "d"}
        assert row["d"] > 0 and np.isfinite(row["psnr_mean"])
    assert compare_kernels(ctx, rho, init_seeds=(0, 1)) == a


def test_scheme_from_density_seeded(ctx):
    rho = baseline_radial_density(1.0, 1.5, 3.0, 16)
    a = scheme_from_density(rho, ctx, seed=3)
    b = scheme_from_density(rho, ctx, seed=3)
    assert np.array_equal(a.points, b.points)


def test_run_optimize_artifacts(tmp_path):
    rep = run_optimize(TINY, tmp_path)
    for name in ("config.json", "history.jsonl", "report.json", "timings.json", "basis"):
        assert (tmp_path / name).exists()
    assert RunConfig.from_dict(json.loads((tmp_path / "config.json").read_text())) == TINY
    back = json.loads((tmp_path / "report.json").read_text())
    assert back["n_evaluations"] == TINY.n_evals == rep.n_evaluations
    assert len(back["heldout_psnr"]) == TINY.k_test
    assert len(back["baseline"]["table"]) == 2
    rho = read_raster(tmp_path / rep.best_density)
    assert rho.shape == (16, 16) and rho.sum() == pytest.approx(1.0, abs=1e-5)
    scheme = read_trajectory(tmp_path / rep.best_trajectory)
    assert scheme.points.shape == (TINY.n_shots, TINY.shot_length, 2)
    hist = [json.loads(line) for line in (tmp_path / "history.jsonl").read_text().splitlines()]
    assert min(h["f"] for h in hist) == rep.best_cost
