import json

import numpy as np
import pytest

from kspace_bo import cli
from kspace_bo.errors import ConvergenceError
from kspace_bo.io import read_trajectory, write_image
from kspace_bo.core import ImageGrid
from kspace_bo.pipeline import phantoms

SMALL = {
    "grid": 16,
    "n_shots": 4,
    "n_generators": 300,
    "L": 3,
    "k_train": 2,
    "k_test": 1,
    "n_init": 3,
    "n_evals": 4,
    "pool_size": 40,
    "n_starts": 1,
    "sampler_iterations": 20,
    "tv_iterations": 20,
    "baseline_sigmas": [1.0],
    "baseline_gammas": [1.5],
    "center_radius": 1.5,
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_pca_build_and_design(tmp_path, config, capsys):
    assert run("pca-build", "--config", config, "--out-dir", tmp_path) == 0
    assert (tmp_path / "basis").exists()
    assert run("design-init", "--config", config, "--out-dir", tmp_path, "--seed", 3) == 0
    design = json.loads((tmp_path / "design.json").read_text())
    assert design["seed"] == 3 and np.array(design["points"]).shape == (3, 3)
    assert "design points" in capsys.readouterr().out


def test_sample_then_reconstruct(tmp_path, config):
    assert run("sample", "--config", config, "--out-dir", tmp_path) == 0
    scheme = read_trajectory(tmp_path / "trajectory")
    assert scheme.points.shape == (4, 16, 2)
    write_image(tmp_path / "img", ImageGrid(phantoms(1, 16, seed=0)[0]))
    code = run("reconstruct", "--config", config, "--out-dir", tmp_path, "--trajectory", tmp_path / "trajectory", "--image", tmp_path / "img")
    assert code == 0
    metrics = json.loads((tmp_path / "reconstruction_metrics.json").read_text())
    assert metrics["psnr"] > 10


def test_optimize(tmp_path, config):
    assert run("optimize", "--config", config, "--out-dir", tmp_path, "--threads", 1) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["n_evaluations"] == 4


def test_scan_and_compare(tmp_path, config):
    assert run("scan", "--config", config, "--out-dir", tmp_path, "--points", 2, "--k", 1) == 0
    res = json.loads((tmp_path / "scan_shift.json").read_text())
    assert np.array(res["cost"]).shape == (2, 2)
    assert run("compare-kernels", "--config", config, "--out-dir", tmp_path, "--inits", 1) == 0
    assert set(json.loads((tmp_path / "kernels.json").read_text())) == {"linear", "sqrt", "log"}


@pytest.mark.parametrize(
    "content",
    ['{"grid": 15}', '{"no_such_key": 1}', "[1, 2]", "{not json", '{"grid": "big"}'],
)
def test_config_errors_exit_2(tmp_path, content, capsys):
    path = tmp_path / "bad.json"
    path.write_text(content)
    assert run("design-init", "--config", path, "--out-dir", tmp_path) == 2
    assert "error" in capsys.readouterr().err


def test_missing_input_exit_2(tmp_path, config):
    assert run("reconstruct", "--config", config, "--out-dir", tmp_path, "--trajectory", tmp_path / "none", "--image", tmp_path / "none") == 2
    assert run("design-init", "--config", tmp_path / "absent.json") == 2
    assert run("design-init", "--config", config, "--threads", 0, "--out-dir", tmp_path) == 2


def test_numerical_failure_exit_3(tmp_path, config, monkeypatch, capsys):
    def boom(args, cfg, out):
        raise ConvergenceError("did not converge", 1.0)

    monkeypatch.setitem(cli.COMMANDS, "sample", boom)
    assert run("sample", "--config", config, "--out-dir", tmp_path) == 3
    assert "numerical failure" in capsys.readouterr().err


def test_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2
