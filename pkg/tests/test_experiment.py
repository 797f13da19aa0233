import json

import numpy as np
import pytest

from cmaflab import experiment
from cmaflab.config import parse_config
from cmaflab.errors import SolverError
from cmaflab.experiment import EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, build_setup, run_config, run_experiment
from cmaflab.presets import GEOMETRY_PRESETS, CRF_PRESETS, build_geometry, preset_names

SMALL = "[geometry]\npreset = G1\nN = 16\n[schedule]\nsteps = 8\n"


def test_small_run_all_pass(tmp_path):
    res = run_config(parse_config(SMALL), tmp_path)
    assert res.status == EXIT_OK and res.report.passed
    assert [r.name for r in res.report.records] == list(parse_config(SMALL).checks["enabled"])


def test_seed_recorded_and_overridden(tmp_path):
    res = run_config(parse_config(SMALL + "[seed]\nvalue = 3\n"), tmp_path, seed=11)
    assert json.loads((tmp_path / "manifest.json").read_text())["seed"] == 11
    assert res.status == EXIT_OK


def test_random_sweep_uses_seed():
    cfg = parse_config(SMALL + "[checks]\nrandom_sweep = 2\n[seed]\nvalue = 5\n")
    a = experiment.sweep_values(cfg)
    b = experiment.sweep_values(cfg)
    assert a == b and len(a) == 5
    cfg.seed = 6
    assert experiment.sweep_values(cfg)[3:] != a[3:]


def test_flow_failure_exits_1(tmp_path, monkeypatch):
    real = experiment.run_flow

    def broken(*args, **kwargs):
        traj = real(*args, **kwargs)
        traj.failed, traj.failure = True, "t=0.5: injected"
        return traj

    monkeypatch.setattr(experiment, "run_flow", broken)
    res = run_config(parse_config(SMALL), tmp_path)
    assert res.status == EXIT_SOLVER
    assert res.report.records[0].name == "flow" and not res.report.passed
    assert json.loads((tmp_path / "manifest.json").read_text())["status"] == 1


def test_check_solver_error_exits_1(tmp_path, monkeypatch):
    def boom(self):
        raise SolverError("injected")

    monkeypatch.setattr(experiment._Runner, "check_barrier", boom)
    res = run_config(parse_config(SMALL), tmp_path)
    assert res.status == EXIT_SOLVER
    assert not res.report["barrier"].passed and res.report["uniform_bound"].passed


def test_config_error_writes_nothing(tmp_path):
    (tmp_path / "c.ini").write_text("[geometry]\npreset = G7\n")
    res = run_experiment(tmp_path / "c.ini", tmp_path / "out")
    assert res.status == EXIT_CONFIG and "G7" in res.message
    assert not (tmp_path / "out").exists()


@pytest.mark.parametrize("name", list(GEOMETRY_PRESETS) + list(CRF_PRESETS))
def test_geometry_presets_build(name):
    grid, path, rho, extras = build_geometry(name, 1, 16, 0.5)
    assert path.at(0.5).hermitian_defect() <= 1e-14
    assert rho.shape == grid.shape if isinstance(rho, np.ndarray) else rho.values.shape == grid.shape


def test_crf_horizon_too_long():
    with pytest.raises(Exception, match="horizon"):
        build_geometry("indefinite-chi", 1, 16, 2.0)


def test_setup_coarse_grid():
    cfg = parse_config(SMALL)
    assert build_setup(cfg, N=8).grid.N == 8


def test_preset_names_stable():
    names = preset_names()
    assert names == preset_names() and len(set(names)) == len(names)
