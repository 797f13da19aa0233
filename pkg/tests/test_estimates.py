import numpy as np
import pytest

from cmaflab.errors import ConfigurationError
from cmaflab.estimates import (C0_curve, EstimateRecord, EstimateReport, check_barrier, check_comparison,
                               check_mass_monotonicity, check_parabolic_stability, check_semiconcavity,
                               check_time_derivative_bounds, check_uniform_bound, check_weighted_laplacian,
                               elliptic_barriers, nested_pole_sets, refinement_ratio, semiconcavity_constant,
                               sup_forcing_at_zero, time_derivative_constants, uniform_bound_constant)
from cmaflab.flow import (Schedule, constant_density, linear_forcing, model_density, run_flow, smooth_density,
                          zero_forcing)
from cmaflab.grid import HermitianField, build_flat_geometry, constant_path

import oracles


def _run(phi0=0.0, log_f=0.0, lam=0.0, N=8, steps=50, T=1.0, ratio=1.0):
    grid, omega, _ = build_flat_geometry(1, N)
    path = constant_path(omega, T)
    dens = constant_density(grid, np.exp(log_f))
    F = linear_forcing(lam)
    traj = run_flow(np.full(grid.shape, float(phi0)), path, dens, F, T, Schedule(T, steps, ratio))
    return grid, path, dens, F, traj


def test_anchor_uniform_bound():
    grid, path, dens, F, traj = _run()
    bar = elliptic_barriers(HermitianField.identity(grid), dens)
    rec = check_uniform_bound(traj, lam_F=F.lam_F, F0_sup=0.0, barriers=bar)
    assert rec.passed and rec.details["C"] == 0.0


def test_constant_data_uniform_bound():
    grid, path, dens, F, traj = _run(phi0=0.3, log_f=0.5)
    bar = elliptic_barriers(HermitianField.identity(grid), dens)
    C = uniform_bound_constant(0.0, 0.0, bar)
    # barriers of a constant density are zero, so C = max(-c_-, c_+) = 0.5
    assert C == pytest.approx(0.5, abs=1e-12)
    t = traj.times
    assert np.all(C0_curve(t, 0.3, 0.0, C) - np.abs(oracles.linear_ode(t, 0.3, 0.5, 0.0)) >= 0)
    rec = check_uniform_bound(traj, lam_F=0.0, F0_sup=0.0, barriers=bar)
    assert rec.passed and rec.margin > 0


def test_lambda_zero_limit():
    t = np.linspace(0, 1, 11)
    assert np.allclose(C0_curve(t, 0.2, 0.0, 1.5), 0.2 + 1.5 * t)
    assert np.allclose(C0_curve(t, 0.2, 1e-9, 1.5), 0.2 + 1.5 * t, atol=1e-8)


def test_uniform_bound_needs_barriers():
    *_, traj = _run(steps=5)
    with pytest.raises(ConfigurationError):
        check_uniform_bound(traj, lam_F=0.0, F0_sup=0.0, barriers=None)


def test_sup_forcing_at_zero():
    grid, *_ = build_flat_geometry(1, 8)
    assert sup_forcing_at_zero(linear_forcing(3.0), grid, 1.0) == 0.0


def test_anchor_barrier_negative_for_small_t():
    grid, path, dens, F, traj = _run()
    rec = check_barrier(traj, grid.zeros(), alpha=0.5, A=1.0, lam_F=0.0)
    assert rec.passed and rec.margin >= 0
    t = traj.times[1]
    assert t * np.log(0.5 * t) - t < 0


@pytest.mark.parametrize("log_f", [0.5, -0.3])
def test_barrier_constant_refinement_stable(log_f):
    fits = []
    for N in (8, 16):
        grid, path, dens, F, traj = _run(phi0=0.3, log_f=log_f, N=N)
        fits.append(check_barrier(traj, grid.zeros(), alpha=0.5, A=1.0, lam_F=0.0).details["fitted_C"])
    assert np.isfinite(fits).all()
    assert abs(refinement_ratio(*fits) - 1) <= 0.2


def test_barrier_alpha_range():
    grid, *_, traj = _run(steps=5)
    with pytest.raises(ConfigurationError):
        check_barrier(traj, grid.zeros(), alpha=1.0, A=1.0, lam_F=0.0)


def test_anchor_time_derivative():
    *_, traj = _run()
    up, low = time_derivative_constants(traj)
    assert up == 0.0 and low == pytest.approx(0.0, abs=1e-15)
    assert check_time_derivative_bounds(traj).passed
    assert semiconcavity_constant(traj) == 0.0


def test_exponential_semiconcavity():
    *_, traj = _run(phi0=1.0, lam=1.0, steps=100)
    C = semiconcavity_constant(traj)
    assert 0 < C <= 1.0
    rec = check_semiconcavity(traj)
    assert rec.passed and rec.details["monotone_margin"] >= -1e-12


def test_smooth_time_constants_refinement():
    vals = []
    for N in (32, 64):
        grid, omega, _ = build_flat_geometry(1, N)
        c = grid.coords()
        f = smooth_density(grid, np.broadcast_to(np.exp(0.2 * np.cos(2 * np.pi * c[0])), grid.shape))
        phi0 = np.broadcast_to(0.01 * np.sin(2 * np.pi * c[0]), grid.shape)
        traj = run_flow(phi0, constant_path(omega, 1.0), f, zero_forcing(), 1.0, Schedule(1.0, 40))
        vals.append(time_derivative_constants(traj))
    for a, b in zip(*vals):
        assert abs(refinement_ratio(a, b) - 1) <= 0.2


def test_comparison_constant_shift():
    a = _run(phi0=0.0, lam=1.0)[-1]
    b = _run(phi0=0.1, lam=1.0)[-1]
    rec = check_comparison(a, b, lam_F=0.0)
    assert rec.passed and rec.margin == pytest.approx(0.1 * np.exp(-1), rel=0.02)
    # psi_t - phi_t decays like e^{-t} for F = r
    gap = (b.values - a.values)[:, 0, 0]
    assert np.all(np.diff(gap) < 0)


def test_comparison_identical():
    a = _run(phi0=0.2)[-1]
    rec = check_comparison(a, a)
    assert rec.measured == 0.0 and rec.passed


def test_comparison_crossed():
    grid, omega, _ = build_flat_geometry(1, 16)
    c = grid.coords()
    path = constant_path(omega, 0.5)
    f = constant_density(grid)
    u = np.broadcast_to(0.05 * np.cos(2 * np.pi * c[0]), grid.shape)
    a = run_flow(u, path, f, zero_forcing(), 0.5, Schedule(0.5, 20))
    b = run_flow(grid.zeros(), path, f, zero_forcing(), 0.5, Schedule(0.5, 20))
    rec = check_comparison(a, b)
    assert rec.details["initial_gap"] == pytest.approx(0.05) and rec.passed


def test_comparison_schedule_mismatch():
    a = _run(steps=5)[-1]
    b = _run(steps=6)[-1]
    with pytest.raises(ConfigurationError):
        check_comparison(a, b)


def test_mass_monotonicity_anchor_and_decreasing():
    grid, path, dens, F, traj = _run()
    rec = check_mass_monotonicity(traj, path, dens, F)
    assert rec.passed and rec.details["C"] >= 0
    grid, path, dens, F, traj = _run(log_f=0.4)
    I = [grid.integrate(s * dens.f) for s in traj.snapshots]
    assert np.all(np.diff(I) < 0)
    assert check_mass_monotonicity(traj, path, dens, F).passed


def test_parabolic_stability_identical_and_sweep():
    grid, omega, _ = build_flat_geometry(1, 32)
    path = constant_path(omega, 1.0)
    c = grid.coords()
    runs, dens = {}, {}
    for s in (0.05, 0.1, 0.2):
        dens[s] = np.broadcast_to(np.exp(s * np.sin(2 * np.pi * c[0])), grid.shape)
        runs[s] = run_flow(grid.zeros(), path, smooth_density(grid, dens[s]), zero_forcing(), 1.0, Schedule(1.0, 20))
    rec = check_parabolic_stability(runs, dens, eps=0.1, p=2.0)
    assert rec.passed and np.isfinite(rec.measured)
    same = check_parabolic_stability({"a": runs[0.1], "b": runs[0.1]}, {"a": dens[0.1], "b": dens[0.1]},
                                     eps=0.1, p=2.0)
    assert same.details["pairs"][0][1] == 0.0


def test_weighted_laplacian_trivial_weight():
    grid, omega, _ = build_flat_geometry(1, 16)
    f = smooth_density(grid, np.ones(grid.shape))
    traj = run_flow(grid.zeros(), constant_path(omega, 1.0), f, zero_forcing(), 1.0, Schedule(1.0, 5))
    with pytest.raises(ConfigurationError):
        check_weighted_laplacian(traj, f, 0.4, np.ones(grid.shape, bool), 0.1)


def test_weighted_laplacian_log_pole():
    grid, omega, _ = build_flat_geometry(1, 64)
    f = model_density(grid, (-0.5,))
    traj = run_flow(grid.zeros(), constant_path(omega, 1.0), f, zero_forcing(), 1.0, Schedule(1.0, 30))
    Ks = nested_pole_sets(grid, (0.3, 0.1, 0.05))
    recs = [check_weighted_laplacian(traj, f, 0.4, K, 0.1) for K in Ks]
    unweighted = [r.details["unweighted"] for r in recs]
    assert unweighted[-1] > 2 * unweighted[0]
    assert all(r.passed and np.isfinite(r.measured) for r in recs)
    assert recs[-1].measured < unweighted[-1]


def test_report_rejects_duplicates_and_renders():
    rep = EstimateReport()
    rec = EstimateRecord("x", "a <= b", 1.0, 2.0, 1.0, True)
    rep.add(rec)
    with pytest.raises(ConfigurationError):
        rep.add(rec)
    assert rep["x"] is rec and rep.passed
    assert rep.to_csv().splitlines()[1].startswith("x,a <= b,1,2,1,pass")
    assert "PASS" in rep.to_text()


@pytest.mark.parametrize("coarse,fine,expected", [(0.0, 0.0, 1.0), (1e-9, 2e-9, 1.0), (2.0, 3.0, 1.5),
                                                  (0.0, 1.0, np.inf)])
def test_refinement_ratio(coarse, fine, expected):
    assert refinement_ratio(coarse, fine) == expected
