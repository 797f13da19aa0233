"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line for the terminal summary."""
import filecmp
import time

import numpy as np
import pytest

from cmaflab.chern_ricci import CRFProblem, estimate_tmax, run_crf
from cmaflab.elliptic import check_minimum_principle, solve_elliptic
from cmaflab.experiment import run_experiment
from cmaflab.flow import Schedule, constant_density, graded_times, linear_forcing, refine_times, run_flow, zero_forcing
from cmaflab.grid import HermitianField, TorusGrid, build_degenerate_big_form, build_flat_geometry, constant_path
from cmaflab.ma_core import check_mixed_inequality, complex_hessian, ma_density
from cmaflab.presets import crf_forms, density_preset, minimum_principle_cases

import oracles
from conftest import ROOT

REFINED = ("anchor", "g1_smooth", "klt_pole")


def _report(suite, stem):
    res, _ = suite[stem]
    assert res.status == 0, (stem, res.message)
    return {r.name: r for r in res.report.records}


def _records(suite, name):
    return {stem: _report(suite, stem)[name] for stem in suite if stem != "_total"
            if name in _report(suite, stem)}


def test_c01_anchor_stationarity(acceptance):
    grid, omega, _ = build_flat_geometry(1, 64)
    t0 = time.perf_counter()
    traj = run_flow(grid.zeros(), constant_path(omega, 1.0), constant_density(grid), zero_forcing(), 1.0,
                    Schedule(1.0, 100))
    elapsed = time.perf_counter() - t0
    dev = float(np.max(np.abs(traj.values)))
    ok = len(traj) == 101 and dev <= 1e-12 and elapsed < 10
    acceptance(1, ok, f"max|phi| = {dev:.1e} over 100 steps in {elapsed:.2f} s (n=1, N=64)")
    assert ok


def test_c02_ode_oracle(acceptance):
    grid, omega, _ = build_flat_geometry(1, 8)
    path = constant_path(omega, 1.0)
    times = graded_times(1.0, 100, 1.02)
    lin = run_flow(np.full(grid.shape, 0.3), path, constant_density(grid, np.exp(0.5)), zero_forcing(), 1.0, times)
    lin_err = float(np.max(np.abs(lin.values - oracles.linear_ode(lin.times, 0.3, 0.5, 0.0)[:, None, None])))
    errs = []
    for k in range(3):
        traj = run_flow(np.ones(grid.shape), path, constant_density(grid), linear_forcing(1.0), 1.0, times)
        errs.append(float(np.max(np.abs(traj.values[:, 0, 0] - np.exp(-traj.times)))))
        times = refine_times(times)
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    ok = lin_err <= 1e-3 and np.all(np.abs(orders - 1) <= 0.1)
    acceptance(2, ok, f"constant reduction error {lin_err:.1e} (100 graded steps); Richardson orders "
                      f"{', '.join(f'{o:.3f}' for o in orders)}; e^-t error {errs[0]:.2e} (see xfail below)")
    assert ok


@pytest.mark.xfail(strict=True, reason="backward Euler on e^-t with 100 steps has error >= 1.84e-3 on any grid")
def test_c02_exponential_within_1e3():
    grid, omega, _ = build_flat_geometry(1, 8)
    traj = run_flow(np.ones(grid.shape), constant_path(omega, 1.0), constant_density(grid), linear_forcing(1.0),
                    1.0, graded_times(1.0, 100, 1.02))
    err = np.max(np.abs(traj.values[:, 0, 0] - np.exp(-traj.times)))
    assert err >= oracles.BE_EXP_ERROR_100 * 0.999
    assert err <= 1e-3


def test_c03_elliptic_self_consistency(acceptance):
    cases = []
    for n, N in ((1, 64), (2, 16)):
        grid = TorusGrid(n, N)
        for name in ("smooth",):
            cases.append((f"G1 n={n} N={N} {name}", HermitianField.identity(grid), density_preset(grid, name).f))
        f = np.broadcast_to(np.exp(0.1 * np.sin(2 * np.pi * grid.coords()[0])), grid.shape)
        cases.append((f"G1 n={n} N={N} exp(0.1 sin)", HermitianField.identity(grid), f))
    g = TorusGrid(1, 64)
    cases.append(("G2 n=1 N=64 smooth", build_degenerate_big_form(g, 0.05, 0.1).theta, density_preset(g, "smooth").f))
    worst_res, worst_mass = 0.0, 0.0
    for label, theta, f in cases:
        sol = solve_elliptic(theta, f, tol=1e-10)
        worst_res = max(worst_res, sol.residual)
    grid = TorusGrid(1, 64)
    rng = np.random.default_rng(0)
    for _ in range(10):
        u = oracles.random_trig_field(rng, grid.shape, 0.01)
        worst_mass = max(worst_mass, abs(ma_density(HermitianField.identity(grid), u).mass() - 1.0))
    ok = worst_res <= 1e-9 and worst_mass <= 1e-8
    acceptance(3, ok, f"max residual {worst_res:.1e} over {len(cases)} smooth presets; "
                      f"mass defect {worst_mass:.1e} (n=1, N=64)")
    assert ok


def test_c04_mixed_inequality(acceptance):
    rng = np.random.default_rng(2024)
    worst, pre_ok, cross = np.inf, True, 0.0
    for k in range(100):
        grid = TorusGrid(1, 32)
        o1 = HermitianField.constant(grid, oracles.random_hermitian_pd(rng, 1))
        o2 = HermitianField.constant(grid, oracles.random_hermitian_pd(rng, 1))
        u1 = oracles.random_trig_field(rng, grid.shape, 0.004)
        u2 = oracles.random_trig_field(rng, grid.shape, 0.004)
        mu = np.exp(oracles.random_trig_field(rng, grid.shape, 0.3))
        M1 = o1.coeffs + complex_hessian(u1, grid).coeffs
        M2 = o2.coeffs + complex_hessian(u2, grid).coeffs
        f1 = np.log(oracles.brute_det(M1) / mu) - rng.uniform(0, 0.2, grid.shape)
        f2 = np.log(oracles.brute_det(M2) / mu) - rng.uniform(0, 0.2, grid.shape)
        delta = 0.5 if k == 0 else rng.uniform(0.01, 0.99)
        rep = check_mixed_inequality(o1, o2, u1, u2, f1, f2, mu, delta)
        gap = oracles.brute_det(delta * M1 + (1 - delta) * M2) - np.exp(delta * f1 + (1 - delta) * f2) * mu
        cross = max(cross, abs(rep.margin - gap.min()))
        worst, pre_ok = min(worst, rep.margin), pre_ok and rep.precondition_ok
    ok = worst >= -1e-8 and pre_ok and cross <= 1e-12
    acceptance(4, ok, f"min margin {worst:.2e} over 100 random admissible pairs (n=1, N=32); "
                      f"brute-force agreement {cross:.1e}")
    assert ok


def test_c05_minimum_principle(acceptance):
    results = []
    for n, N in ((1, 32), (1, 64), (2, 16)):
        for case in minimum_principle_cases(TorusGrid(n, N)):
            v = check_minimum_principle(case.theta, case.u, case.v, case.D, case.c)
            expected = case.preconditions_hold
            results.append((f"{case.name}@n{n}N{N}", v.passed == expected and v.precondition_ok == expected))
    ok = all(r for _, r in results)
    bad = [name for name, r in results if not r]
    acceptance(5, ok, f"{sum(r for _, r in results)}/{len(results)} constructions as expected "
                      f"(dip, elliptic pass; offset flagged)" + (f"; wrong: {bad}" if bad else ""))
    assert ok


def test_c06_uniform_bound(acceptance, suite):
    recs = _records(suite, "uniform_bound")
    margins = {k: r.margin for k, r in recs.items()}
    ok = len(recs) == len(suite) - 1 and all(r.passed for r in recs.values())
    bare = min(r.details["bare_margin"] for r in recs.values())
    acceptance(6, ok, f"two-sided bound holds on {len(recs)} preset runs, min margin {min(margins.values()):.2e}; "
                      f"barrier-free form min margin {bare:.2e}")
    assert ok


def test_c07_barrier(acceptance, suite):
    ratios = {}
    for stem in REFINED:
        rec = _report(suite, stem)["barrier"]
        ratios[stem] = (rec.details["fitted_C"], rec.details["ratio_C"])
    ok = all(np.isfinite(c) and 0.5 <= r <= 2 for c, r in ratios.values())
    acceptance(7, ok, "fitted C / ratio N=32->64: " + ", ".join(f"{k} {c:.3g}/{r:.3f}" for k, (c, r) in ratios.items()))
    assert ok


def test_c08_time_bounds(acceptance, suite):
    parts, ok = [], True
    for stem in REFINED:
        rep = _report(suite, stem)
        td, sc = rep["time_derivative"], rep["semiconcavity"]
        rs = [td.details["ratio_C_upper"], td.details["ratio_C_lower"], sc.details["ratio_C_semi"]]
        cs = [td.details["C_upper"], td.details["C_lower"], sc.details["C_semi"], sc.details["shift"]]
        ok &= all(np.isfinite(cs)) and all(0.5 <= r <= 2 for r in rs) and sc.details["monotone_margin"] >= -1e-12
        parts.append(f"{stem} ratios {'/'.join(f'{r:.2f}' for r in rs)}")
    acceptance(8, ok, "; ".join(parts) + "; shifted monotonicity holds")
    assert ok


def test_c09_comparison(acceptance, suite):
    recs = _records(suite, "comparison")
    ordered = min(r.details["ordered"]["margin"] for r in recs.values())
    crossed = min(r.details["crossed"]["margin"] for r in recs.values())
    ok = all(r.passed for r in recs.values()) and ordered >= 0 and crossed >= 0
    acceptance(9, ok, f"{len(recs)} preset runs; ordered min margin {ordered:.2e}, crossed min margin {crossed:.2e}")
    assert ok


def test_c10_stability(acceptance, suite):
    spreads = {}
    for name in ("elliptic_stability", "parabolic_stability"):
        for stem, r in _records(suite, name).items():
            spreads[f"{stem}:{name.split('_')[0]}"] = r.details["spread"]
    ladders = {stem: r.details["distances"] for stem, r in _records(suite, "ladder").items()}
    mono = all(all(d[k + 1] <= d[k] * (1 + 1e-9) + 1e-12 for k in range(len(d) - 1)) for d in ladders.values())
    ok = bool(spreads) and max(spreads.values()) <= 50 and mono and len(ladders) >= 3
    acceptance(10, ok, f"max spread {max(spreads.values()):.2f} over {len(spreads)} sweeps; "
                       f"ladder monotone on {len(ladders)} presets")
    assert ok


def test_c11_weighted_laplacian(acceptance, suite):
    rec = _report(suite, "klt_pole")["weighted_laplacian"]
    w, u = rec.details["weighted"], rec.details["unweighted"]
    grows = all(b >= a for a, b in zip(u, u[1:])) and u[-1] > 2 * u[0]
    ok = rec.passed and np.all(np.isfinite(w)) and 0.5 <= rec.details["ratio_weighted"] <= 2 and grows
    acceptance(11, ok, f"unweighted {u[0]:.3g} -> {u[-1]:.3g} as K nears the pole; weighted {w[-1]:.3g}, "
                       f"refinement ratio {rec.details['ratio_weighted']:.3f}")
    assert ok


def test_c12_chern_ricci(acceptance, suite):
    tm = []
    for n, N in ((1, 64), (2, 8)):
        theta0, chi, _ = crf_forms(TorusGrid(n, N), "constant-chi", chi_scale=0.5)
        tm.append(estimate_tmax(theta0, chi))
    theta0, chi, _ = crf_forms(TorusGrid(1, 64), "flat-anchor")
    crf = run_crf(CRFProblem(theta0, chi), 1.0, Schedule(1.0, 50))
    ricci = max(float(np.abs(crf.ricci(k).coeffs).max()) for k in range(len(crf.flow)))
    smooth = _report(suite, "kink_smoothing")["smoothing"]
    ok = all(abs(t - 2.0) <= 1e-3 for t in tm) and ricci <= 1e-10 and smooth.measured >= 2 and smooth.passed
    acceptance(12, ok, f"T_max {tm[0]:.5f} (n=1), {tm[1]:.5f} (n=2, N=8) vs 2; anchor Ricci {ricci:.1e}; "
                       f"kink C2 decay factor {smooth.measured:.1f}")
    assert ok


def test_c13_cli_determinism(acceptance, suite, tmp_path):
    first, _ = suite["g1_smooth"]
    again = run_experiment(ROOT / "configs" / "g1_smooth.ini", tmp_path / "again", threads=2)
    csvs = sorted(p.name for p in first.out_dir.glob("*.csv"))
    same = all(filecmp.cmp(first.out_dir / c, again.out_dir / c, shallow=False) for c in csvs)
    total = suite["_total"]
    anchor_t = suite["anchor"][1]
    ok = same and len(csvs) >= 5 and total < 900 and anchor_t < 10
    acceptance(13, ok, f"{len(csvs)} CSVs byte-identical on rerun; suite of {len(suite) - 1} configs in {total:.0f} s; "
                       f"anchor config {anchor_t:.1f} s")
    assert ok
