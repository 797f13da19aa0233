import numpy as np
import pytest

from cmaflab.elliptic import (check_elliptic_stability, check_minimum_principle, psh_envelope, solve_elliptic,
                              stability_exponent)
from cmaflab.errors import PreconditionError
from cmaflab.grid import HermitianField, TorusGrid, build_degenerate_big_form
from cmaflab.ma_core import is_admissible, ma_density
from cmaflab.presets import disc, minimum_principle_cases

import oracles


def _sine_density(grid, s):
    return np.broadcast_to(np.exp(s * np.sin(2 * np.pi * grid.coords()[0])), grid.shape).copy()


def test_anchor():
    grid = TorusGrid(1, 32)
    sol = solve_elliptic(HermitianField.identity(grid), np.ones(grid.shape))
    assert np.abs(sol.phi.values).max() == 0 and sol.c == 0


@pytest.mark.parametrize("n,N", [(1, 64), (1, 128), (2, 16)])
def test_smooth_residual(n, N):
    grid = TorusGrid(n, N)
    f = _sine_density(grid, 0.1)
    theta = HermitianField.identity(grid)
    sol = solve_elliptic(theta, f, tol=1e-10)
    assert sol.residual <= 1e-9
    assert sol.phi.sup() == 0.0
    # substitute back through the Monge-Ampere operator
    mu = ma_density(theta, sol.phi.values).density
    assert np.max(np.abs(mu / (np.exp(sol.c) * f) - 1)) <= 1e-9


def test_degenerate_theta_residual():
    grid = TorusGrid(1, 32)
    bf = build_degenerate_big_form(grid, 0.05, 0.1)
    f = _sine_density(grid, 0.1)
    sol = solve_elliptic(bf.theta, f, tol=1e-10)
    assert sol.residual <= 1e-9
    assert is_admissible(bf.theta, sol.phi.values)


def test_vanishing_density_bounded():
    grid = TorusGrid(1, 64)
    c = grid.coords()
    f = np.broadcast_to(np.sqrt(np.sin(np.pi * c[0]) ** 2 + np.sin(np.pi * c[1]) ** 2), grid.shape)
    sol = solve_elliptic(HermitianField.identity(grid), f, tol=1e-8)
    assert sol.residual <= 1e-7
    assert np.isfinite(sol.phi.values).all() and sol.phi.inf() > -1


def test_density_ordering_orders_constants():
    grid = TorusGrid(1, 32)
    theta = HermitianField.identity(grid)
    f1 = _sine_density(grid, 0.1)
    c1 = solve_elliptic(theta, f1).c
    c2 = solve_elliptic(theta, 1.2 * f1).c
    assert c1 >= c2 and c1 - c2 == pytest.approx(np.log(1.2), abs=1e-9)


def test_envelope_fixed_point():
    grid = TorusGrid(1, 16)
    u = oracles.random_trig_field(np.random.default_rng(2), grid.shape, 0.002)
    v = psh_envelope(HermitianField.identity(grid), u).values
    assert np.allclose(v, u, atol=1e-12)


def test_envelope_against_coordinate_descent():
    N = 16
    grid = TorusGrid(1, N)
    u = np.broadcast_to(-0.001 * np.abs(np.sin(2 * np.pi * grid.coords()[0])), grid.shape).copy()
    u -= 0.02 * np.abs(np.broadcast_to(np.cos(2 * np.pi * grid.coords()[1]), grid.shape))
    v = psh_envelope(HermitianField.identity(grid), u, tol=1e-12).values
    ref = oracles.coordinate_descent_envelope(u, N)
    assert np.max(np.abs(v - ref)) <= 1e-9
    assert np.all(v <= u + 1e-12)


def test_envelope_of_minimum():
    grid = TorusGrid(1, 32)
    c = grid.coords()
    a = np.broadcast_to(0.01 * np.cos(2 * np.pi * c[0]), grid.shape)
    b = np.broadcast_to(0.01 * np.sin(2 * np.pi * c[1]), grid.shape)
    u = np.minimum(a, b)
    omega = HermitianField.identity(grid)
    v = psh_envelope(omega, u).values
    assert np.all(v <= u + 1e-10)
    assert is_admissible(omega, v)


@pytest.mark.parametrize("n,N", [(1, 32), (1, 64), (2, 16)])
def test_minimum_principle_constructions(n, N):
    for case in minimum_principle_cases(TorusGrid(n, N)):
        verdict = check_minimum_principle(case.theta, case.u, case.v, case.D, case.c)
        assert verdict.precondition_ok == case.preconditions_hold, case.name
        assert verdict.passed == case.preconditions_hold, case.name


def test_offset_minima_equal_constant():
    grid = TorusGrid(1, 32)
    u = np.zeros(grid.shape)
    verdict = check_minimum_principle(HermitianField.identity(grid), u, u + 0.25, disc(grid), 0.5)
    assert verdict.interior_min == pytest.approx(0.25) and verdict.boundary_min == pytest.approx(0.25)


@pytest.mark.parametrize("c", [1.0, 1.5, -0.1])
def test_minimum_principle_rejects_c(c):
    grid = TorusGrid(1, 16)
    u = np.zeros(grid.shape)
    with pytest.raises(PreconditionError):
        check_minimum_principle(HermitianField.identity(grid), u, u, disc(grid), c)


def test_stability_sweep():
    grid = TorusGrid(1, 64)
    dens = {s: _sine_density(grid, s) for s in (0.05, 0.1, 0.2)}
    verdict = check_elliptic_stability(HermitianField.identity(grid), dens, p=2.0, B=2.0)
    assert verdict.alpha == stability_exponent(2.0) == 0.5
    assert np.isfinite(verdict.spread) and verdict.spread < 10


def test_stability_identical_densities():
    grid = TorusGrid(1, 32)
    f = _sine_density(grid, 0.1)
    verdict = check_elliptic_stability(HermitianField.identity(grid), {"a": f, "b": f.copy()}, p=2.0, B=2.0)
    assert verdict.records[0].lhs <= 2e-9


def test_stability_mass_bound_precondition():
    grid = TorusGrid(1, 16)
    with pytest.raises(PreconditionError):
        check_elliptic_stability(HermitianField.identity(grid), {"a": np.ones(grid.shape),
                                                                 "b": 10 * np.ones(grid.shape)}, p=2.0, B=2.0)
