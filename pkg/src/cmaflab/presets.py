"""Named geometries, densities, forcings and initial data."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .flow import (constant_density, linear_forcing, model_density, smooth_density, tabulated_forcing,
                   zero_forcing)
from .grid import (HermitianField, TorusGrid, _relative_eigs, affine_path, build_degenerate_big_form,
                   build_flat_geometry, constant_path)

GEOMETRY_PRESETS = {
    "G1": "flat torus, theta = omega_X (nondegenerate)",
    "G2": "flat torus, theta degenerate along {z_1 = 0}, rho = kappa log(sin^2 pi x_1 + sin^2 pi y_1)",
}
CRF_PRESETS = {
    "flat-anchor": "chi = 0, no discrepancies",
    "klt-pole-0.5": "chi = 0, density S_1^(-1/2) (log pole)",
    "klt-zero-0.5": "chi = 0, density S_1^(1/2) (zero along the divisor)",
    "indefinite-chi": "chi = (-0.5 + 0.8 sin 2 pi x_1) omega_X",
    "constant-chi": "chi = -c omega_X, maximal time 1/c",
}
DENSITY_PRESETS = {
    "constant": "f = value",
    "smooth": "f = exp(amplitude cos 2 pi x_1)",
    "model": "f = prod_i S_i^(a_i)",
}
FORCING_PRESETS = {"zero": "F = 0", "linear": "F = lambda r", "table": "piecewise linear F(r)"}
INITIAL_PRESETS = {
    "zero": "phi_0 = 0",
    "constant": "phi_0 = value",
    "smooth": "phi_0 = amplitude sin 2 pi x_1 cos 2 pi y_1",
    "kink": "max of two cones of slope `slope` (replaced by its envelope)",
}


def preset_names() -> list[str]:
    """Every preset name, in a stable order."""
    return (list(GEOMETRY_PRESETS) + list(CRF_PRESETS) + [f"density:{k}" for k in DENSITY_PRESETS]
            + [f"forcing:{k}" for k in FORCING_PRESETS] + [f"initial:{k}" for k in INITIAL_PRESETS])


def preset_descriptions() -> list[tuple[str, str]]:
    table = {**GEOMETRY_PRESETS, **CRF_PRESETS}
    for prefix, group in (("density", DENSITY_PRESETS), ("forcing", FORCING_PRESETS),
                          ("initial", INITIAL_PRESETS)):
        table.update({f"{prefix}:{k}": v for k, v in group.items()})
    return [(name, table[name]) for name in preset_names()]


# --- builders ------------------------------------------------------------------

def cone(grid: TorusGrid, center, slope: float) -> np.ndarray:
    """``-slope sqrt(sin^2 pi(x_1 - a) + sin^2 pi(y_1 - b)) / pi``: a periodic cone in the first plane."""
    c = grid.coords()
    s = np.sin(np.pi * (c[0] - center[0])) ** 2 + np.sin(np.pi * (c[1] - center[1])) ** 2
    return np.broadcast_to(-slope * np.sqrt(s) / np.pi, grid.shape).copy()


def initial_datum(grid: TorusGrid, name: str, *, value: float = 0.3, amplitude: float = 0.01,
                  slope: float = 0.2) -> np.ndarray:
    c = grid.coords()
    if name == "zero":
        return grid.zeros()
    if name == "constant":
        return np.full(grid.shape, float(value))
    if name == "smooth":
        return np.broadcast_to(amplitude * np.sin(2 * np.pi * c[0]) * np.cos(2 * np.pi * c[1]), grid.shape).copy()
    if name == "kink":
        return np.maximum(cone(grid, (0.25, 0.5), slope), cone(grid, (0.75, 0.5), slope))
    raise ConfigurationError(f"unknown initial preset {name!r}")


def density_preset(grid: TorusGrid, name: str, *, value: float = 1.0, amplitude: float = 0.2,
                   exponents=(), p: float | None = None):
    if name == "constant":
        return constant_density(grid, value, p or 2.0)
    if name == "smooth":
        c = grid.coords()
        return smooth_density(grid, np.exp(amplitude * np.cos(2 * np.pi * c[0])), p or 2.0)
    if name == "model":
        return model_density(grid, exponents, p)
    raise ConfigurationError(f"unknown density preset {name!r}")


def forcing_preset(name: str, *, lam: float = 1.0, table=None):
    if name == "zero":
        return zero_forcing()
    if name == "linear":
        return linear_forcing(lam)
    if name == "table":
        if not table:
            raise ConfigurationError("forcing table is empty")
        r, v = zip(*table)
        return tabulated_forcing(r, v)
    raise ConfigurationError(f"unknown forcing preset {name!r}")


def sine_field(grid: TorusGrid, amplitude: float) -> np.ndarray:
    c = grid.coords()
    return np.broadcast_to(amplitude * np.sin(2 * np.pi * c[0]), grid.shape).copy()


def crf_forms(grid: TorusGrid, name: str, *, chi_scale: float = 0.5):
    """``(theta0, chi, exponents)`` of a Chern-Ricci preset."""
    eye = HermitianField.identity(grid)
    zero = eye * 0.0
    if name == "flat-anchor":
        return eye, zero, ()
    if name == "klt-pole-0.5":
        return eye, zero, (-0.5,)
    if name == "klt-zero-0.5":
        return eye, zero, (0.5,)
    if name == "indefinite-chi":
        profile = -0.5 + 0.8 * np.sin(2 * np.pi * grid.coords()[0])
        coeffs = np.broadcast_to(profile, grid.shape)[..., None, None] * np.eye(grid.n)
        return eye, HermitianField(grid, coeffs), ()
    if name == "constant-chi":
        return eye, eye * (-chi_scale), ()
    raise ConfigurationError(f"unknown Chern-Ricci preset {name!r}")


def crf_base(theta0: HermitianField, chi: HermitianField, T: float) -> HermitianField:
    """A form below every ``theta0 + t chi``, ``t <= T``: ``theta0 + T chi_-`` (nodewise negative part)."""
    w, v = np.linalg.eigh(chi.coeffs)
    neg = (v * np.minimum(w, 0.0)[..., None, :]) @ np.conj(np.swapaxes(v, -1, -2))
    return HermitianField(theta0.grid, theta0.coeffs + T * neg)


def build_geometry(name: str, n: int, N: int, T: float, *, kappa: float = 0.05, delta: float = 0.1,
                   chi_scale: float = 0.5):
    """Return ``(grid, path, rho, extras)`` for a geometry or Chern-Ricci preset."""
    grid, omega_X, _ = build_flat_geometry(n, N)
    if name == "G1":
        return grid, constant_path(omega_X, T), grid.zeros(), {"kind": "G1"}
    if name == "G2":
        bf = build_degenerate_big_form(grid, kappa, delta)
        return grid, constant_path(bf.theta, T, A=1.0, delta=delta), bf.rho, {"kind": "G2", "big_form": bf}
    if name in CRF_PRESETS:
        theta0, chi, exponents = crf_forms(grid, name, chi_scale=chi_scale)
        base = crf_base(theta0, chi, T)
        if np.min(base.min_eigenvalue()) <= 0:
            raise ConfigurationError(f"horizon T={T} too long for preset {name!r}: theta0 + T chi_- degenerates")
        rel = _relative_eigs(base.coeffs, chi.coeffs)
        A = float(max(np.max(np.abs(rel)), 1e-12))
        path = affine_path(theta0, chi, T, base=base, A=A)
        return grid, path, grid.zeros(), {"kind": "crf", "theta0": theta0, "chi": chi, "exponents": exponents}
    raise ConfigurationError(f"unknown geometry preset {name!r}")


# --- minimum principle constructions ---------------------------------------------

def disc(grid: TorusGrid, center=(0.5, 0.5), radius: float = 0.2) -> np.ndarray:
    """Nodes whose first-plane periodic distance to ``center`` is at most ``radius``."""
    c = grid.coords()
    dx = np.abs(c[0] - center[0])
    dy = np.abs(c[1] - center[1])
    dx, dy = np.minimum(dx, 1 - dx), np.minimum(dy, 1 - dy)
    return np.broadcast_to(dx ** 2 + dy ** 2 <= radius ** 2 + 1e-12, grid.shape).copy()


@dataclass(frozen=True, eq=False)
class MinimumPrincipleCase:
    name: str
    theta: HermitianField
    u: np.ndarray
    v: np.ndarray
    D: np.ndarray
    c: float
    preconditions_hold: bool


def minimum_principle_cases(grid: TorusGrid, *, beta: float = 0.3) -> list:
    """``(u, v, D, c)`` constructions on a disc around ``(1/2, 1/2)``.

    ``dip``: ``v = u - beta S / pi^2`` with ``S`` the squared-sine distance to the
    centre, so ``MA(v) < MA(u)`` on the disc.  ``elliptic``: ``v`` solves the
    equation with density ``MA(u)/2`` on the disc.  ``offset``: ``v = u + 0.1``,
    which violates ``MA(v) <= c MA(u)`` and must be reported as such.
    """
    from .elliptic import solve_elliptic
    from .ma_core import ma_density

    theta = HermitianField.identity(grid)
    c = grid.coords()
    u = np.broadcast_to(0.02 * np.cos(2 * np.pi * c[0]) * np.cos(2 * np.pi * c[1]), grid.shape).copy()
    D = disc(grid)
    S = np.broadcast_to(np.sin(np.pi * (c[0] - 0.5)) ** 2 + np.sin(np.pi * (c[1] - 0.5)) ** 2, grid.shape)
    cases = [MinimumPrincipleCase("dip", theta, u, u - beta * S / np.pi ** 2, D, 0.9, True)]
    mu = ma_density(theta, u).density
    inside = grid.integrate(np.where(D, 0.5 * mu, 0.0))
    outside = grid.integrate(np.where(D, 0.0, mu))
    g = np.where(D, 0.5 * mu, mu * (1.0 - inside) / outside)
    sol = solve_elliptic(theta, g, tol=1e-11)
    cases.append(MinimumPrincipleCase("elliptic", theta, u, sol.phi.values, D, 0.6, True))
    cases.append(MinimumPrincipleCase("offset", theta, u, u + 0.1, D, 0.9, False))
    return cases
