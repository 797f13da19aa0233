"""Explicit constants of the a priori estimates and their numerical verification.

Every check returns an :class:`EstimateRecord`; a run collects them in an
:class:`EstimateReport`.  Fitted constants are compared across resolutions
with :func:`refinement_ratio`.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .elliptic import lp_norm, solve_elliptic
from .errors import ConfigurationError
from .flow import DensitySpec, FlowTrajectory, ForcingSpec
from .grid import FormPath, HermitianField, TorusGrid, _values
from .ma_core import laplacian, total_form

#: constants below this magnitude are treated as zero when forming ratios
RATIO_FLOOR = 1e-6


@dataclass
class EstimateRecord:
    name: str
    anchor: str
    measured: float
    bound: float
    margin: float
    passed: bool
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{self.name} | {self.anchor} | measured={self.measured:.6g} | bound={self.bound:.6g} | "
                f"margin={self.margin:.6g} | {verdict}")


@dataclass
class EstimateReport:
    records: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, record: EstimateRecord) -> None:
        if any(r.name == record.name for r in self.records):
            raise ConfigurationError(f"check {record.name!r} already recorded")
        self.records.append(record)

    def __getitem__(self, name: str) -> EstimateRecord:
        for r in self.records:
            if r.name == name:
                return r
        raise KeyError(name)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.records)

    def to_text(self) -> str:
        return "".join(r.line() + "\n" for r in self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "anchor", "measured", "bound", "margin", "verdict"])
        for r in self.records:
            w.writerow([r.name, r.anchor, f"{r.measured:.17g}", f"{r.bound:.17g}", f"{r.margin:.17g}",
                        "pass" if r.passed else "fail"])
        return buf.getvalue()


def refinement_ratio(coarse: float, fine: float, floor: float = RATIO_FLOOR) -> float:
    """``fine / coarse``, or 1 when both constants are below ``floor`` in magnitude."""
    if abs(coarse) <= floor and abs(fine) <= floor:
        return 1.0
    if abs(coarse) <= floor:
        return np.inf
    return fine / coarse


def ratio_ok(ratio: float) -> bool:
    return 0.5 <= ratio <= 2.0


def _growth(lam: float, t):
    """``(e^{lam t} - 1) / lam`` with its ``lam -> 0`` limit ``t``."""
    t = np.asarray(t, dtype=float)
    if lam == 0:
        return t
    return np.expm1(lam * t) / lam


# --- uniform bound ---------------------------------------------------------

@dataclass
class Barriers:
    """Elliptic solutions ``(theta + dd^c phi)^n = e^{c_-} f dV`` (``sup phi = 0``) and
    ``(omega_X + dd^c Phi)^n = e^{c_+} f dV`` (``inf Phi = 0``)."""

    phi: np.ndarray
    c_minus: float
    Phi: np.ndarray
    c_plus: float

    @property
    def sup_sum(self) -> float:
        return float(np.max(np.abs(self.phi)) + np.max(np.abs(self.Phi)))


def elliptic_barriers(theta: HermitianField, density: DensitySpec, tol: float = 1e-9, *,
                      upper: HermitianField | None = None) -> Barriers:
    """Lower barrier on ``theta`` and upper barrier on ``upper`` (default ``omega_X``)."""
    low = solve_elliptic(theta, density.f, tol=tol)
    upper = HermitianField.identity(theta.grid) if upper is None else upper
    high = solve_elliptic(upper, density.f, tol=tol)
    Phi = high.phi.values - high.phi.values.min()
    return Barriers(low.phi.values, low.c, Phi, high.c)


def sup_forcing_at_zero(forcing: ForcingSpec, grid: TorusGrid, T: float, samples: int = 21) -> float:
    zero = grid.zeros()
    return float(max(np.max(np.abs(forcing(t, zero))) for t in np.linspace(0, T, samples)))


def uniform_bound_constant(lam_F: float, F0_sup: float, barriers: Barriers) -> float:
    """``C = sup|F(.,.,0)| + (lam_F + 1) sup(|phi| + |Phi|) + max(-c_-, c_+)``."""
    return F0_sup + (lam_F + 1.0) * barriers.sup_sum + max(-barriers.c_minus, barriers.c_plus)


def C0_curve(t, phi0_sup: float, lam_F: float, C: float):
    """Solution of ``g' - lam_F g = C``, ``g(0) = sup|phi_0|``."""
    t = np.asarray(t, dtype=float)
    return phi0_sup * np.exp(lam_F * t) + C * _growth(lam_F, t)


def check_uniform_bound(traj: FlowTrajectory, *, lam_F: float, F0_sup: float, barriers: Barriers | None,
                        eps_grid: float = 1e-6) -> EstimateRecord:
    """Two-sided barrier bound ``phi - g(t) <= phi_t <= Phi + g(t)`` with ``g = C0_curve``.

    ``sup|phi_t| <= g(t) + max(sup|phi|, sup Phi)`` follows.  The bound without
    the barrier term, ``sup|phi_t| <= g(t)``, is reported as ``bare_margin``.
    """
    if barriers is None:
        raise ConfigurationError("uniform bound check needs the elliptic barriers")
    m = traj.unmasked
    phi0_sup = float(np.max(np.abs(traj.snapshots[0][m])))
    C = uniform_bound_constant(lam_F, F0_sup, barriers)
    gamma = C0_curve(traj.times, phi0_sup, lam_F, C)
    offset = max(float(np.max(np.abs(barriers.phi[m]))), float(np.max(barriers.Phi[m])))
    margins, sups, bare = [], [], []
    for g, s in zip(gamma, traj.snapshots):
        low = float(np.min((s - barriers.phi + g)[m]))
        high = float(np.min((barriers.Phi + g - s)[m]))
        margins.append(min(low, high) + eps_grid)
        sups.append(float(np.max(np.abs(s[m]))))
        bare.append(g + eps_grid - sups[-1])
    k = int(np.argmin(margins))
    return EstimateRecord("uniform_bound", "phi - C0(t) <= phi_t <= Phi + C0(t)", sups[k], float(gamma[k] + offset),
                          float(margins[k]), bool(margins[k] >= 0),
                          {"C": C, "c_minus": barriers.c_minus, "c_plus": barriers.c_plus,
                           "barrier_offset": offset, "bare_margin": float(min(bare))})


# --- barrier ---------------------------------------------------------------------

def barrier_profile(t: float, phi0: np.ndarray, rho: np.ndarray, alpha: float, A: float, n: int) -> np.ndarray:
    """``(1 - alpha t) e^{-A t} phi_0 + alpha t rho + n (t log(alpha t) - t)`` (``C`` term excluded)."""
    tlog = t * np.log(alpha * t) if t > 0 else 0.0
    return (1 - alpha * t) * np.exp(-A * t) * phi0 + alpha * t * rho + n * (tlog - t)


def check_barrier(traj: FlowTrajectory, rho, *, alpha: float, A: float, lam_F: float,
                  C: float | None = None) -> EstimateRecord:
    """Fit the smallest ``C`` with ``phi_t >= barrier - C (e^{lam_F t} - 1)/lam_F`` at stored ``t > 0``."""
    T = traj.times[-1]
    if not alpha * T < 1:
        raise ConfigurationError("the barrier needs alpha T < 1")
    n = traj.grid.n
    rho_v = _values(rho)
    m = traj.unmasked
    if hasattr(rho, "unmasked"):
        m = m & rho.unmasked
    phi0 = traj.snapshots[0]
    fitted = -np.inf
    for t, phi in zip(traj.times[1:], traj.snapshots[1:]):
        b = barrier_profile(t, phi0, rho_v, alpha, A, n)
        fitted = max(fitted, float(np.max((b - phi)[m]) / _growth(lam_F, t)))
    if not np.isfinite(fitted):
        fitted = 0.0
    use_C = fitted if C is None else C
    margin = np.inf
    for t, phi in zip(traj.times[1:], traj.snapshots[1:]):
        b = barrier_profile(t, phi0, rho_v, alpha, A, n) - use_C * _growth(lam_F, t)
        margin = min(margin, float(np.min((phi - b)[m])))
    margin = margin if np.isfinite(margin) else 0.0
    return EstimateRecord("barrier", "phi_t >= (1-at)e^{-At}phi_0 + at rho + n(t log at - t) - C g(t)",
                          fitted, use_C, margin, bool(np.isfinite(fitted) and margin >= -1e-12),
                          {"fitted_C": fitted, "alpha": alpha, "A": A})


# --- time derivative bounds ----------------------------------------------------

def time_derivative_constants(traj: FlowTrajectory, start: int = 2) -> tuple[float, float]:
    """``(C_upper, C_lower)``: max of ``t max phi_dot`` and of ``n log t - min phi_dot`` over ``k >= start``."""
    n = traj.grid.n
    m = traj.unmasked
    dots = traj.phi_dot()
    up, low = -np.inf, -np.inf
    for k in range(max(start, 1), len(traj)):
        t = traj.times[k]
        up = max(up, t * float(dots[k][m].max()))
        low = max(low, n * np.log(t) - float(dots[k][m].min()))
    return float(up), float(low)


def check_time_derivative_bounds(traj: FlowTrajectory, start: int = 2) -> EstimateRecord:
    if len(traj) <= max(start, 1):
        return EstimateRecord("time_derivative", "n log t - C <= phi_dot <= C/t", 0.0, 0.0, 0.0, True,
                              {"C_upper": 0.0, "C_lower": 0.0})
    up, low = time_derivative_constants(traj, start)
    ok = np.isfinite(up) and np.isfinite(low)
    return EstimateRecord("time_derivative", "n log t - C <= phi_dot <= C/t", max(up, low), max(up, low),
                          0.0, bool(ok), {"C_upper": up, "C_lower": low})


# --- semiconcavity ----------------------------------------------------------------

def semiconcavity_constant(traj: FlowTrajectory, start: int = 2) -> float:
    """``max t^2 phi_ddot`` over interior stored times ``k >= start``."""
    m = traj.unmasked
    dd = traj.phi_ddot()
    vals = [traj.times[k] ** 2 * float(dd[k][m].max()) for k in range(max(start, 1), len(traj) - 1)]
    return float(max(vals)) if vals else 0.0


def monotonicity_shift(traj: FlowTrajectory) -> float:
    """Smallest ``C`` making ``t -> phi_t - n (t log t - t) + C t`` nondecreasing at every node."""
    n = traj.grid.n
    m = traj.unmasked
    t = traj.times
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(t > 0, t * np.log(np.where(t > 0, t, 1.0)) - t, 0.0)
    worst = -np.inf
    for k in range(len(traj) - 1):
        dt = t[k + 1] - t[k]
        dphi = (traj.snapshots[k + 1] - traj.snapshots[k])[m]
        worst = max(worst, float(np.max(n * (g[k + 1] - g[k]) - dphi) / dt))
    return float(worst) if np.isfinite(worst) else 0.0


def check_semiconcavity(traj: FlowTrajectory, start: int = 2) -> EstimateRecord:
    C = semiconcavity_constant(traj, start)
    shift = monotonicity_shift(traj)
    # verify the shifted path with the fitted constant
    n = traj.grid.n
    m = traj.unmasked
    t = traj.times
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(t > 0, t * np.log(np.where(t > 0, t, 1.0)) - t, 0.0)
    mono = np.inf
    for k in range(len(traj) - 1):
        a = traj.snapshots[k][m] - n * g[k] + shift * t[k]
        b = traj.snapshots[k + 1][m] - n * g[k + 1] + shift * t[k + 1]
        mono = min(mono, float(np.min(b - a)))
    mono = mono if np.isfinite(mono) else 0.0
    ok = np.isfinite(C) and np.isfinite(shift) and mono >= -1e-12
    return EstimateRecord("semiconcavity", "phi_ddot <= C/t^2", C, C, mono, bool(ok),
                          {"C_semi": C, "shift": shift, "monotone_margin": mono})


# --- comparison ---------------------------------------------------------------

def check_comparison(traj_a: FlowTrajectory, traj_b: FlowTrajectory, *, lam_F: float = 0.0,
                     eps_grid: float | None = None) -> EstimateRecord:
    """``sup(phi_t - psi_t) <= e^{lam_F t} sup(phi_0 - psi_0)_+ + eps_grid`` at every stored time."""
    if traj_a.grid != traj_b.grid or traj_a.times.shape != traj_b.times.shape or \
            not np.allclose(traj_a.times, traj_b.times, rtol=0, atol=1e-14):
        raise ConfigurationError("comparison needs runs on the same grid and time schedule")
    m = traj_a.unmasked & traj_b.unmasked
    if eps_grid is None:
        consistency = max(traj_a.residuals + traj_b.residuals, default=0.0) * traj_a.times[-1]
        eps_grid = 1e-6 + consistency
    d0 = max(float(np.max((traj_a.snapshots[0] - traj_b.snapshots[0])[m])), 0.0)
    worst_margin, worst_diff, worst_bound = np.inf, 0.0, 0.0
    for t, a, b in zip(traj_a.times, traj_a.snapshots, traj_b.snapshots):
        diff = float(np.max((a - b)[m]))
        bound = np.exp(lam_F * t) * d0 + eps_grid
        if bound - diff < worst_margin:
            worst_margin, worst_diff, worst_bound = bound - diff, diff, bound
    return EstimateRecord("comparison", "phi_0 <= psi_0 + d implies phi_t <= psi_t + e^{lam t} d",
                          worst_diff, worst_bound, worst_margin, bool(worst_margin >= 0),
                          {"initial_gap": d0, "eps_grid": eps_grid})


# --- mass monotonicity ---------------------------------------------------------

def check_mass_monotonicity(traj: FlowTrajectory, path: FormPath, density: DensitySpec,
                            forcing: ForcingSpec, samples: int = 21) -> EstimateRecord:
    """``int phi_t dmu <= int phi_0 dmu + C t`` with ``mu = f dV``.

    ``C = -m mu(X) + mu(X) log M - mu(X) log mu(X)`` where ``m`` is the infimum of
    ``F`` over the value box and ``M`` bounds the Monge-Ampere masses.  The
    variant with ``+m mu(X)`` is reported as ``C_printed``.
    """
    grid = traj.grid
    m_nodes = traj.unmasked
    mu = density.f * m_nodes
    mu_X = grid.integrate(mu)
    lo = min(float(s[m_nodes].min()) for s in traj.snapshots)
    hi = max(float(s[m_nodes].max()) for s in traj.snapshots)
    rs = np.linspace(lo, hi, samples)
    T = traj.times[-1]
    m_inf = float(min(np.min(forcing(t, rs)) for t in np.linspace(0, T, samples)))
    M = max(grid.integrate(np.maximum(total_form(path.at(t), s).det(), 0.0))
            for t, s in zip(traj.times, traj.snapshots))
    C = -m_inf * mu_X + mu_X * np.log(M) - mu_X * np.log(mu_X)
    C_printed = m_inf * mu_X + mu_X * np.log(M) - mu_X * np.log(mu_X)
    I0 = grid.integrate(traj.snapshots[0] * mu)
    margins = [I0 + C * t - grid.integrate(s * mu) for t, s in zip(traj.times, traj.snapshots)]
    k = int(np.argmin(margins))
    return EstimateRecord("mass_monotonicity", "int phi_t dmu <= int phi_0 dmu + C t",
                          float(grid.integrate(traj.snapshots[k] * mu)), float(I0 + C * traj.times[k]),
                          float(margins[k]), bool(margins[k] >= -1e-10),
                          {"C": float(C), "C_printed": float(C_printed), "m": m_inf, "M": float(M),
                           "mu_X": float(mu_X)})


# --- parabolic stability ----------------------------------------------------------

def spacetime_l1(a: FlowTrajectory, b: FlowTrajectory) -> float:
    """Trapezoidal ``L^1(X_T)`` norm of the difference over the common schedule."""
    m = a.unmasked & b.unmasked
    vals = np.array([a.grid.integrate(np.abs(x - y) * m) for x, y in zip(a.snapshots, b.snapshots)])
    return float(np.sum(0.5 * (vals[1:] + vals[:-1]) * np.diff(a.times)))


@dataclass
class StabilityPair:
    label: tuple
    lhs: float
    l1: float
    lp: float
    bracket: float
    implied: float


def parabolic_stability_pairs(runs: dict, densities: dict, eps: float, p: float, gamma: float) -> list:
    from .flow import sup_distance

    keys = list(runs)
    out = []
    for i, a in enumerate(keys):
        for b in keys[i + 1:]:
            ta, tb = runs[a], runs[b]
            lhs = sup_distance(ta, tb, eps)
            l1 = spacetime_l1(ta, tb)
            lp = lp_norm(densities[a] - densities[b], ta.grid, p)
            bracket = (l1 ** gamma + lp) ** (1.0 / ta.grid.n)
            out.append(StabilityPair((a, b), lhs, l1, lp, bracket, lhs / bracket if bracket > 0 else 0.0))
    return out


def check_parabolic_stability(runs: dict, densities: dict, *, eps: float, p: float,
                              max_spread: float = 50.0) -> EstimateRecord:
    """Implied ``B`` for every pair of runs; passes when ``max B / min B <= max_spread``."""
    from .elliptic import stability_exponent

    gamma = stability_exponent(p)
    pairs = parabolic_stability_pairs(runs, densities, eps, p, gamma)
    implied = [q.implied for q in pairs if q.implied > 0]
    spread = max(implied) / min(implied) if implied else 1.0
    return EstimateRecord("parabolic_stability", "sup|phi1 - phi2| <= B(|phi1 - phi2|_1^g + |f1 - f2|_p)^{1/n}",
                          float(max(implied, default=0.0)), float(max_spread), float(max_spread - spread),
                          bool(spread <= max_spread and all(np.isfinite(implied))),
                          {"gamma": gamma, "spread": spread,
                           "pairs": [(q.label, q.lhs, q.bracket, q.implied) for q in pairs]})


# --- weighted Laplacian ------------------------------------------------------------

def pole_distance(grid: TorusGrid, i: int = 0) -> np.ndarray:
    """Periodic distance of ``(x_i, y_i)`` to the origin."""
    c = grid.coords()
    dx = np.minimum(c[2 * i], 1 - c[2 * i])
    dy = np.minimum(c[2 * i + 1], 1 - c[2 * i + 1])
    return np.broadcast_to(np.sqrt(dx ** 2 + dy ** 2), grid.shape)


def nested_pole_sets(grid: TorusGrid, radii, i: int = 0) -> list:
    """``K_r = {dist to the pole set >= r}`` for each radius."""
    d = pole_distance(grid, i)
    return [d >= r - 1e-12 for r in radii]


def weighted_laplacian_sups(traj: FlowTrajectory, psi_minus: np.ndarray, delta: float, K: np.ndarray,
                            eps0: float) -> tuple[float, float]:
    """``(sup |Delta phi| e^{delta psi_minus}, sup |Delta phi|)`` over ``t >= eps0`` and ``K``."""
    if np.any(K & ~traj.unmasked):
        raise ConfigurationError("K must exclude masked nodes")
    weight = np.exp(delta * psi_minus)
    w_sup = u_sup = 0.0
    for t, s in zip(traj.times, traj.snapshots):
        if t < eps0 - 1e-14:
            continue
        lap = np.abs(laplacian(s, traj.grid))[K]
        u_sup = max(u_sup, float(lap.max()))
        w_sup = max(w_sup, float((lap * weight[K]).max()))
    return w_sup, u_sup


def check_weighted_laplacian(traj: FlowTrajectory, density: DensitySpec, delta: float, K: np.ndarray,
                             eps0: float) -> EstimateRecord:
    if not density.decomposed:
        raise ConfigurationError("weighted Laplacian check needs a decomposed density")
    psi_minus = density._psi_minus_eff
    w_sup, u_sup = weighted_laplacian_sups(traj, psi_minus, delta, K, eps0)
    return EstimateRecord("weighted_laplacian", "sup |Delta phi_t| <= B e^{-delta psi_minus}", w_sup, w_sup,
                          0.0, bool(np.isfinite(w_sup)), {"unweighted": u_sup, "delta": delta})

