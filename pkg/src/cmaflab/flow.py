"""Implicit time stepping of the parabolic equation

    (omega_t + dd^c phi_t)^n = exp(dphi/dt + F(t, x, phi_t)) f dV,

together with graded schedules, the regularization ladder and slicewise
sub/supersolution checks.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .elliptic import psh_envelope, solve_elliptic
from .errors import AdmissibilityError, ConfigurationError, DomainError, SolverError, StepError
from .grid import (TOL_PSD, FormPath, HermitianField, ScalarField, TorusGrid, _values, divisor_profile,
                   herm_min_eig)
from .ma_core import linear_operator_matrix, log_det_and_weights, solve_linear, total_form

log = logging.getLogger(__name__)

LN10 = np.log(10.0)


# --- forcing -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ForcingSpec:
    """``F(t, x, r)`` as a vectorized ``func(t, r)`` with its ``r``-derivative.

    ``lam_F`` makes ``F + lam_F r`` nondecreasing, ``kappa`` is a Lipschitz
    constant in ``(t, r)`` and ``C_F`` a semi-convexity constant.
    """

    func: Callable
    dr: Callable
    lam_F: float = 0.0
    kappa: float = 0.0
    C_F: float = 0.0
    name: str = "custom"

    def __call__(self, t, r):
        return np.broadcast_to(self.func(t, r), np.shape(r))

    @property
    def is_zero(self) -> bool:
        return self.name == "zero"


def zero_forcing() -> ForcingSpec:
    return ForcingSpec(lambda t, r: np.zeros_like(r), lambda t, r: np.zeros_like(r), name="zero")


def linear_forcing(lam: float) -> ForcingSpec:
    """``F(t, x, r) = lam r``."""
    return ForcingSpec(lambda t, r: lam * np.asarray(r), lambda t, r: np.full(np.shape(r), float(lam)),
                       lam_F=max(-lam, 0.0), kappa=abs(lam), C_F=0.0, name=f"linear({lam:g})")


def tabulated_forcing(r_nodes, values) -> ForcingSpec:
    """Piecewise linear ``F(r)`` through the given table, extended linearly."""
    r_nodes = np.asarray(r_nodes, dtype=float)
    values = np.asarray(values, dtype=float)
    if r_nodes.ndim != 1 or r_nodes.size < 2 or np.any(np.diff(r_nodes) <= 0):
        raise ConfigurationError("forcing table needs at least two increasing r values")
    slopes = np.diff(values) / np.diff(r_nodes)

    def seg(r):
        return np.clip(np.searchsorted(r_nodes, r) - 1, 0, slopes.size - 1)

    def func(t, r):
        r = np.asarray(r, dtype=float)
        k = seg(r)
        return values[k] + slopes[k] * (r - r_nodes[k])

    def dr(t, r):
        return slopes[seg(np.asarray(r, dtype=float))]

    return ForcingSpec(func, dr, lam_F=max(-slopes.min(), 0.0), kappa=float(np.abs(slopes).max()),
                       C_F=0.0, name="table")


def verify_forcing(forcing: ForcingSpec, r_range=(-2.0, 2.0), T: float = 1.0, samples: int = 41) -> dict:
    """Sampled monotonicity, Lipschitz and semi-convexity margins of ``F``."""
    rs = np.linspace(*r_range, samples)
    ts = np.linspace(0.0, T, samples)
    R, Tt = np.meshgrid(rs, ts, indexing="ij")
    Fv = forcing(Tt, R)
    mono = np.diff(Fv + forcing.lam_F * R, axis=0)
    dr = np.abs(np.diff(Fv, axis=0)) / np.diff(rs)[:, None]
    dt = np.abs(np.diff(Fv, axis=1)) / np.diff(ts)[None, :] if samples > 1 else np.zeros(1)
    second = (Fv[2:] - 2 * Fv[1:-1] + Fv[:-2]) / (rs[1] - rs[0]) ** 2
    return {
        "monotone_margin": float(mono.min()),
        "lipschitz": float(max(dr.max(), dt.max())),
        "lipschitz_margin": float(forcing.kappa - max(dr.max(), dt.max())),
        "convexity_margin": float(second.min() + forcing.C_F),
    }


# --- densities -----------------------------------------------------------------

def _cell_average(func, grid: TorusGrid, subdivisions: int = 256) -> float:
    """Average of ``func(x, y)`` over the cell ``[-h/2, h/2]^2`` by the midpoint rule."""
    h = grid.h
    s = (np.arange(subdivisions) + 0.5) / subdivisions * h - h / 2
    X, Y = np.meshgrid(s, s, indexing="ij")
    return float(np.mean(func(X, Y)))


@dataclass(frozen=True, eq=False)
class DensitySpec:
    """Density ``f`` with optional decomposition ``f = exp(psi_plus - psi_minus)``.

    ``exponents`` records the model factors ``prod_i S_i^{a_i}``,
    ``S_i = sin^2(pi x_i) + sin^2(pi y_i)``.  Nodes on ``{S_i = 0}`` carry the
    cell average of the factor so that the nodal density is the discrete
    measure of the cell; ``psi_plus``/``psi_minus`` keep the pole mask there.
    """

    grid: TorusGrid
    f: np.ndarray
    p: float = 2.0
    psi_plus: ScalarField | None = None
    psi_minus: ScalarField | None = None
    exponents: tuple = ()
    level: int | None = None  # clipping level, None = unclipped

    @property
    def decomposed(self) -> bool:
        return self.psi_plus is not None

    @property
    def log_f(self) -> np.ndarray:
        return np.log(self.f)

    @property
    def mask(self) -> np.ndarray:
        mask = np.zeros(self.grid.shape, dtype=bool)
        for fld in (self.psi_plus, self.psi_minus):
            if fld is not None and fld.mask is not None:
                mask |= fld.mask
        return mask

    def lp_norm(self, p: float | None = None) -> float:
        p = self.p if p is None else p
        return float(self.grid.integrate(self.f ** p) ** (1.0 / p))

    def inverse_weight_lp(self) -> float:
        """Discrete ``L^p`` norm of ``exp(-psi_minus)``."""
        if self.psi_minus is None:
            return 1.0
        return float(self.grid.integrate(np.exp(-self.p * self._psi_minus_eff)) ** (1.0 / self.p))

    @property
    def _psi_minus_eff(self) -> np.ndarray:
        if self.exponents:
            return _model_psi(self.grid, self.exponents, negative=True, level=self.level)
        return self.psi_minus.values

    def mass(self) -> float:
        return self.grid.integrate(self.f)

    def clipped(self, level: int) -> "DensitySpec":
        """Bounded approximant with ``psi_pm`` clipped below at ``-level ln 10``."""
        if not self.exponents:
            return self
        return model_density(self.grid, self.exponents, self.p, level=level)


def constant_density(grid: TorusGrid, value: float = 1.0, p: float = 2.0) -> DensitySpec:
    if value <= 0:
        raise ConfigurationError("constant density must be positive")
    return DensitySpec(grid, np.full(grid.shape, float(value)), p)


def smooth_density(grid: TorusGrid, values, p: float = 2.0) -> DensitySpec:
    f = np.broadcast_to(np.asarray(values, dtype=float), grid.shape).copy()
    if np.any(f <= 0) or not np.all(np.isfinite(f)):
        raise ConfigurationError("smooth density must be positive and finite")
    return DensitySpec(grid, f, p)


def _factor_psi(grid: TorusGrid, i: int, a: float, level: int | None) -> np.ndarray:
    """``a log S_i`` with clipping and a cell-average representative on ``S_i = 0``."""
    S = divisor_profile(grid, i)
    floor = -np.inf if level is None else -level * LN10
    sign = 1.0 if a > 0 else -1.0

    def clipped(s):
        with np.errstate(divide="ignore"):
            psi = sign * a * np.log(s)  # psi_plus for a > 0, psi_minus for a < 0
        return np.maximum(psi, floor)

    with np.errstate(divide="ignore"):
        vals = clipped(S)
    zero = S == 0
    if np.any(zero):
        avg = _cell_average(lambda x, y: np.exp(sign * clipped(np.sin(np.pi * x) ** 2 + np.sin(np.pi * y) ** 2)),
                            grid)
        vals = np.where(zero, sign * np.log(avg), vals)
    return vals


def _model_psi(grid: TorusGrid, exponents, *, negative: bool, level=None) -> np.ndarray:
    out = grid.zeros()
    for i, a in enumerate(exponents):
        if a == 0 or (a < 0) != negative:
            continue
        out = out + _factor_psi(grid, i, a, level)
    return out


def model_density(grid: TorusGrid, exponents, p: float | None = None, *, level: int | None = None) -> DensitySpec:
    """``f = prod_i S_i^{a_i}`` decomposed as ``exp(psi_plus - psi_minus)``.

    Requires ``a_i > -1`` (finite mass).  ``psi_plus = sum_{a_i > 0} a_i log S_i``
    and ``psi_minus = -sum_{a_i < 0} a_i log S_i``.  The default ``p`` sits
    halfway into the integrability range of ``exp(-psi_minus)``.
    """
    exponents = tuple(float(a) for a in exponents)
    if p is None:
        worst = max([-a for a in exponents if a < 0], default=0.0)
        p = 2.0 if worst == 0 else 0.5 * (1.0 + 1.0 / worst)
    if len(exponents) > grid.n:
        raise ConfigurationError("more exponents than complex directions")
    if any(a <= -1 for a in exponents):
        raise ConfigurationError("exponents must exceed -1")
    if any(a < 0 for a in exponents) and p * max(-a for a in exponents) >= 1:
        log.warning("exp(-psi_minus) is not L^%g-integrable for exponents %s", p, exponents)
    plus = _model_psi(grid, exponents, negative=False, level=level)
    minus = _model_psi(grid, exponents, negative=True, level=level)
    f = np.exp(plus - minus)
    mask_p = np.zeros(grid.shape, dtype=bool)
    mask_m = np.zeros(grid.shape, dtype=bool)
    for i, a in enumerate(exponents):
        if a > 0:
            mask_p |= divisor_profile(grid, i) == 0
        elif a < 0:
            mask_m |= divisor_profile(grid, i) == 0
    psi_plus = ScalarField(grid, plus, mask=mask_p if mask_p.any() else None)
    psi_minus = ScalarField(grid, minus, mask=mask_m if mask_m.any() else None)
    return DensitySpec(grid, f, p, psi_plus, psi_minus, exponents, level)


# --- time schedules --------------------------------------------------------

def graded_times(T: float, steps: int, ratio: float = 1.0, cap_factor: float = 1.5) -> np.ndarray:
    """Time grid ``0 = t_0 < ... < t_steps = T``.

    Increments grow geometrically, ``d_k = min(d_0 ratio^k, cap_factor T / steps)``,
    with ``d_0`` chosen so that they add up to ``T``; ``ratio = 1`` is uniform.
    """
    if T < 0 or steps < 0:
        raise ConfigurationError("T and steps must be nonnegative")
    if T == 0 or steps == 0:
        return np.array([0.0])
    if ratio <= 1.0:
        return np.linspace(0.0, T, steps + 1)
    cap = cap_factor * T / steps
    k = np.arange(steps)

    def total(d0):
        return np.minimum(d0 * ratio ** k, cap).sum()

    lo, hi = 0.0, T
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if total(mid) < T else (lo, mid)
    d = np.minimum(hi * ratio ** k, cap)
    t = np.concatenate([[0.0], np.cumsum(d)])
    t[-1] = T
    return t


def refine_times(times: np.ndarray) -> np.ndarray:
    """Insert midpoints: halves every increment of the grid."""
    mids = 0.5 * (times[1:] + times[:-1])
    out = np.empty(times.size + mids.size)
    out[0::2] = times
    out[1::2] = mids
    return out


@dataclass(frozen=True)
class Schedule:
    T: float
    steps: int
    ratio: float = 1.0

    def times(self) -> np.ndarray:
        return graded_times(self.T, self.steps, self.ratio)


# --- states and trajectories ------------------------------------------------

@dataclass
class FlowState:
    t: float
    phi: np.ndarray
    phi_prev: np.ndarray | None = None
    t_prev: float | None = None
    iterations: int = 0
    residual: float = 0.0


@dataclass
class FlowTrajectory:
    grid: TorusGrid
    times: np.ndarray
    snapshots: list
    mask: np.ndarray | None = None
    residuals: list = field(default_factory=list)
    failed: bool = False
    failure: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.times.size and np.any(np.diff(self.times) <= 0):
            raise ConfigurationError("trajectory times must be strictly increasing")

    @property
    def unmasked(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.grid.shape, dtype=bool)
        return ~self.mask

    @property
    def values(self) -> np.ndarray:
        return np.stack(self.snapshots)

    def __len__(self):
        return len(self.snapshots)

    def phi_dot(self) -> np.ndarray:
        """Backward differences; entry 0 is NaN."""
        P = self.values
        out = np.full(P.shape, np.nan)
        if len(P) > 1:
            dt = np.diff(self.times).reshape((-1,) + (1,) * (P.ndim - 1))
            out[1:] = np.diff(P, axis=0) / dt
        return out

    def phi_ddot(self) -> np.ndarray:
        """Nonuniform centered second differences; first and last entries are NaN."""
        P = self.values
        out = np.full(P.shape, np.nan)
        if len(P) > 2:
            shape = (-1,) + (1,) * (P.ndim - 1)
            d = np.diff(self.times)
            dl, dr = d[:-1].reshape(shape), d[1:].reshape(shape)
            out[1:-1] = 2.0 * ((P[2:] - P[1:-1]) / dr - (P[1:-1] - P[:-2]) / dl) / (dl + dr)
        return out

    def at(self, t: float) -> np.ndarray:
        """Linear interpolation in time between stored snapshots."""
        if t < self.times[0] - 1e-14 or t > self.times[-1] + 1e-12:
            raise DomainError(f"t={t} outside the stored range")
        k = int(np.clip(np.searchsorted(self.times, t) - 1, 0, len(self.times) - 2)) if len(self.times) > 1 else 0
        if len(self.times) == 1:
            return self.snapshots[0]
        t0, t1 = self.times[k], self.times[k + 1]
        w = (t - t0) / (t1 - t0)
        return (1 - w) * self.snapshots[k] + w * self.snapshots[k + 1]

    def time_series(self) -> np.ndarray:
        """Rows ``(t, min phi, max phi, max phi_dot, min phi_dot, max t^2 phi_ddot)`` over unmasked nodes."""
        m = self.unmasked
        P, Pd, Pdd = self.values, self.phi_dot(), self.phi_ddot()
        rows = []
        for k, t in enumerate(self.times):
            rows.append([t, P[k][m].min(), P[k][m].max(), Pd[k][m].max(), Pd[k][m].min(),
                         (t * t * Pdd[k][m]).max()])
        return np.array(rows)


# --- implicit step -----------------------------------------------------------

def _reference_potential(omega: HermitianField, density: DensitySpec, cache: dict) -> np.ndarray:
    """A strictly admissible potential for ``omega`` (zero if ``omega`` is positive)."""
    if np.min(omega.min_eigenvalue()) > 0:
        return omega.grid.zeros()
    key = id(omega)
    if key not in cache:
        cache.clear()
        cache[key] = solve_elliptic(omega, density.f, tol=1e-8).phi.values
    return cache[key]


def step_implicit(state: FlowState, path: FormPath, density: DensitySpec, forcing: ForcingSpec, dt: float,
                  tol: float = 1e-10, *, max_iter: int = 40, _cache: dict | None = None) -> FlowState:
    """One backward Euler step solved by damped Newton.

    Solves ``log det(omega_{t+dt} + dd^c phi) - log f - F(t+dt, phi) - (phi - phi_t)/dt = 0``.
    """
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    if forcing.lam_F > 0 and dt >= 1.0 / (2.0 * forcing.lam_F):
        raise ConfigurationError(f"dt={dt} violates dt < 1/(2 lam_F)")
    grid = path.grid
    t1 = state.t + dt
    omega = path.at(min(t1, path.T))
    logf = density.log_f
    prev = state.phi

    def residual(u):
        logdet, W, lam = log_det_and_weights(omega, u)
        if np.any(lam <= 0):
            return None, None
        return logdet - logf - forcing(t1, u) - (u - prev) / dt, W

    phi = prev.copy()
    R, W = residual(phi)
    if R is None:
        ref = _reference_potential(omega, density, _cache if _cache is not None else {})
        for s in (0.05, 0.1, 0.2, 0.4, 0.7, 1.0):
            phi = (1 - s) * prev + s * ref
            R, W = residual(phi)
            if R is not None:
                break
        else:
            raise AdmissibilityError(f"no admissible initial guess for the step at t={t1:.6g}")
    history = []
    for it in range(max_iter + 1):
        res = float(np.max(np.abs(R)))
        history.append(res)
        if res <= tol:
            return FlowState(t1, phi, prev, state.t, it, res)
        if it == max_iter:
            break
        diag = -(forcing.dr(t1, phi) + 1.0 / dt)
        J = linear_operator_matrix(W, grid, diagonal=diag)
        shift = float(np.mean(diag))
        d = solve_linear(J, -R.ravel(), grid, weights=W, shift=shift).reshape(grid.shape)
        step = 1.0
        while True:
            trial = phi + step * d
            Rt, Wt = residual(trial)
            if Rt is not None and (np.max(np.abs(Rt)) < (1 - 1e-4 * step) * res or step < 1e-3):
                break
            step *= 0.5
            if step < 1e-6:
                raise StepError(f"line search stalled at t={t1:.6g}", history)
        phi, R, W = trial, Rt, Wt
    raise StepError(f"Newton failed at t={t1:.6g}: residual {history[-1]:.3e}", history)


def _is_psh(omega: HermitianField, u: np.ndarray, tol: float) -> bool:
    M = total_form(omega, u)
    return bool(np.min(M.min_eigenvalue()) >= -tol * M.scale())


def run_flow(phi0, path: FormPath, density: DensitySpec, forcing: ForcingSpec, T: float,
             schedule=None, *, tol: float = 1e-10, max_halvings: int = 8) -> FlowTrajectory:
    """Integrate from ``phi0`` on ``[0, T]`` storing a snapshot at every scheduled time.

    ``schedule`` is a :class:`Schedule`, an explicit array of times, or ``None``
    (100 uniform steps).  Scheduled steps that fail are retried with halved
    substeps; a step that still fails ends the run with a partial trajectory.
    """
    grid = path.grid
    if T > path.T * (1 + 1e-12):
        raise DomainError(f"T={T} exceeds the form path horizon {path.T}")
    if schedule is None:
        times = graded_times(T, 100)
    elif isinstance(schedule, Schedule):
        times = graded_times(T, schedule.steps, schedule.ratio)
    else:
        times = np.asarray(schedule, dtype=float)
    u0 = _values(phi0).astype(float).copy()
    meta = {"enveloped": False}
    omega0 = path.at(0.0)
    if not _is_psh(omega0, u0, TOL_PSD):
        log.warning("initial datum is not omega_0-psh; replacing it by its envelope")
        u0 = psh_envelope(omega0, u0).values
        meta["enveloped"] = True
    traj = FlowTrajectory(grid, times[:1], [u0], mask=density.mask if density.mask.any() else None, meta=meta)
    state = FlowState(0.0, u0)
    cache: dict = {}
    stored_times = [0.0]
    for t_next in times[1:]:
        try:
            state = _advance(state, t_next, path, density, forcing, tol, max_halvings, cache)
        except (SolverError, AdmissibilityError) as exc:
            traj.failed = True
            traj.failure = f"t={t_next:.6g}: {exc}"
            log.error("flow stopped: %s", traj.failure)
            break
        stored_times.append(float(t_next))
        traj.snapshots.append(state.phi)
        traj.residuals.append(state.residual)
    traj.times = np.array(stored_times)
    return traj


def _advance(state, t_next, path, density, forcing, tol, max_halvings, cache):
    dt_cap = 1.0 / (2.0 * forcing.lam_F) if forcing.lam_F > 0 else np.inf
    pieces = max(1, int(np.ceil((t_next - state.t) / dt_cap * (1 + 1e-9))))
    for level in range(max_halvings + 1):
        n_sub = pieces * 2 ** level
        dt = (t_next - state.t) / n_sub
        try:
            s = state
            for k in range(n_sub):
                s = step_implicit(s, path, density, forcing, dt, tol, _cache=cache)
            s.t = float(t_next)
            return s
        except (StepError, AdmissibilityError) as exc:
            if level == max_halvings:
                raise
            log.info("step to t=%.6g failed (%s); halving", t_next, exc)


# --- regularization ladder ---------------------------------------------------

def gaussian_mollify(u, grid: TorusGrid, sigma: float) -> np.ndarray:
    """Periodic Gaussian blur of width ``sigma`` (in units of the period)."""
    v = _values(u)
    if sigma <= 0:
        return v.copy()
    k = np.fft.fftfreq(grid.N, d=grid.h)
    decay = np.exp(-2.0 * (np.pi * sigma * k) ** 2)
    kernel = np.ones(grid.shape)
    for a in range(grid.real_dim):
        shape = [1] * grid.real_dim
        shape[a] = grid.N
        kernel = kernel * decay.reshape(shape)
    return np.real(np.fft.ifftn(np.fft.fftn(v) * kernel))


def lift_path(path: FormPath, eps: float) -> FormPath:
    eye = HermitianField.identity(path.grid)
    return FormPath(base=path.base + eye * eps, sampler=lambda t: path.sampler(t) + eye * eps, T=path.T,
                    A=path.A, delta=path.delta + eps, kind=path.kind + "+lift", velocity=path.velocity)


def sup_distance(a: FlowTrajectory, b: FlowTrajectory, eps: float = 0.0) -> float:
    """``sup |phi^a - phi^b|`` over common stored times ``t >= eps`` and unmasked nodes."""
    common = np.intersect1d(np.round(a.times, 14), np.round(b.times, 14))
    common = common[common >= eps - 1e-14]
    m = a.unmasked & b.unmasked
    worst = 0.0
    for t in common:
        ia = int(np.argmin(np.abs(a.times - t)))
        ib = int(np.argmin(np.abs(b.times - t)))
        worst = max(worst, float(np.max(np.abs(a.snapshots[ia] - b.snapshots[ib])[m])))
    return worst


@dataclass
class LadderReport:
    levels: list
    trajectories: list
    distances: list
    eps: float

    @property
    def monotone(self) -> bool:
        d = self.distances
        return all(d[k + 1] <= d[k] * (1 + 1e-9) + 1e-12 for k in range(len(d) - 1))


def regularization_ladder(phi0, path: FormPath, density: DensitySpec, forcing: ForcingSpec, levels: int, *,
                          T: float | None = None, schedule=None, sigma0: float = 0.0, eps: float = 0.1,
                          tol: float = 1e-10) -> LadderReport:
    """Run the bounded approximants ``j = 1..levels`` and their successive distances.

    Level ``j`` clips ``psi_pm`` at ``-j ln 10``, blurs ``phi0`` with width
    ``2^-j sigma0`` (followed by the envelope) and, if the path is degenerate,
    lifts it by ``2^-j omega_X``.  Distances are sup norms on ``[eps, T]``
    over unmasked nodes.
    """
    if levels < 1:
        raise ConfigurationError("the ladder needs at least one level")
    T = path.T if T is None else T
    grid = path.grid
    degenerate = np.min(path.base.min_eigenvalue()) <= TOL_PSD
    trajs = []
    for j in range(1, levels + 1):
        p_j = lift_path(path, 2.0 ** -j) if degenerate else path
        d_j = density.clipped(j)
        u0 = gaussian_mollify(phi0, grid, sigma0 * 2.0 ** -j)
        traj = run_flow(u0, p_j, d_j, forcing, T, schedule, tol=tol)
        if traj.failed:
            raise SolverError(f"ladder level {j} failed: {traj.failure}")
        traj.meta["level"] = j
        trajs.append(traj)
    dists = [sup_distance(trajs[k], trajs[k + 1], eps) for k in range(len(trajs) - 1)]
    return LadderReport(list(range(1, levels + 1)), trajs, dists, eps)


# --- slice checks -------------------------------------------------------------

@dataclass
class SliceMargin:
    t: float
    margin: np.ndarray
    minimum: float


def check_subsolution_slice(t: float, phi, phi_dot, path: FormPath, density: DensitySpec,
                            forcing: ForcingSpec, direction: str = "sub") -> SliceMargin:
    """Nodewise ``MA - exp(phi_dot + F) f`` (sub) or its negative (super)."""
    if direction not in ("sub", "super"):
        raise ConfigurationError("direction must be 'sub' or 'super'")
    u = _values(phi)
    omega = path.at(t)
    M = total_form(omega, u)
    lam = herm_min_eig(M.coeffs)
    lhs = np.where(lam >= -TOL_PSD * M.scale(), np.maximum(M.det(), 0.0), -np.inf)
    rhs = np.exp(_values(phi_dot) + forcing(t, u)) * density.f
    margin = lhs - rhs if direction == "sub" else rhs - lhs
    valid = ~density.mask
    return SliceMargin(t, margin, float(margin[valid].min()))


# --- time rescaled subsolutions ---------------------------------------------

def rescaling_constants(s: float, A1: float) -> tuple[float, float]:
    """``(lambda_s, alpha_s)`` for the time rescaling by ``s``."""
    lam = abs(s - 1.0) / s
    alpha = s * (1.0 - lam) * (1.0 - A1 * abs(s - 1.0))
    return lam, alpha


def rescaling_epsilon(eps0: float, A1: float, samples: int = 201) -> float:
    """Largest ``eps_1 <= 1`` with ``alpha_s lambda_s / (s (1 - lambda_s)(1 - alpha_s)) >= eps_1`` on the window."""
    worst = 1.0
    for s in np.linspace(1 - eps0, 1 + eps0, samples)[1:-1]:
        if s == 1.0:
            continue
        lam, alpha = rescaling_constants(s, A1)
        if alpha >= 1.0:
            continue
        worst = min(worst, alpha * lam / (s * (1 - lam) * (1 - alpha)))
    return max(worst, 1e-3)


def path_shrink_constant(path: FormPath, eps0: float, T_prime: float, samples: int = 11) -> float:
    """Smallest ``A_1`` with ``omega_t >= (1 - A_1 |s - 1|) omega_{ts}`` on sampled ``(t, s)``."""
    worst = 0.0
    for t in np.linspace(T_prime / samples, T_prime, samples):
        om = path.at(t).coeffs
        for s in (1 - eps0 * 0.999, 1 + eps0 * 0.999):
            if t * s > path.T:
                continue
            oms = path.at(t * s).coeffs
            # need om - (1 - a|s-1|) oms >= 0: a = (1 - lowest eigenvalue of om relative to oms) / |s - 1|
            scale = float(np.max(np.abs(oms)))
            diff_ok = herm_min_eig(om - oms) >= -TOL_PSD * scale
            w, v = np.linalg.eigh(oms)
            definite = w[..., 0] > TOL_PSD * scale
            if np.any(~definite & ~diff_ok):
                return np.inf
            S = v * (np.maximum(w, TOL_PSD * scale) ** -0.5)[..., None, :]
            rel = np.linalg.eigvalsh(np.conj(np.swapaxes(S, -1, -2)) @ om @ S)[..., 0]
            need = np.where(diff_ok, 0.0, (1.0 - rel) / abs(s - 1.0))
            worst = max(worst, float(need.max()))
    return max(worst, 0.0)


@dataclass
class RescaledTrajectory:
    trajectory: FlowTrajectory
    s: float
    alpha: float
    lam: float
    eps1: float
    C: float


def rescale_subsolution(traj: FlowTrajectory, s: float, rho1, *, A1: float = 0.0, C: float = 1.0,
                        eps0: float = 0.1, eps1: float | None = None) -> RescaledTrajectory:
    """``u^s(t) = (alpha_s / s) phi(ts) + (1 - alpha_s) rho_1 - C |s - 1| t`` on ``t s <= T``."""
    if not abs(s - 1.0) < eps0:
        raise DomainError(f"|s - 1| = {abs(s - 1):.3g} outside the window eps0 = {eps0}")
    lam, alpha = rescaling_constants(s, A1)
    rho = _values(rho1)
    T = traj.times[-1]
    keep = traj.times * s <= T * (1 + 1e-12)
    snaps = [alpha / s * traj.at(min(t * s, T)) + (1 - alpha) * rho - C * abs(s - 1) * t
             for t in traj.times[keep]]
    out = FlowTrajectory(traj.grid, traj.times[keep], snaps, mask=traj.mask, meta={"rescaled": s})
    return RescaledTrajectory(out, s, alpha, lam,
                              rescaling_epsilon(eps0, A1) if eps1 is None else eps1, C)


def subsolution_slices(traj: FlowTrajectory, path: FormPath, density: DensitySpec, forcing: ForcingSpec,
                       direction: str = "sub", start: int = 2) -> list:
    """Slice margins at stored times ``t_k``, ``k >= start``, with backward-difference ``phi_dot``."""
    dots = traj.phi_dot()
    return [check_subsolution_slice(traj.times[k], traj.snapshots[k], dots[k], path, density, forcing, direction)
            for k in range(max(start, 1), len(traj))]


def fit_rescaling_constant(traj: FlowTrajectory, path: FormPath, density: DensitySpec, s: float, rho1, *,
                           A1: float = 0.0, eps0: float = 0.1, start: int = 2) -> float:
    """Smallest ``C`` making ``u^s`` a slicewise subsolution (``F = 0``) at stored times ``k >= start``.

    The ``-C |s - 1| t`` term does not change ``dd^c u^s``, so the slice
    inequality reads ``log det >= u_dot(C = 0) - C |s - 1| + log f``.
    Returns ``inf`` when some slice is not admissible.
    """
    base = rescale_subsolution(traj, s, rho1, A1=A1, C=0.0, eps0=eps0).trajectory
    dots = base.phi_dot()
    valid = ~density.mask
    need = -np.inf
    for k in range(max(start, 1), len(base)):
        M = total_form(path.at(base.times[k]), base.snapshots[k])
        if np.min(herm_min_eig(M.coeffs)[valid]) <= 0:
            return np.inf
        gap = dots[k] + density.log_f - np.log(M.det())
        need = max(need, float(gap[valid].max()) / abs(s - 1.0))
    return float(max(need, 0.0))
