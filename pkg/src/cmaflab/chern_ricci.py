"""Model Chern-Ricci flows reduced to the scalar parabolic equation.

A problem consists of an initial metric ``theta_0``, a representative ``chi``
of the canonical class and an adapted density ``prod_i S_i^{a_i}``.  The
reference forms are ``theta_t = theta_0 + t chi`` and the potential solves
``(theta_t + dd^c phi)^n = exp(dphi/dt) f dV``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError, GeometryError
from .estimates import EstimateRecord
from .flow import DensitySpec, FlowTrajectory, model_density, run_flow, zero_forcing
from .grid import FormPath, HermitianField, TorusGrid, _values, affine_path
from .ma_core import complex_hessian, difference_operators, gradient, ma_density, real_hessian


@dataclass(frozen=True, eq=False)
class CRFProblem:
    theta0: HermitianField
    chi: HermitianField
    exponents: tuple = ()
    phi0: np.ndarray | None = None
    p: float | None = None
    name: str = "custom"

    def __post_init__(self):
        if any(a <= -1 for a in self.exponents):
            raise ConfigurationError("log terminal condition violated: every exponent must exceed -1")
        if np.min(self.theta0.min_eigenvalue()) <= 0:
            raise GeometryError("the initial metric must be positive definite")

    @property
    def grid(self) -> TorusGrid:
        return self.theta0.grid

    def density(self) -> DensitySpec:
        return model_density(self.grid, self.exponents, self.p)

    def initial(self) -> np.ndarray:
        return self.grid.zeros() if self.phi0 is None else _values(self.phi0)


# --- maximal existence time ----------------------------------------------------

def max_min_eigenvalue(form: HermitianField) -> float:
    """``max_psi min_x lambda_min(form + dd^c psi)`` over grid fields ``psi``.

    For ``n = 1`` the discrete Laplacian reaches every mean-zero field, so the
    optimum is the mean coefficient.  For ``n = 2`` the problem is a
    second-order cone program (a 2x2 Hermitian matrix is semipositive iff
    ``|(2 Re b, 2 Im b, a - d)| <= a + d``).
    """
    grid = form.grid
    if grid.n == 1:
        return float(np.mean(form.coeffs[..., 0, 0].real))
    import cvxpy as cp
    import scipy.sparse as sp

    _, second = difference_operators(grid.n, grid.N)
    size = grid.size
    psi = cp.Variable(size)
    s = cp.Variable()
    from .ma_core import hessian_tensor

    E = hessian_tensor(grid.n)

    def entry(i, j):
        re = sp.csr_matrix((size, size))
        im = sp.csr_matrix((size, size))
        for (a, b), op in second.items():
            w = E[i, j, a, b] + (E[i, j, b, a] if a != b else 0.0)
            if w.real:
                re = re + w.real * op
            if w.imag:
                im = im + w.imag * op
        c = form.coeffs[..., i, j].reshape(-1)
        return c.real + re @ psi, c.imag + im @ psi

    a, _ = entry(0, 0)
    d, _ = entry(1, 1)
    b_re, b_im = entry(0, 1)
    a, d = a - s, d - s
    cons = [cp.SOC(a + d, cp.vstack([2 * b_re, 2 * b_im, a - d]), axis=0), cp.sum(psi) == 0]
    prob = cp.Problem(cp.Maximize(s), cons)
    prob.solve(solver=cp.CLARABEL)
    if prob.status not in ("optimal", "optimal_inaccurate"):
        raise GeometryError(f"eigenvalue maximization failed: {prob.status}")
    return float(s.value)


def estimate_tmax(theta0: HermitianField, chi: HermitianField, *, t_cap: float = 10.0,
                  rtol: float = 1e-3, atol: float = 1e-4) -> float:
    """Largest ``t <= t_cap`` with ``theta0 + t chi + dd^c psi > 0`` for some grid field ``psi``.

    The margin ``s(t) = max_psi min_x lambda_min`` is concave in ``t``; its
    zero is bracketed and refined by Illinois false position, falling back to
    bisection steps, until the bracket is below ``min(rtol t, atol)``.
    """

    def margin(t):
        return max_min_eigenvalue(HermitianField(theta0.grid, theta0.coeffs + t * chi.coeffs))

    s_lo = margin(0.0)
    if s_lo <= 0:
        raise GeometryError("theta0 admits no positive representative", margin=s_lo)
    s_hi = margin(t_cap)
    if s_hi > 0:
        return t_cap
    lo, hi = 0.0, t_cap
    side = 0

    def width(t):
        return min(rtol * max(t, 1e-12), atol)

    while hi - lo > width(lo) and hi - lo > 1e-12:
        mid = (lo * s_hi - hi * s_lo) / (s_hi - s_lo)
        if not lo < mid < hi:
            mid = 0.5 * (lo + hi)
        s_mid = margin(mid)
        if s_mid > 0:
            lo, s_lo = mid, s_mid
            s_hi = s_hi * 0.5 if side == 1 else s_hi
            side = 1
            probe = mid + 0.5 * width(mid)
        else:
            hi, s_hi = mid, s_mid
            s_lo = s_lo * 0.5 if side == -1 else s_lo
            side = -1
            probe = mid - 0.5 * width(mid)
        # try to close the bracket around the false-position point
        if lo < probe < hi:
            s_probe = margin(probe)
            if s_probe > 0:
                lo, s_lo = probe, s_probe
            else:
                hi, s_hi = probe, s_probe
    return 0.5 * (lo + hi)


# --- flows --------------------------------------------------------------------

@dataclass
class CRFTrajectory:
    problem: CRFProblem
    flow: FlowTrajectory
    path: FormPath
    density: DensitySpec
    meta: dict = field(default_factory=dict)

    def form_at(self, k: int) -> HermitianField:
        t = self.flow.times[k]
        p = self.problem
        return HermitianField(p.grid, p.theta0.coeffs + t * p.chi.coeffs)

    def metric(self, k: int) -> HermitianField:
        """``theta_t + dd^c phi_t`` at stored index ``k``."""
        return HermitianField(self.flow.grid,
                              self.form_at(k).coeffs + complex_hessian(self.flow.snapshots[k], self.flow.grid).coeffs)

    def ricci(self, k: int) -> HermitianField:
        """``-dd^c log det`` of the metric snapshot (pole nodes use their finite representative)."""
        dens = ma_density(self.form_at(k), self.flow.snapshots[k]).density
        return complex_hessian(np.log(dens), self.flow.grid) * -1.0

    def class_defect(self) -> float:
        """``max |form_t - (theta0 + t chi)|``, zero by construction."""
        p = self.problem
        return max(float(np.max(np.abs(self.path.at(t).coeffs - (p.theta0.coeffs + t * p.chi.coeffs))))
                   for t in self.flow.times)


def run_crf(problem: CRFProblem, T: float, schedule=None, *, tol: float = 1e-10,
            tmax: float | None = None) -> CRFTrajectory:
    """Run the reduced flow on ``[0, T]``; ``T`` must stay below the maximal time."""
    grid = problem.grid
    if tmax is None:
        if grid.n == 1 or grid.N <= 8:
            tmax = estimate_tmax(problem.theta0, problem.chi, t_cap=max(10.0, 2 * T))
        elif np.min((problem.theta0 + problem.chi * T).min_eigenvalue()) > 0:
            tmax = np.inf
        else:
            tmax = estimate_tmax(problem.theta0, problem.chi, t_cap=max(10.0, 2 * T))
    if T >= tmax:
        raise DomainError(f"T={T} is not below the maximal time {tmax:.6g}")
    path = affine_path(problem.theta0, problem.chi, T)
    density = problem.density()
    traj = run_flow(problem.initial(), path, density, zero_forcing(), T, schedule, tol=tol)
    return CRFTrajectory(problem, traj, path, density, {"tmax": tmax})


# --- smoothing diagnostic ---------------------------------------------------------

def seminorms(u, grid: TorusGrid, K: np.ndarray) -> tuple[float, float, float]:
    """Discrete ``C^0``, ``C^1`` and ``C^2`` seminorms of ``u`` on ``K``."""
    v = _values(u)
    c0 = float(np.max(np.abs(v[K])))
    c1 = float(np.max(np.linalg.norm(gradient(v, grid), axis=-1)[K]))
    c2 = float(np.max(np.abs(real_hessian(v, grid)), axis=(-1, -2))[K].max())
    return c0, c1, c2


def seminorm_history(traj: FlowTrajectory, K: np.ndarray, eps0: float = 0.0) -> np.ndarray:
    """Rows ``(t, C0, C1, C2)`` for stored ``t >= eps0``."""
    rows = [(t, *seminorms(s, traj.grid, K)) for t, s in zip(traj.times, traj.snapshots) if t >= eps0 - 1e-14]
    return np.array(rows)


def smoothing_diagnostic(crf, eps0: float, K: np.ndarray | None = None, *, early: float = 0.01,
                         late: float = 0.5, factor: float = 2.0) -> EstimateRecord:
    """Seminorms of ``phi_t`` on ``K`` and the decay of the ``C^2`` seminorm from ``early`` to ``late``.

    Passes when the seminorms on ``[eps0, T]`` are finite and, if the run
    reaches ``late``, the ``C^2`` seminorm dropped by at least ``factor``
    (smooth data that start flat are exempt from the decay requirement).
    """
    traj = crf.flow if isinstance(crf, CRFTrajectory) else crf
    K = traj.unmasked if K is None else K & traj.unmasked
    hist = seminorm_history(traj, K, 0.0)
    window = hist[hist[:, 0] >= eps0 - 1e-14]
    bounded = bool(np.all(np.isfinite(window[:, 1:])))
    c2_early = float(np.interp(early, hist[:, 0], hist[:, 3]))
    c2_late = float(np.interp(late, hist[:, 0], hist[:, 3])) if hist[-1, 0] >= late else np.nan
    ratio = c2_early / c2_late if c2_late and np.isfinite(c2_late) else np.inf
    meta = getattr(traj, "meta", {})
    rough = bool(meta.get("rough", meta.get("enveloped", False)))
    decays = ratio >= factor if rough else True
    return EstimateRecord("smoothing", "C^2 seminorm of phi_t decreases away from t = 0",
                          float(ratio), float(factor), float(ratio - factor), bool(bounded and decays),
                          {"c2_early": c2_early, "c2_late": c2_late, "sup_window": window[:, 1:].max(axis=0).tolist()})
