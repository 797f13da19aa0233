"""Static Monge-Ampere equations, psh envelopes and elliptic-level principles."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigurationError, PreconditionError, SolverError
from .grid import TOL_PSD, HermitianField, ScalarField, TorusGrid, _values, herm_min_eig, herm_min_eigvec
from .ma_core import (linear_operator_matrix, log_det_and_weights, ma_density,
                      solve_linear, total_form)

log = logging.getLogger(__name__)

#: zeros of the density are floored at this fraction of its mean
DENSITY_FLOOR = 1e-6


@dataclass
class EllipticSolution:
    phi: ScalarField
    c: float
    residual: float
    iterations: int
    history: list = field(default_factory=list)


def _floored_log_density(f, dV, grid: TorusGrid) -> np.ndarray:
    fv = _values(f) * (_values(dV) if dV is not None else 1.0)
    fv = np.broadcast_to(fv, grid.shape)
    if np.any(fv < 0) or not np.any(fv > 0):
        raise ConfigurationError("density must be nonnegative with positive mass")
    floor = DENSITY_FLOOR * float(fv.mean())
    return np.log(np.maximum(fv, floor))


def _newton_elliptic(theta: HermitianField, logf: np.ndarray, phi: np.ndarray, c: float, tol: float,
                     max_iter: int, history: list):
    grid = theta.grid
    size = grid.size
    ones = np.ones(size)
    border_col = sp.csr_matrix(-ones.reshape(-1, 1))
    border_row = sp.csr_matrix(ones.reshape(1, -1) / size)

    def residual(u, cc):
        logdet, W, lam = log_det_and_weights(theta, u)
        if np.any(lam <= 0):
            return None, None, lam
        return logdet - logf - cc, W, lam

    R, W, lam = residual(phi, c)
    if R is None:
        raise SolverError("initial guess is not strictly admissible", history)
    for it in range(1, max_iter + 1):
        res = float(np.max(np.abs(np.expm1(R))))
        history.append(res)
        if res <= tol:
            return phi, c, res, it - 1
        L = linear_operator_matrix(W, grid)
        J = sp.bmat([[L, border_col], [border_row, None]], format="csr")
        rhs = np.concatenate([-R.ravel(), [-phi.mean()]])
        sol = solve_linear(J, rhs, grid, weights=W, bordered=True)
        dphi, dc = sol[:-1].reshape(grid.shape), float(sol[-1])
        step = 1.0
        base = np.max(np.abs(R))
        while True:
            trial_phi, trial_c = phi + step * dphi, c + step * dc
            Rt, Wt, lam_t = residual(trial_phi, trial_c)
            if Rt is not None and (np.max(np.abs(Rt)) < (1 - 1e-4 * step) * base or step < 1e-3):
                break
            step *= 0.5
            if step < 1e-8:
                raise SolverError(f"line search stalled at iteration {it}", history)
        if step < 1.0:
            log.debug("damped Newton step %.3g at iteration %d", step, it)
        phi, c, R, W = trial_phi, trial_c, Rt, Wt
    res = float(np.max(np.abs(np.expm1(R))))
    history.append(res)
    if res <= tol:
        return phi, c, res, max_iter
    raise SolverError(f"Newton did not converge: residual {res:.3e} after {max_iter} iterations", history)


def solve_elliptic(theta: HermitianField, f, dV=None, tol: float = 1e-10, *, max_iter: int = 80,
                   initial=None) -> EllipticSolution:
    """Solve ``(theta + dd^c phi)^n = e^c f dV`` with ``sup phi = 0``.

    The residual is ``max |det(theta + dd^c phi) / (e^c f dV) - 1|``.  When
    ``theta`` is degenerate the iteration is warm-started from the lifted forms
    ``theta + eps omega_X`` with ``eps = 1, 1/4, 1/16, ...`` until the
    iterate becomes strictly admissible for ``theta`` itself.
    """
    grid = theta.grid
    logf = _floored_log_density(f, dV, grid)
    history: list = []
    phi = grid.zeros() if initial is None else _values(initial) - _values(initial).mean()
    lam0 = herm_min_eig(total_form(theta, phi).coeffs)
    eye = HermitianField.identity(grid)
    if np.min(lam0) <= 0:
        eps = 1.0
        while True:
            lifted = theta + eye * eps
            c0 = _mass_matching_c(lifted, phi, logf)
            phi, _, _, _ = _newton_elliptic(lifted, logf, phi, c0, tol=max(tol, 1e-6), max_iter=max_iter,
                                            history=history)
            if np.min(herm_min_eig(total_form(theta, phi).coeffs)) > 0:
                break
            eps *= 0.25
            if eps < 1e-8:
                raise SolverError("lifted warm start never became admissible", history)
    c = _mass_matching_c(theta, phi, logf)
    phi, c, res, its = _newton_elliptic(theta, logf, phi, c, tol, max_iter, history)
    phi = phi - phi.max()
    return EllipticSolution(ScalarField(grid, phi), float(c), res, its, history)


def _mass_matching_c(theta: HermitianField, phi: np.ndarray, logf: np.ndarray) -> float:
    mass = np.sum(np.maximum(total_form(theta, phi).det(), 0.0))
    return float(np.log(mass / np.sum(np.exp(logf))))


# --- psh envelope -------------------------------------------------------------

def _envelope_residual(omega: HermitianField, u: np.ndarray, v: np.ndarray):
    lam = herm_min_eig(total_form(omega, v).coeffs)
    return float(np.max(v - u)), float(-np.min(lam))


def envelope_sweep(omega: HermitianField, u, tol: float = 1e-12, max_sweeps: int = 200000) -> ScalarField:
    """Jacobi local corrections ``v <- min(u, v + h^2 lambda_min(omega + dd^c v))``.

    The centre-node coefficient of the discrete ``dd^c`` is ``-1/h^2`` times the
    identity, so the update sets each node to the largest value keeping its own
    eigenvalue nonnegative.  Monotone and slow: used as a reference solver.
    """
    grid = omega.grid
    uv = _values(u)
    v = uv.copy()
    h2 = grid.h ** 2
    for _ in range(max_sweeps):
        lam = herm_min_eig(total_form(omega, v).coeffs)
        new = np.minimum(uv, v + h2 * lam)
        if np.max(np.abs(new - v)) < tol * h2:
            return ScalarField(grid, new)
        v = new
    raise SolverError("envelope sweep did not converge")


def psh_envelope(omega: HermitianField, u, tol: float = 1e-10, *, max_policy: int = 200) -> ScalarField:
    """Largest grid field ``v <= u`` with ``omega + dd^c v`` semipositive.

    Policy iteration on ``max(v - u, -h^2 lambda_min(omega + dd^c v)) = 0``:
    each node either touches the obstacle or carries the linear equation
    ``e^* (omega + dd^c v) e = 0`` for the current lowest eigenvector ``e``.
    For ``n = 1`` the operator is an M-matrix and the iteration terminates
    exactly; otherwise Jacobi local corrections finish the job.
    """
    grid = omega.grid
    uv = _values(u)
    if np.any(~np.isfinite(uv)):
        raise ConfigurationError("envelope input must be bounded")
    h2 = grid.h ** 2
    v = uv.copy()
    if _envelope_residual(omega, uv, uv)[1] <= tol:
        return ScalarField(grid, uv)
    obstacle = None
    for _ in range(max_policy):
        M = total_form(omega, v)
        lam = herm_min_eig(M.coeffs)
        e = herm_min_eigvec(M.coeffs)
        pde_val = -h2 * lam
        new_obstacle = (v - uv) >= pde_val
        if obstacle is not None and np.array_equal(new_obstacle, obstacle):
            break
        obstacle = new_obstacle
        W = np.einsum("...i,...j->...ij", e, np.conj(e))
        L = linear_operator_matrix(W, grid)
        g = np.real(np.einsum("...i,...ij,...j->...", np.conj(e), omega.coeffs, e))
        ob = obstacle.ravel()
        Dob = sp.diags(ob.astype(float))
        Dpde = sp.diags((~ob).astype(float))
        A = (Dob + Dpde @ L).tocsc()
        rhs = np.where(ob, uv.ravel(), -g.ravel())
        if not np.any(ob):
            break
        try:
            v_new = spla.spsolve(A, rhs).reshape(grid.shape)
        except RuntimeError:
            break
        if not np.all(np.isfinite(v_new)):
            break
        v = v_new
    over, neg = _envelope_residual(omega, uv, v)
    if over > tol or neg > tol:
        # polish (or recover) with monotone local corrections from a feasible start
        start = np.minimum(uv, v) if np.all(np.isfinite(v)) else uv
        v = envelope_sweep(omega, start, tol=tol).values
        over, neg = _envelope_residual(omega, uv, v)
    if over > tol or neg > max(tol, 10 * TOL_PSD):
        raise SolverError(f"envelope stagnated: max(v-u)={over:.2e}, worst eigenvalue {-neg:.2e}")
    return ScalarField(grid, v)


# --- minimum principle -----------------------------------------------------

def domain_boundary(D: np.ndarray) -> np.ndarray:
    """Nodes of ``D`` having an axis neighbour outside ``D`` (periodic)."""
    D = np.asarray(D, dtype=bool)
    edge = np.zeros_like(D)
    for ax in range(D.ndim):
        for s in (1, -1):
            edge |= D & ~np.roll(D, s, axis=ax)
    return edge


@dataclass
class MinimumPrincipleVerdict:
    interior_min: float
    boundary_min: float
    margin: float
    precondition_ok: bool
    precondition_detail: str
    passed: bool


def check_minimum_principle(theta: HermitianField, u, v, D, c: float, *, eps0: float = 1e-3,
                            tol: float = 1e-8) -> MinimumPrincipleVerdict:
    """Compare ``min_D (v - u)`` with ``min_{boundary D} (v - u)``.

    Preconditions: ``theta + dd^c u >= eps0 omega_X`` on ``D`` and
    ``MA(v) <= c MA(u)`` on ``D`` with ``0 <= c < 1``.  A violated
    ``c`` raises; the other preconditions are reported in the verdict.
    """
    if not 0.0 <= c < 1.0:
        raise PreconditionError(f"c must lie in [0, 1), got {c}")
    D = np.asarray(D, dtype=bool)
    edge = domain_boundary(D)
    if not edge.any() or not (D & ~edge).any():
        raise PreconditionError("D needs both interior and boundary nodes")
    details = []
    lam_u = herm_min_eig(total_form(theta, u).coeffs)
    if np.min(lam_u[D]) < eps0:
        details.append(f"u not uniformly admissible on D (min eigenvalue {np.min(lam_u[D]):.3e})")
    mu = ma_density(theta, u).density
    try:
        mv = ma_density(theta, v).density
        excess = float(np.max((mv - c * mu)[D]))
        if excess > tol:
            details.append(f"MA(v) exceeds c MA(u) on D by {excess:.3e}")
    except Exception as exc:  # inadmissible v
        details.append(str(exc))
    w = _values(v) - _values(u)
    interior_min = float(w[D].min())
    boundary_min = float(w[edge].min())
    margin = interior_min - boundary_min
    ok = not details
    return MinimumPrincipleVerdict(interior_min, boundary_min, margin, ok, "; ".join(details),
                                   passed=ok and margin >= -tol)


# --- L1 - Linf stability ----------------------------------------------------

def stability_exponent(p: float) -> float:
    """Hoelder exponent used for the implied stability constant, ``(p - 1) / 2``."""
    return (p - 1.0) / 2.0


def lp_norm(values, grid: TorusGrid, p: float) -> float:
    return float(grid.integrate(np.abs(values) ** p) ** (1.0 / p))


def density_mass_bounds(f, grid: TorusGrid, p: float, n: int) -> tuple[float, float]:
    """``((int f^{1/n})^n, ||f||_p)``, the two quantities bounded by ``B``."""
    fv = _values(f)
    return float(grid.integrate(fv ** (1.0 / n)) ** n), lp_norm(fv, grid, p)


@dataclass
class StabilityRecord:
    label: tuple
    lhs: float
    l1: float
    lp: float
    bracket: float
    implied: float


@dataclass
class StabilityVerdict:
    alpha: float
    records: list
    spread: float
    passed: bool


def check_elliptic_stability(theta: HermitianField, densities: dict, p: float, B: float, *,
                             tol: float = 1e-10, max_spread: float = 50.0) -> StabilityVerdict:
    """Implied constants ``C = |phi_1 - phi_2|_inf / (|phi_1 - phi_2|_1^alpha + |f_1 - f_2|_p)^{1/n}``.

    ``densities`` maps labels to density arrays; every unordered pair is used.
    The verdict passes when the implied constants differ by at most ``max_spread``.
    """
    grid = theta.grid
    n = grid.n
    alpha = stability_exponent(p)
    sols = {}
    for key, f in densities.items():
        lower, upper = density_mass_bounds(f, grid, p, n)
        if not (1.0 / B <= lower <= upper <= B):
            raise PreconditionError(f"density {key!r} violates the mass bounds with B={B}")
        sols[key] = solve_elliptic(theta, f, tol=tol).phi.values
    keys = list(densities)
    records = []
    for i, a in enumerate(keys):
        for b in keys[i + 1:]:
            diff = sols[a] - sols[b]
            lhs = float(np.max(np.abs(diff)))
            l1 = float(grid.integrate(np.abs(diff)))
            lp = lp_norm(_values(densities[a]) - _values(densities[b]), grid, p)
            bracket = (l1 ** alpha + lp) ** (1.0 / n)
            implied = lhs / bracket if bracket > 0 else 0.0
            records.append(StabilityRecord((a, b), lhs, l1, lp, bracket, implied))
    implied = [r.implied for r in records if r.implied > 0]
    spread = max(implied) / min(implied) if implied else 1.0
    return StabilityVerdict(alpha, records, spread, passed=spread <= max_spread)
