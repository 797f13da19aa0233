"""Discrete dd^c, the pointwise Monge-Ampere density and nodewise structural checks.

Second derivatives are centered periodic differences: the 3-point stencil on
the diagonal and the product of two centered first differences off the
diagonal.  The complex Hessian is assembled from the real one through

    phi_{z_i zbar_j} = (phi_{x_i x_j} + phi_{y_i y_j}) / 4
                       + i (phi_{x_i y_j} - phi_{y_i x_j}) / 4.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import AdmissibilityError, PreconditionError, SolverError
from .grid import (TOL_PSD, HermitianField, ScalarField, TorusGrid, _values, herm_det, herm_inv,
                   herm_min_eig)

#: systems up to this many unknowns are factorized directly
DIRECT_SOLVE_LIMIT = 20000


@lru_cache(maxsize=1)
def hessian_tensor(n: int) -> np.ndarray:
    """``E[i, j, a, b]`` with ``H_{i jbar} = sum_ab E[i,j,a,b] d_a d_b phi``."""
    E = np.zeros((n, n, 2 * n, 2 * n), dtype=complex)
    for i in range(n):
        for j in range(n):
            xi, yi, xj, yj = 2 * i, 2 * i + 1, 2 * j, 2 * j + 1
            E[i, j, xi, xj] += 0.25
            E[i, j, yi, yj] += 0.25
            E[i, j, xi, yj] += 0.25j
            E[i, j, yi, xj] -= 0.25j
    return E


@lru_cache(maxsize=8)
def difference_operators(n: int, N: int):
    """Sparse periodic difference matrices on the flattened (C-order) grid.

    Returns ``(first, second)`` where ``first[a]`` is the centered first
    difference along real axis ``a`` and ``second[(a, b)]`` (``a <= b``) the
    second difference used for ``d_a d_b``.
    """
    h = 1.0 / N
    d = 2 * n
    eye = sp.identity(N, format="csr")
    shift_p = sp.csr_matrix((np.ones(N), (np.arange(N), (np.arange(N) + 1) % N)), shape=(N, N))
    shift_m = shift_p.T.tocsr()
    d1 = (shift_p - shift_m) / (2 * h)
    d2 = (shift_p - 2 * eye + shift_m) / h ** 2

    def lift(op, axis):
        mats = [eye] * d
        mats[axis] = op
        out = mats[0]
        for m in mats[1:]:
            out = sp.kron(out, m, format="csr")
        return out

    first = [lift(d1, a) for a in range(d)]
    second = {}
    for a in range(d):
        second[(a, a)] = lift(d2, a)
        for b in range(a + 1, d):
            second[(a, b)] = (first[a] @ first[b]).tocsr()
    return first, second


def real_hessian(u, grid: TorusGrid) -> np.ndarray:
    """Real Hessian field, shape ``grid.shape + (2n, 2n)``."""
    v = _values(u).reshape(-1)
    _, second = difference_operators(grid.n, grid.N)
    d = grid.real_dim
    out = np.empty(grid.shape + (d, d))
    for (a, b), op in second.items():
        w = (op @ v).reshape(grid.shape)
        out[..., a, b] = w
        out[..., b, a] = w
    return out


def complex_hessian(u, grid: TorusGrid) -> HermitianField:
    """``dd^c u`` coefficients; pole-masked fields are evaluated on their sentinel values."""
    E = hessian_tensor(grid.n)
    D = real_hessian(u, grid)
    return HermitianField(grid, np.einsum("ijab,...ab->...ij", E, D))


def gradient(u, grid: TorusGrid) -> np.ndarray:
    first, _ = difference_operators(grid.n, grid.N)
    v = _values(u).reshape(-1)
    return np.stack([(op @ v).reshape(grid.shape) for op in first], axis=-1)


def laplacian(u, grid: TorusGrid) -> np.ndarray:
    """``tr_{omega_X} dd^c u`` (a quarter of the real Laplacian per complex direction)."""
    return np.real(np.trace(complex_hessian(u, grid).coeffs, axis1=-2, axis2=-1))


def operator_coefficients(weights: np.ndarray, grid: TorusGrid) -> dict:
    """Real coefficient fields ``K_ab`` with ``tr(W dd^c v) = sum_{a<=b} K_ab d_a d_b v``."""
    E = hessian_tensor(grid.n)
    K = np.real(np.einsum("...ji,ijab->...ab", weights, E))
    d = grid.real_dim
    out = {}
    for a in range(d):
        out[(a, a)] = K[..., a, a]
        for b in range(a + 1, d):
            out[(a, b)] = K[..., a, b] + K[..., b, a]
    return out


def linear_operator_matrix(weights: np.ndarray, grid: TorusGrid, diagonal=None) -> sp.csr_matrix:
    """Sparse matrix of ``v -> tr(W dd^c v) + diagonal * v``."""
    _, second = difference_operators(grid.n, grid.N)
    coeffs = operator_coefficients(weights, grid)
    A = None
    for key, op in second.items():
        c = coeffs[key].reshape(-1)
        if not np.any(c):
            continue
        term = sp.diags(c) @ op
        A = term if A is None else A + term
    if diagonal is not None:
        A = A + sp.diags(np.broadcast_to(diagonal, grid.shape).reshape(-1))
    return A.tocsr()


def _flat_symbol(grid: TorusGrid, axis_weights, shift: float) -> np.ndarray:
    k = np.arange(grid.N)
    lam1 = -4.0 * np.sin(np.pi * k / grid.N) ** 2 / grid.h ** 2
    sym = np.zeros(grid.shape) + shift
    for a, w in enumerate(axis_weights):
        shape = [1] * grid.real_dim
        shape[a] = grid.N
        sym = sym + w * lam1.reshape(shape)
    return sym


def solve_linear(A: sp.spmatrix, rhs: np.ndarray, grid: TorusGrid, *, weights=None, shift=0.0,
                 bordered: bool = False, tol: float = 1e-12) -> np.ndarray:
    """Solve ``A x = rhs``; direct for small systems, preconditioned GMRES otherwise.

    The preconditioner inverts the constant-coefficient operator obtained by
    averaging the diagonal coefficients of ``weights`` (``shift`` is its zeroth
    order term).  ``bordered`` marks systems carrying one extra gauge unknown.
    """
    if A.shape[0] <= DIRECT_SOLVE_LIMIT:
        return spla.spsolve(A.tocsc(), rhs)
    d = grid.real_dim
    coeffs = operator_coefficients(weights, grid) if weights is not None else None
    axis_w = [float(np.mean(coeffs[(a, a)])) if coeffs else 0.25 for a in range(d)]
    # nodewise size of the principal part relative to its mean: rows are rescaled by it
    if coeffs:
        local = sum(np.broadcast_to(coeffs[(a, a)], grid.shape) for a in range(d))
        scale = local / np.mean(local)
    else:
        scale = np.ones(grid.shape)
    sym = _flat_symbol(grid, axis_w, shift)
    if bordered:
        sym.flat[0] = 1.0
    size = grid.size

    def apply(r):
        r = np.asarray(r).ravel()
        body = r[:size].reshape(grid.shape) / scale
        if bordered:
            mean = body.mean()
            x = np.real(np.fft.ifftn(np.fft.fftn(body - mean) / sym))
            # the gauge row prescribes the mean of the potential
            x += r[size] - x.mean()
            return np.concatenate([x.ravel(), [-mean]])
        return np.real(np.fft.ifftn(np.fft.fftn(body) / sym)).ravel()

    M = spla.LinearOperator(A.shape, matvec=apply)
    x, info = spla.gmres(A, rhs, M=M, rtol=tol, atol=0.0, restart=60, maxiter=400)
    if info != 0:
        res = np.linalg.norm(A @ x - rhs) / max(np.linalg.norm(rhs), 1e-300)
        if res > 1e-6:
            raise SolverError(f"GMRES failed (info={info}, relative residual {res:.2e})")
    return x


# --- Monge-Ampere density ----------------------------------------------------

def total_form(omega: HermitianField, u) -> HermitianField:
    return HermitianField(omega.grid, omega.coeffs + complex_hessian(u, omega.grid).coeffs)


@dataclass(frozen=True, eq=False)
class MAMeasureField:
    grid: TorusGrid
    density: np.ndarray

    def mass(self) -> float:
        return self.grid.integrate(self.density)


def worst_node(values: np.ndarray):
    idx = int(np.argmin(values))
    return np.unravel_index(idx, values.shape)


def ma_density(omega: HermitianField, u, dV=None, *, tol_psd: float = TOL_PSD) -> MAMeasureField:
    """Nodewise ``det(g + dd^c u) / dV``; ``omega = omega_X, u = 0`` gives density 1."""
    grid = omega.grid
    M = total_form(omega, u)
    lam = M.min_eigenvalue()
    if np.any(lam < -tol_psd * M.scale()):
        node = worst_node(lam)
        raise AdmissibilityError(f"omega + dd^c u not semipositive: eigenvalue {lam[node]:.3e} at node {node}",
                                 eigenvalue=float(lam[node]), node=node)
    dens = np.maximum(M.det(), 0.0)
    if dV is not None:
        dens = dens / _values(dV)
    return MAMeasureField(grid, dens)


def trace_with_respect_to(omega: HermitianField, eta: HermitianField) -> ScalarField:
    """Nodewise ``tr(g^{-1} eta)``."""
    det = omega.det()
    if np.any(np.abs(det) < 1e-300):
        node = worst_node(-np.abs(det))
        raise AdmissibilityError(f"singular metric at node {node}", node=node)
    inv = herm_inv(omega.coeffs)
    return ScalarField(omega.grid, np.real(np.einsum("...ij,...ji->...", inv, eta.coeffs)))


# --- mixed-type inequality ---------------------------------------------------

@dataclass
class MixedInequalityReport:
    margin: float
    precondition_margins: tuple
    precondition_ok: bool
    node: tuple | None = None

    @property
    def passed(self) -> bool:
        return self.precondition_ok and self.margin >= -1e-8


def check_mixed_inequality(omega1: HermitianField, omega2: HermitianField, u1, u2, f1, f2, mu,
                           delta: float, *, tol: float = 1e-10) -> MixedInequalityReport:
    """Nodewise margin of the mixed-type inequality.

    Preconditions ``(omega_i + dd^c u_i)^n >= e^{f_i} mu`` are evaluated first;
    the returned margin is ``min(LHS - RHS)`` for the convex combination with
    weight ``delta``.
    """
    if not 0.0 < delta < 1.0:
        raise PreconditionError("delta must lie in (0, 1)")
    grid = omega1.grid
    M1, M2 = total_form(omega1, u1), total_form(omega2, u2)
    mu_v = _values(mu)
    f1v, f2v = _values(f1), _values(f2)
    pre = []
    for M, fv in ((M1, f1v), (M2, f2v)):
        if np.any(M.min_eigenvalue() < -TOL_PSD * M.scale()):
            pre.append(-np.inf)
        else:
            pre.append(float(np.min(M.det() - np.exp(fv) * mu_v)))
    ok = all(p >= -tol for p in pre)
    comb = HermitianField(grid, delta * M1.coeffs + (1 - delta) * M2.coeffs)
    gap = comb.det() - np.exp(delta * f1v + (1 - delta) * f2v) * mu_v
    node = worst_node(gap)
    return MixedInequalityReport(margin=float(gap[node]), precondition_margins=tuple(pre),
                                 precondition_ok=ok, node=node)


def is_admissible(omega: HermitianField, u, *, strict: bool = False, tol_psd: float = TOL_PSD) -> bool:
    M = total_form(omega, u)
    lam = M.min_eigenvalue()
    if strict:
        return bool(np.all(lam > tol_psd * M.scale()))
    return bool(np.all(lam >= -tol_psd * M.scale()))


def log_det_and_weights(omega: HermitianField, u):
    """``log det(g + dd^c u)``, ``(g + dd^c u)^{-1}`` and the smallest eigenvalue."""
    M = total_form(omega, u)
    lam = herm_min_eig(M.coeffs)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(herm_det(M.coeffs)), herm_inv(M.coeffs), lam
