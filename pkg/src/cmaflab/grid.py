"""Discrete flat complex tori and the reference geometric data living on them.

A torus of complex dimension ``n`` is sampled on ``N`` nodes per real axis of
the fundamental domain ``[0, 1)^{2n}``.  Real axes are ordered
``(x_1, y_1, ..., x_n, y_n)`` and fields are stored as numpy arrays of shape
``(N,) * 2n`` (row-major).  Form coefficients ``g_{i jbar}`` carry two extra
trailing axes of size ``n``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError, DomainError, GeometryError

#: value stored at pole-masked nodes; such nodes are excluded from sup/inf
POLE_VALUE = -1.0e6
#: admissibility tolerance, relative to the largest form coefficient
TOL_PSD = 1e-9


@dataclass(frozen=True)
class TorusGrid:
    n: int
    N: int

    def __post_init__(self):
        if self.n not in (1, 2):
            raise ConfigurationError(f"complex dimension must be 1 or 2, got {self.n}")
        if self.N < 8 or self.N % 2:
            raise ConfigurationError(f"resolution must be even and >= 8, got {self.N}")

    @property
    def real_dim(self) -> int:
        return 2 * self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.real_dim

    @property
    def size(self) -> int:
        return self.N ** self.real_dim

    @property
    def h(self) -> float:
        return 1.0 / self.N

    @property
    def cell_volume(self) -> float:
        return self.h ** self.real_dim

    def axis_coords(self) -> np.ndarray:
        return np.arange(self.N) * self.h

    def coords(self) -> list[np.ndarray]:
        """Open-mesh coordinate arrays, one per real axis, broadcastable to ``shape``."""
        return list(np.meshgrid(*([self.axis_coords()] * self.real_dim), indexing="ij", sparse=True))

    def integrate(self, values) -> float:
        return float(np.sum(values) * self.cell_volume)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)


def _values(u) -> np.ndarray:
    return u.values if isinstance(u, ScalarField) else np.asarray(u, dtype=float)


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Real values per node, optionally with a pole mask (True = treated as -inf)."""

    grid: TorusGrid
    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            raise ConfigurationError(f"field shape {vals.shape} does not match grid {self.grid.shape}")
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool)
            vals = np.where(mask, POLE_VALUE, vals)
            object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "values", vals)

    @property
    def unmasked(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.grid.shape, dtype=bool)
        return ~self.mask

    def sup(self) -> float:
        return float(self.values[self.unmasked].max())

    def inf(self) -> float:
        return float(self.values[self.unmasked].min())

    def integral(self) -> float:
        return self.grid.integrate(np.where(self.unmasked, self.values, 0.0))


# --- nodewise Hermitian linear algebra (n in {1, 2}, closed forms) ---------

def herm_det(m: np.ndarray) -> np.ndarray:
    if m.shape[-1] == 1:
        return m[..., 0, 0].real.copy()
    a, d, b = m[..., 0, 0].real, m[..., 1, 1].real, m[..., 0, 1]
    return a * d - (b.real ** 2 + b.imag ** 2)


def herm_inv(m: np.ndarray) -> np.ndarray:
    if m.shape[-1] == 1:
        return 1.0 / m
    det = herm_det(m)
    out = np.empty_like(m)
    out[..., 0, 0] = m[..., 1, 1] / det
    out[..., 1, 1] = m[..., 0, 0] / det
    out[..., 0, 1] = -m[..., 0, 1] / det
    out[..., 1, 0] = -m[..., 1, 0] / det
    return out


def herm_min_eig(m: np.ndarray) -> np.ndarray:
    if m.shape[-1] == 1:
        return m[..., 0, 0].real.copy()
    a, d, b = m[..., 0, 0].real, m[..., 1, 1].real, m[..., 0, 1]
    return 0.5 * (a + d) - np.sqrt(0.25 * (a - d) ** 2 + np.abs(b) ** 2)


def herm_min_eigvec(m: np.ndarray) -> np.ndarray:
    """Unit eigenvector of the smallest eigenvalue, shape ``(..., n)``."""
    n = m.shape[-1]
    if n == 1:
        return np.ones(m.shape[:-1], dtype=complex)
    lam = herm_min_eig(m)
    a, d, b = m[..., 0, 0].real, m[..., 1, 1].real, m[..., 0, 1]
    v1 = np.stack([b, (lam - a).astype(complex)], axis=-1)
    v2 = np.stack([(d - lam).astype(complex), -np.conj(b)], axis=-1)
    n1 = np.linalg.norm(v1, axis=-1)
    n2 = np.linalg.norm(v2, axis=-1)
    v = np.where((n1 >= n2)[..., None], v1, v2)
    nv = np.maximum(n1, n2)
    # b = 0 and a = d: any unit vector
    degenerate = nv < 1e-300
    v = np.where(degenerate[..., None], np.array([1.0, 0.0], dtype=complex), v)
    nv = np.where(degenerate, 1.0, nv)
    return v / nv[..., None]


@dataclass(frozen=True, eq=False)
class HermitianField:
    """Per-node ``n x n`` Hermitian coefficient matrices of a real (1,1)-form."""

    grid: TorusGrid
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        n = self.grid.n
        c = np.broadcast_to(c, self.grid.shape + (n, n))
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def constant(cls, grid: TorusGrid, matrix) -> "HermitianField":
        m = np.asarray(matrix, dtype=complex).reshape(grid.n, grid.n)
        return cls(grid, np.broadcast_to(m, grid.shape + (grid.n, grid.n)))

    @classmethod
    def identity(cls, grid: TorusGrid) -> "HermitianField":
        return cls.constant(grid, np.eye(grid.n))

    def __add__(self, other: "HermitianField") -> "HermitianField":
        return HermitianField(self.grid, self.coeffs + other.coeffs)

    def __sub__(self, other: "HermitianField") -> "HermitianField":
        return HermitianField(self.grid, self.coeffs - other.coeffs)

    def __mul__(self, s: float) -> "HermitianField":
        return HermitianField(self.grid, self.coeffs * s)

    __rmul__ = __mul__

    def hermitian_defect(self) -> float:
        c = self.coeffs
        return float(np.max(np.abs(c - np.conj(np.swapaxes(c, -1, -2)))))

    def min_eigenvalue(self) -> np.ndarray:
        return herm_min_eig(self.coeffs)

    def det(self) -> np.ndarray:
        return herm_det(self.coeffs)

    def scale(self) -> float:
        """Largest coefficient modulus, used to make tolerances relative."""
        return float(max(np.max(np.abs(self.coeffs)), 1e-300))

    def is_semipositive(self, tol: float = TOL_PSD, where=None) -> bool:
        lam = self.min_eigenvalue()
        if where is not None:
            lam = lam[where]
        return bool(np.all(lam >= -tol * self.scale()))

    def is_constant(self) -> bool:
        c = self.coeffs
        return bool(np.all(c == c.reshape(-1, self.grid.n, self.grid.n)[0]))


def flat_volume_density(grid: TorusGrid) -> ScalarField:
    """Density of dV against Lebesgue measure; total discrete mass 1 = mass of omega_X^n."""
    return ScalarField(grid, np.ones(grid.shape))


def build_flat_geometry(n: int, N: int):
    """Return ``(grid, omega_X, dV)`` for the flat torus with identity metric."""
    grid = TorusGrid(n, N)
    return grid, HermitianField.identity(grid), flat_volume_density(grid)


# --- model degenerate big form ---------------------------------------------

def divisor_profile(grid: TorusGrid, i: int = 0) -> np.ndarray:
    """``sin^2(pi x_i) + sin^2(pi y_i)``: periodic, vanishes exactly on ``{z_i = 0}``."""
    c = grid.coords()
    return np.broadcast_to(np.sin(np.pi * c[2 * i]) ** 2 + np.sin(np.pi * c[2 * i + 1]) ** 2, grid.shape).copy()


def log_divisor_ddc(grid: TorusGrid, i: int = 0) -> np.ndarray:
    """Closed-form ``d^2/dz_i dzbar_i`` of ``log(sin^2 pi x_i + sin^2 pi y_i)`` off the divisor.

    Equals ``-2 pi^2 a b / s^2`` with ``a, b`` the two squared sines and ``s = a + b``.
    """
    c = grid.coords()
    a = np.sin(np.pi * c[2 * i]) ** 2
    b = np.sin(np.pi * c[2 * i + 1]) ** 2
    s = a + b
    with np.errstate(divide="ignore", invalid="ignore"):
        out = -2.0 * np.pi ** 2 * a * b / s ** 2
    return np.broadcast_to(np.where(s > 0, out, 0.0), grid.shape).copy()


@dataclass(frozen=True, eq=False)
class BigForm:
    theta: HermitianField
    rho: ScalarField
    delta: float
    kappa: float
    margin: float  # smallest eigenvalue of theta + dd^c rho - delta omega_X off the mask

    @property
    def positive_locus(self) -> np.ndarray:
        return self.rho.unmasked


def build_degenerate_big_form(grid: TorusGrid, kappa: float, delta: float, *, verify: bool = True) -> BigForm:
    """Semipositive theta degenerating on ``{z_1 = 0}`` and its log-pole witness rho.

    ``theta`` has ``g_{1 1bar} = 1 - exp(-s / s0)`` with ``s0 = sin^2(pi/N) / 2``
    (so the degeneration is resolved at grid scale) and identity in the other
    direction; ``rho = kappa log s`` with a pole mask on ``s = 0``.  The bound
    ``theta + dd^c rho >= delta omega_X`` is checked on unmasked nodes using the
    closed-form complex Hessian of ``rho``.  ``kappa = 0`` returns the
    nondegenerate preset ``theta = omega_X``, ``rho = 0``.
    """
    n = grid.n
    if kappa < 0 or delta <= 0:
        raise ConfigurationError("kappa must be >= 0 and delta > 0")
    if kappa == 0:
        theta = HermitianField.identity(grid)
        rho = ScalarField(grid, grid.zeros())
        margin = 1.0 - delta
    else:
        s = divisor_profile(grid, 0)
        mask = s == 0
        s0 = 0.5 * np.sin(np.pi / grid.N) ** 2
        g = -np.expm1(-s / s0)
        coeffs = np.zeros(grid.shape + (n, n), dtype=complex)
        coeffs[..., 0, 0] = g
        if n == 2:
            coeffs[..., 1, 1] = 1.0
        theta = HermitianField(grid, coeffs)
        with np.errstate(divide="ignore"):
            rho = ScalarField(grid, kappa * np.log(np.where(mask, 1.0, s)), mask=mask)
        total = coeffs.copy()
        total[..., 0, 0] += kappa * log_divisor_ddc(grid, 0)
        total -= delta * np.eye(n)
        lam = herm_min_eig(total)
        lam_off = np.where(mask, np.inf, lam)
        margin = float(lam_off.min())
    if verify and margin < -1e-10:
        node = np.unravel_index(np.argmin(lam_off), grid.shape) if kappa else None
        raise GeometryError(
            f"theta + dd^c rho - delta*omega_X has eigenvalue {margin:.3e} < 0", margin=margin, node=node
        )
    return BigForm(theta=theta, rho=rho, delta=delta, kappa=kappa, margin=margin)


# --- time-dependent families of forms ---------------------------------------

@dataclass(frozen=True, eq=False)
class FormPath:
    """A family ``t -> omega_t`` on ``[0, T]`` dominating ``base``.

    ``A`` bounds the time derivatives (``-A w <= dw/dt <= A w``, ``d2w/dt2 <= A w``);
    ``delta`` is the bigness constant of ``base``.
    """

    base: HermitianField
    sampler: Callable[[float], HermitianField]
    T: float
    A: float = 1.0
    delta: float = 1.0
    kind: str = "custom"
    velocity: HermitianField | None = None  # exact d/dt for affine paths

    @property
    def grid(self) -> TorusGrid:
        return self.base.grid

    def at(self, t: float) -> HermitianField:
        return sample_form_path(self, t)


def constant_path(form: HermitianField, T: float, *, A: float = 1.0, delta: float = 1.0) -> FormPath:
    return FormPath(base=form, sampler=lambda t: form, T=T, A=A, delta=delta, kind="constant",
                    velocity=form * 0.0)


def affine_path(theta0: HermitianField, chi: HermitianField, T: float, *, base=None, A=None,
                delta: float = 1.0) -> FormPath:
    """``omega_t = theta0 + t chi``; ``A`` defaults to the smallest admissible constant."""
    path = FormPath(base=base if base is not None else theta0,
                    sampler=lambda t: HermitianField(theta0.grid, theta0.coeffs + t * chi.coeffs),
                    T=T, A=1.0, delta=delta, kind="affine", velocity=chi)
    if A is None:
        A = regularity_constant(path)
    return FormPath(base=path.base, sampler=path.sampler, T=T, A=A, delta=delta, kind="affine",
                    velocity=chi)


def sample_form_path(path: FormPath, t: float) -> HermitianField:
    if not (0.0 <= t <= path.T * (1 + 1e-12)):
        raise DomainError(f"t={t} outside [0, {path.T}]")
    return path.sampler(t)


def _relative_eigs(omega: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """Eigenvalues of ``omega^{-1/2} eta omega^{-1/2}`` per node, shape ``(..., n)``."""
    w, v = np.linalg.eigh(omega)
    w = np.maximum(w, 1e-300)
    s = v * (w ** -0.5)[..., None, :]
    rel = np.conj(np.swapaxes(s, -1, -2)) @ eta @ s
    return np.linalg.eigvalsh(rel)


def regularity_constant(path: FormPath, samples: int = 21) -> float:
    """Smallest ``A`` with ``|d omega/dt| <= A omega`` on sampled times (centered differences)."""
    worst = 0.0
    eps = 1e-4 * path.T
    for t in np.linspace(eps, path.T - eps, samples):
        om = path.sampler(t).coeffs
        dom = (path.sampler(t + eps).coeffs - path.sampler(t - eps).coeffs) / (2 * eps)
        worst = max(worst, float(np.max(np.abs(_relative_eigs(om, dom)))))
    return max(worst, 1e-12)


def check_path_regularity(path: FormPath, samples: int = 11) -> dict:
    """Nodewise eigenvalue margins of ``A w -+ w'``, ``A w - w''`` and ``w - base``."""
    eps = 1e-4 * path.T
    lower = upper = second = dominance = np.inf
    for t in np.linspace(eps, path.T - eps, samples):
        om = path.sampler(t).coeffs
        op, omn = path.sampler(t + eps).coeffs, path.sampler(t - eps).coeffs
        dom = (op - omn) / (2 * eps)
        ddom = (op - 2 * om + omn) / eps ** 2
        lower = min(lower, float(herm_min_eig(dom + path.A * om).min()))
        upper = min(upper, float(herm_min_eig(path.A * om - dom).min()))
        second = min(second, float(herm_min_eig(path.A * om - ddom).min()))
        dominance = min(dominance, float(herm_min_eig(om - path.base.coeffs).min()))
    return {"lower": lower, "upper": upper, "second": second, "dominance": dominance}


# --- export -------------------------------------------------------------------

def export_field_csv(field_: ScalarField, path) -> None:
    """Node coordinates followed by the value, one node per row."""
    grid = field_.grid
    names = [f"{ax}{i + 1}" for i in range(grid.n) for ax in ("x", "y")]
    idx = np.indices(grid.shape).reshape(grid.real_dim, -1).T
    vals = field_.values.reshape(-1)
    masked = (field_.mask.reshape(-1) if field_.mask is not None else np.zeros(vals.size, bool))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names + ["value", "masked"])
        for k in range(vals.size):
            w.writerow([f"{c * grid.h:.17g}" for c in idx[k]] + [f"{vals[k]:.17g}", int(masked[k])])
