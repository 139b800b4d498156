"""
Discrete Kohn-Sham energy functional on a P1 space.

The energy of orbital coefficients ``U`` (interior nodal values, one column
per orbital, occupations ``f``) is

    E = sum_i f_i/2 u_i^T K u_i + sum_i f_i u_i^T W_ext u_i
        + 1/2 int V_H rho + int eps_xc(rho) rho + E_nuc

with ``rho = sum_i f_i u_i^2`` evaluated at quadrature points.  The
Hartree load vector, the xc terms and the effective-potential operator all
use the same quadrature rule, so :meth:`KSModel.gradient_load` is the exact
derivative of :meth:`KSModel.total_energy` (up to the boundary data of the
multipole Hartree condition, which depends on the density).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg

from . import fem
from .fem import DofMap, QuadratureData, R_MIN, solve_spd
from .mesh import Mesh

logger = logging.getLogger(__name__)

FOUR_PI = 4.0 * np.pi

# Dirac exchange prefactor, eps_x = -C_X rho^(1/3)
C_X = 0.75 * (3.0 / np.pi) ** (1.0 / 3.0)

# Perdew-Zunger (1981) unpolarised correlation, fit to Ceperley-Alder
PZ_GAMMA, PZ_BETA1, PZ_BETA2 = -0.1423, 1.0529, 0.3334
PZ_A, PZ_B, PZ_C, PZ_D = 0.0311, -0.048, 0.0020, -0.0116

RHO_FLOOR = 1e-30


@dataclass(frozen=True)
class Molecule:
    positions: np.ndarray  # (M, 3) bohr
    charges: np.ndarray  # (M,)
    n_orbitals: int
    occupations: np.ndarray  # (N,)

    @classmethod
    def create(cls, nuclei, n_orbitals: int, occupations=None) -> "Molecule":
        """``nuclei`` is a sequence of ``(x, y, z, Z)``."""
        nuclei = np.asarray(nuclei, dtype=float).reshape(-1, 4)
        if n_orbitals < 1:
            raise ValueError("need at least one orbital")
        if occupations is None:
            occupations = np.full(n_orbitals, 2.0)
        occupations = np.asarray(occupations, dtype=float)
        if occupations.shape != (n_orbitals,) or np.any(occupations <= 0):
            raise ValueError("occupations must be positive, one per orbital")
        if np.any(nuclei[:, 3] <= 0):
            raise ValueError("nuclear charges must be positive")
        return cls(nuclei[:, :3].copy(), nuclei[:, 3].copy(), int(n_orbitals), occupations)

    def check_inside(self, lo, hi):
        p = self.positions
        if np.any(p <= np.asarray(lo)) or np.any(p >= np.asarray(hi)):
            raise ValueError("nuclei must lie strictly inside the domain")


@dataclass
class OrbitalSet:
    coefficients: np.ndarray  # (n_int, N)
    occupations: np.ndarray
    mesh: Mesh | None = None
    orthonormal: bool = False


@dataclass(frozen=True)
class DensityField:
    values: np.ndarray  # nodal, all vertices


@dataclass(frozen=True)
class EnergyBreakdown:
    kinetic: float
    external: float
    hartree: float
    xc: float
    nuclear: float
    total: float

    @classmethod
    def from_terms(cls, kinetic, external, hartree, xc, nuclear) -> "EnergyBreakdown":
        kinetic, external, hartree, xc, nuclear = map(float, (kinetic, external, hartree, xc, nuclear))
        return cls(kinetic, external, hartree, xc, nuclear, kinetic + external + hartree + xc + nuclear)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("kinetic", "external", "hartree", "xc", "nuclear", "total")}


@dataclass(frozen=True)
class XcEval:
    eps_xc: np.ndarray
    v_xc: np.ndarray


def xc_lda(rho) -> XcEval:
    """LDA exchange-correlation energy per electron and potential.

    Slater-Dirac exchange plus Perdew-Zunger 1981 unpolarised correlation.
    Scalar input gives scalar output.
    """
    scalar = np.ndim(rho) == 0
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    if np.any(rho < 0):
        raise ValueError("density must be non-negative")
    eps = np.zeros_like(rho)
    v = np.zeros_like(rho)
    pos = rho > RHO_FLOOR
    r = rho[pos]

    cr = np.cbrt(r)
    ex = -C_X * cr
    vx = 4.0 / 3.0 * ex

    rs = np.cbrt(3.0 / (4.0 * np.pi)) / cr
    ec = np.empty_like(r)
    vc = np.empty_like(r)
    hi = rs < 1.0
    lnrs = np.log(rs[hi])
    ec[hi] = PZ_A * lnrs + PZ_B + PZ_C * rs[hi] * lnrs + PZ_D * rs[hi]
    vc[hi] = (PZ_A * lnrs + (PZ_B - PZ_A / 3.0)
              + 2.0 / 3.0 * PZ_C * rs[hi] * lnrs + (2.0 * PZ_D - PZ_C) / 3.0 * rs[hi])
    lo = ~hi
    sq = np.sqrt(rs[lo])
    den = 1.0 + PZ_BETA1 * sq + PZ_BETA2 * rs[lo]
    ec[lo] = PZ_GAMMA / den
    vc[lo] = ec[lo] * (1.0 + 7.0 / 6.0 * PZ_BETA1 * sq + 4.0 / 3.0 * PZ_BETA2 * rs[lo]) / den

    eps[pos] = ex + ec
    v[pos] = vx + vc
    if scalar:
        return XcEval(float(eps[0]), float(v[0]))
    return XcEval(eps, v)


def coulomb_potential(positions, charges, r_min: float = R_MIN):
    """Callable ``x -> -sum_k Z_k / max(|x - R_k|, r_min)``."""
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    charges = np.asarray(charges, dtype=float)

    def potential(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        for R, Z in zip(positions, charges):
            r = np.sqrt(((x - R) ** 2).sum(axis=-1))
            out -= Z / np.maximum(r, r_min)
        return out

    return potential


def external_potential(mol: Molecule, r_min: float = R_MIN):
    return coulomb_potential(mol.positions, mol.charges, r_min)


def harmonic_potential(strength: float = 1.0, center=(0.0, 0.0, 0.0)):
    """Callable ``x -> strength/2 |x - center|^2``."""
    center = np.asarray(center, dtype=float)

    def potential(x):
        d = np.asarray(x, dtype=float) - center
        return 0.5 * strength * (d * d).sum(axis=-1)

    return potential


def nuclear_repulsion(mol: Molecule) -> float:
    e = 0.0
    p, z = mol.positions, mol.charges
    for j in range(len(z)):
        for k in range(j + 1, len(z)):
            e += z[j] * z[k] / np.linalg.norm(p[j] - p[k])
    return float(e)


@dataclass(frozen=True)
class HartreeBC:
    kind: str = "zero"  # "zero" | "multipole"
    order: int = 0

    def __post_init__(self):
        if self.kind not in ("zero", "multipole"):
            raise ValueError(f"unknown Hartree boundary condition {self.kind!r}")
        if not 0 <= self.order <= 2:
            raise ValueError("multipole order must be 0, 1 or 2")


def multipole_moments(points: np.ndarray, dx: np.ndarray, rho: np.ndarray):
    """Charge, centroid, dipole and traceless quadrupole of a density sampled at quadrature points."""
    x = points.reshape(-1, 3)
    w = (dx * rho).ravel()
    Q = w.sum()
    centroid = (w[:, None] * x).sum(axis=0) / Q if Q != 0 else np.zeros(3)
    y = x - centroid
    dipole = (w[:, None] * y).sum(axis=0)
    r2 = (y * y).sum(axis=1)
    quad = 3.0 * np.einsum("q,qi,qj->ij", w, y, y) - np.eye(3) * (w * r2).sum()
    return Q, centroid, dipole, quad


def multipole_values(x, Q, centroid, dipole, quad, order: int) -> np.ndarray:
    y = np.asarray(x, dtype=float) - centroid
    r = np.linalg.norm(y, axis=-1)
    val = Q / r
    if order >= 1:
        val = val + (y @ dipole) / r ** 3
    if order >= 2:
        val = val + 0.5 * np.einsum("...i,ij,...j->...", y, quad, y) / r ** 5
    return val


class PoissonSolver:
    """Solves ``-lap V = 4 pi rho`` with Dirichlet data on one mesh.

    Up to ``direct_max`` interior unknowns the stiffness matrix is factorized
    once (sparse LU) and every solve is exact to round-off; larger systems use
    conjugate gradients preconditioned with smoothed-aggregation AMG.
    """

    def __init__(self, mesh: Mesh, rel_tol: float = 1e-12, K_full=None, direct_max: int = 60_000):
        self.mesh = mesh
        self.dofs = DofMap.from_mesh(mesh)
        K = fem.assemble_stiffness(mesh, full=True) if K_full is None else K_full
        inner, bnd = self.dofs.interior, mesh.boundary_vertices
        self.K_II = K[inner][:, inner].tocsr()
        self.K_IB = K[inner][:, bnd].tocsr()
        self.rel_tol = rel_tol
        self._precond = None
        self._lu = None
        if 0 < self.K_II.shape[0] <= direct_max:
            self._lu = scipy.sparse.linalg.splu(self.K_II.tocsc(), permc_spec="MMD_AT_PLUS_A")

    @property
    def direct(self) -> bool:
        return self._lu is not None

    @property
    def precond(self):
        if self._precond is None:
            if self.K_II.shape[0] > 200:
                import pyamg

                ml = pyamg.smoothed_aggregation_solver(self.K_II, symmetry="symmetric")
                op = ml.aspreconditioner(cycle="V")
                self._precond = lambda r: op @ r
            else:
                self._precond = fem.jacobi_preconditioner(self.K_II)
        return self._precond

    def solve(self, load_full: np.ndarray, boundary_values=None, x0=None) -> np.ndarray:
        """Full nodal potential for the load ``int rho phi_i`` on all vertices."""
        mesh = self.mesh
        V = np.zeros(mesh.n_vertices)
        rhs = FOUR_PI * load_full[self.dofs.interior]
        if boundary_values is not None:
            V[mesh.boundary_vertices] = boundary_values
            rhs = rhs - self.K_IB @ boundary_values
        if self._lu is not None:
            V[self.dofs.interior] = self._lu.solve(rhs)
            return V
        guess = None if x0 is None else x0[self.dofs.interior]
        V[self.dofs.interior] = solve_spd(self.K_II, rhs, self.rel_tol, x0=guess, precond=self.precond)
        return V


def hartree_potential(mesh: Mesh, rho: DensityField, bc: HartreeBC = HartreeBC(), solver=None,
                      x0=None) -> np.ndarray:
    """Nodal Hartree potential of a nodal P1 density."""
    solver = solver or PoissonSolver(mesh)
    qd = QuadratureData(mesh, fem.TET4)
    rho_q = qd.interpolate(rho.values)
    return _hartree_from_quadrature(solver, qd, rho_q, bc, x0)[0]


def _hartree_from_quadrature(solver: PoissonSolver, qd: QuadratureData, rho_q, bc: HartreeBC, x0=None):
    load = qd.load(rho_q)
    bvals = None
    if bc.kind == "multipole":
        moments = multipole_moments(qd.points, qd.dx, rho_q)
        xb = solver.mesh.vertices[solver.mesh.boundary_vertices]
        bvals = multipole_values(xb, *moments, order=bc.order)
    return solver.solve(load, bvals, x0), load


@dataclass
class Evaluation:
    """Energy (and optionally gradient) of one orbital set."""

    U: np.ndarray
    energy: EnergyBreakdown
    v_hartree: np.ndarray | None  # full nodal
    v_eff_q: np.ndarray | None  # Hartree + xc potential at quadrature points
    gradient: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


class KSModel:
    """Kohn-Sham energy functional on one mesh.

    Parameters
    ----------
    mesh : Mesh
    molecule : Molecule
    hartree : HartreeBC or None (None disables the Hartree term)
    xc : whether to include LDA exchange-correlation
    potential : optional callable replacing the nuclear Coulomb potential
    """

    def __init__(self, mesh: Mesh, molecule: Molecule, hartree: HartreeBC | None = HartreeBC(),
                 xc: bool = True, potential=None, near_rule=fem.TET11, near_layers: float = 2.0,
                 singular_order: int = 4, mass_tol: float = 1e-12, poisson_tol: float = 1e-12,
                 r_min: float = R_MIN):
        self.mesh = mesh
        self.molecule = molecule
        self.hartree = hartree
        self.xc = xc
        self.occupations = molecule.occupations
        self.dofs = DofMap.from_mesh(mesh)
        self.mass_tol = mass_tol

        K_full = fem.assemble_stiffness(mesh, full=True)
        inner = self.dofs.interior
        self.K = K_full[inner][:, inner].tocsr()
        self.M = fem.assemble_mass(mesh)
        self._mass_precond = fem.jacobi_preconditioner(self.M)

        if potential is None:
            potential = external_potential(molecule, r_min)
            singular = molecule.positions
        else:
            singular = None
        self.potential = potential
        self.W_ext = fem.assemble_weighted_mass(
            mesh, potential, near_points=molecule.positions if len(molecule.positions) else None,
            near_rule=near_rule, near_layers=near_layers, singular_points=singular,
            singular_order=singular_order)
        self.qd = QuadratureData(mesh, fem.TET4)
        self.poisson = PoissonSolver(mesh, poisson_tol, K_full) if hartree is not None else None
        self.e_nuc = nuclear_repulsion(molecule)
        self._last_vh = None

    @property
    def n(self) -> int:
        return self.dofs.n

    @property
    def n_orbitals(self) -> int:
        return self.molecule.n_orbitals

    @staticmethod
    def _coeffs(U) -> np.ndarray:
        U = U.coefficients if isinstance(U, OrbitalSet) else U
        U = np.asarray(U, dtype=float)
        return U[:, None] if U.ndim == 1 else U

    def nodal(self, U) -> np.ndarray:
        return self.dofs.extend(self._coeffs(U))

    def density(self, U) -> DensityField:
        Uf = self.nodal(U)
        return DensityField((Uf ** 2) @ self.occupations)

    def evaluate(self, U, gradient: bool = True, v_eff_q=None) -> Evaluation:
        """Energy breakdown and, if requested, the gradient load matrix.

        ``v_eff_q`` optionally supplies a (lagged) Hartree + xc potential at
        quadrature points used for the gradient instead of the current one.
        """
        U = self._coeffs(U)
        f = self.occupations
        Uf = self.dofs.extend(U)
        uq = self.qd.interpolate(Uf)  # (nt, q, N)
        rho_q = (uq * uq) @ f

        KU = self.K @ U
        WU = self.W_ext @ U
        kinetic = 0.5 * float(f @ (U * KU).sum(axis=0))
        external = float(f @ (U * WU).sum(axis=0))

        hartree = 0.0
        vh = None
        veff = np.zeros_like(rho_q)
        if self.hartree is not None:
            vh, load = _hartree_from_quadrature(self.poisson, self.qd, rho_q, self.hartree, self._last_vh)
            self._last_vh = vh
            hartree = 0.5 * float(vh @ load)
            veff += self.qd.interpolate(vh)
        exc = 0.0
        if self.xc:
            ev = xc_lda(rho_q)
            exc = self.qd.integrate(rho_q * ev.eps_xc)
            veff += ev.v_xc

        energy = EnergyBreakdown.from_terms(kinetic, external, hartree, exc, self.e_nuc)
        result = Evaluation(U, energy, vh, veff)
        if gradient:
            w = veff if v_eff_q is None else v_eff_q
            Wq = np.column_stack([self.qd.load(w * uq[:, :, j]) for j in range(U.shape[1])])
            Wq = Wq[self.dofs.interior]
            result.gradient = f * (KU + 2.0 * WU + 2.0 * Wq)
        return result

    def total_energy(self, U) -> EnergyBreakdown:
        return self.evaluate(U, gradient=False).energy

    def gradient_load(self, U) -> np.ndarray:
        """Load-vector form of the energy gradient: ``dE/dU`` column by column."""
        return self.evaluate(U).gradient

    def riesz(self, G, x0=None) -> np.ndarray:
        """L2 Riesz representatives ``M^{-1} G``."""
        return solve_spd(self.M, G, self.mass_tol, x0=x0, precond=self._mass_precond)

    def grassmann_residual(self, U, G, g=None) -> float:
        """Discrete L2 norm of ``grad E <U^T U> - U <grad E, U>^T``."""
        U = self._coeffs(U)
        if g is None:
            g = self.riesz(G)
        R = grassmann_direction(self.M, U, G, g)
        return float(np.sqrt(max(np.trace(R.T @ (self.M @ R)), 0.0)))

    def hartree_of(self, rho: DensityField, x0=None) -> np.ndarray:
        bc = self.hartree or HartreeBC()
        solver = self.poisson or PoissonSolver(self.mesh)
        return _hartree_from_quadrature(solver, self.qd, self.qd.interpolate(rho.values), bc, x0)[0]


def grassmann_direction(M, U, G, g) -> np.ndarray:
    S = U.T @ (M @ U)
    return g @ S - U @ (U.T @ G)

