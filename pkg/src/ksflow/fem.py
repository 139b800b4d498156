"""
P1 Lagrange finite elements on tetrahedral meshes.

Operators are ``scipy.sparse.csr_matrix`` objects.  Dirichlet conditions are
imposed by elimination: unless ``full=True`` is passed, assembled operators
act on interior (non-boundary) vertices only, in the order given by
:class:`DofMap`.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.special import roots_jacobi

from .mesh import Mesh, element_sizes

R_MIN = 1e-8


class AssemblyError(RuntimeError):
    pass


class SolverStagnation(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class QuadratureRule:
    """Rule on the reference tet in barycentric coordinates.

    Weights are normalised to sum to one, so ``|tau| * sum(w * f(x_q))``
    approximates the integral over a tet ``tau``.
    """

    points: np.ndarray  # (q, 4)
    weights: np.ndarray  # (q,)
    degree: int

    @property
    def size(self) -> int:
        return len(self.weights)


def _perms(base):
    return np.array(sorted(set(itertools.permutations(base))))


CENTROID = QuadratureRule(np.full((1, 4), 0.25), np.ones(1), 1)

_a, _b = 0.5854101966249685, 0.1381966011250105
TET4 = QuadratureRule(_perms((_a, _b, _b, _b)), np.full(4, 0.25), 2)

# Keast's 11-point rule, exact for degree 4 (note the negative centroid weight)
_k1 = 1.0 / 14.0
_k2 = (1.0 + np.sqrt(5.0 / 14.0)) / 4.0
TET11 = QuadratureRule(
    np.vstack([
        np.full((1, 4), 0.25),
        _perms((_k1, _k1, _k1, 1 - 3 * _k1)),
        _perms((_k2, _k2, 0.5 - _k2, 0.5 - _k2)),
    ]),
    np.concatenate([[-148.0 / 1875.0], np.full(4, 343.0 / 7500.0), np.full(6, 56.0 / 375.0)]),
    4,
)


def conical_rule(n: int, singular: bool = False) -> QuadratureRule:
    """Collapsed Gauss-Jacobi product rule with ``n**3`` points.

    The collapsed direction ends at local vertex 0.  The plain rule is exact
    for polynomials of degree ``2n - 1``.  With ``singular=True`` the radial
    Jacobi weight is lowered by one power so that integrands behaving like
    ``1/r`` at vertex 0 are integrated with smooth-function accuracy.
    """
    xu, wu = roots_jacobi(n, 1 if singular else 2, 0)
    xv, wv = roots_jacobi(n, 1, 0)
    xw, ww = roots_jacobi(n, 0, 0)
    u, v, w = (0.5 * (x + 1.0) for x in (xu, xv, xw))
    U, V, W = np.meshgrid(u, v, w, indexing="ij")
    WU, WV, WW = np.meshgrid(wu, wv, ww, indexing="ij")
    lam0 = U
    lam1 = (1 - U) * V
    lam2 = (1 - U) * (1 - V) * W
    lam3 = (1 - U) * (1 - V) * (1 - W)
    pts = np.column_stack([lam0.ravel(), lam1.ravel(), lam2.ravel(), lam3.ravel()])
    wts = (WU * WV * WW).ravel()
    if singular:
        wts = wts * (1 - U.ravel())
    return QuadratureRule(pts, wts / wts.sum(), 2 * n - 1)


@dataclass(frozen=True)
class DofMap:
    """Interior-vertex numbering for homogeneous Dirichlet conditions."""

    interior: np.ndarray  # interior dof -> vertex
    index: np.ndarray  # vertex -> interior dof, -1 on the boundary

    @classmethod
    def from_mesh(cls, mesh: Mesh) -> "DofMap":
        interior = mesh.interior_vertices
        index = np.full(mesh.n_vertices, -1, dtype=np.int64)
        index[interior] = np.arange(len(interior))
        return cls(interior, index)

    @property
    def n(self) -> int:
        return len(self.interior)

    def restrict(self, full):
        return np.asarray(full)[self.interior]

    def extend(self, values):
        values = np.asarray(values)
        out = np.zeros((len(self.index),) + values.shape[1:], dtype=values.dtype)
        out[self.interior] = values
        return out


def _scatter(mesh: Mesh, local: np.ndarray, full: bool) -> sp.csr_matrix:
    t = mesh.tets
    rows = np.repeat(t, 4, axis=1).ravel()
    cols = np.tile(t, (1, 4)).ravel()
    n = mesh.n_vertices
    A = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    if full:
        return A
    inner = mesh.interior_vertices
    return A[inner][:, inner].tocsr()


def local_mass(volumes: np.ndarray) -> np.ndarray:
    base = (np.ones((4, 4)) + np.eye(4)) / 20.0
    return volumes[:, None, None] * base


def local_stiffness(mesh: Mesh) -> np.ndarray:
    g = mesh.barycentric_gradients
    return mesh.volumes[:, None, None] * np.einsum("tad,tbd->tab", g, g)


def assemble_mass(mesh: Mesh, full: bool = False) -> sp.csr_matrix:
    return _scatter(mesh, local_mass(mesh.volumes), full)


def assemble_stiffness(mesh: Mesh, full: bool = False) -> sp.csr_matrix:
    return _scatter(mesh, local_stiffness(mesh), full)


def barycentric_coordinates(mesh: Mesh, tet_ids, point) -> np.ndarray:
    """(len(tet_ids), 4) barycentric coordinates of ``point`` in the given tets."""
    tet_ids = np.asarray(tet_ids)
    x0 = mesh.vertices[mesh.tets[tet_ids, 0]]
    g = mesh.barycentric_gradients[tet_ids]
    lam = np.einsum("tad,td->ta", g[:, 1:, :], np.asarray(point) - x0)
    return np.column_stack([1.0 - lam.sum(axis=1), lam])


def containing_tets(mesh: Mesh, point, tol: float = 1e-12) -> np.ndarray:
    """Indices of tets whose closure contains ``point``."""
    point = np.asarray(point, dtype=float)
    c = mesh.centroids
    reach = np.linalg.norm(mesh.vertices[mesh.tets] - c[:, None, :], axis=2).max(axis=1)
    near = np.flatnonzero(np.linalg.norm(c - point, axis=1) <= reach + tol)
    if len(near) == 0:
        return near
    lam = barycentric_coordinates(mesh, near, point)
    return near[(lam >= -tol).all(axis=1)]


def evaluate_at(mesh: Mesh, nodal: np.ndarray, point) -> float:
    """Value of a P1 field at an arbitrary point of the domain."""
    tets = containing_tets(mesh, point, tol=1e-10)
    if len(tets) == 0:
        raise ValueError(f"point {point} is outside the mesh")
    lam = barycentric_coordinates(mesh, tets[:1], point)[0]
    return float(lam @ np.asarray(nodal)[mesh.tets[tets[0]]])


def _singular_rule(lam_p: np.ndarray, base: QuadratureRule) -> tuple[np.ndarray, np.ndarray]:
    """Split a tet at an interior/boundary point and use apex-collapsed rules."""
    pts, wts = [], []
    for j in range(4):
        if lam_p[j] <= 1e-14:
            continue
        face = [a for a in range(4) if a != j]
        # sub-tet (P, face vertices): bary = mu0 * lam_p + mu_k * e_face_k
        sub = base.points[:, :1] * lam_p[None, :]
        for k, a in enumerate(face):
            sub[:, a] += base.points[:, k + 1]
        pts.append(sub)
        wts.append(base.weights * lam_p[j])
    return np.vstack(pts), np.concatenate(wts)


def _evaluate_weight(mesh: Mesh, w, tet_ids, bary) -> np.ndarray:
    """Weight values at quadrature points; ``bary`` is (q, 4) or (T, q, 4)."""
    if callable(w):
        verts = mesh.vertices[mesh.tets[tet_ids]]  # (T, 4, 3)
        if bary.ndim == 2:
            x = np.einsum("qa,tad->tqd", bary, verts)
        else:
            x = np.einsum("tqa,tad->tqd", bary, verts)
        return np.asarray(w(x), dtype=float)
    nodal = np.asarray(w, dtype=float)[mesh.tets[tet_ids]]  # (T, 4)
    if bary.ndim == 2:
        return nodal @ bary.T
    return np.einsum("tqa,ta->tq", bary, nodal)


def _weighted_local(mesh, w, tet_ids, bary, weights):
    vals = _evaluate_weight(mesh, w, tet_ids, bary)
    if not np.all(np.isfinite(vals)):
        raise AssemblyError("non-finite weight at a quadrature point")
    vol = mesh.volumes[tet_ids]
    if bary.ndim == 2:
        return np.einsum("tq,q,qa,qb->tab", vals, weights, bary, bary) * vol[:, None, None]
    return np.einsum("tq,tq,tqa,tqb->tab", vals, weights, bary, bary) * vol[:, None, None]


def assemble_weighted_mass(
    mesh: Mesh,
    w,
    rule: QuadratureRule = TET4,
    near_points=None,
    near_rule: QuadratureRule = TET11,
    near_layers: float = 2.0,
    singular_points=None,
    singular_order: int = 4,
    full: bool = False,
) -> sp.csr_matrix:
    """Matrix of ``int w phi_i phi_j``.

    ``w`` is either a callable taking an array of points ``(..., 3)`` or a
    nodal P1 field.  Tets within ``near_layers`` element diameters of any of
    ``near_points`` use ``near_rule``; tets containing one of
    ``singular_points`` are split at that point and integrated with
    apex-collapsed rules, which handles ``1/|x - R|`` weights.
    """
    local = np.empty((mesh.n_tets, 4, 4))
    todo = np.ones(mesh.n_tets, dtype=bool)

    if singular_points is not None and len(singular_points):
        base = conical_rule(singular_order, singular=True)
        for p in np.atleast_2d(singular_points):
            for t in containing_tets(mesh, p):
                if not todo[t]:
                    continue
                lam_p = barycentric_coordinates(mesh, [t], p)[0]
                lam_p = np.clip(lam_p, 0.0, None)
                lam_p /= lam_p.sum()
                bary, wts = _singular_rule(lam_p, base)
                local[t] = _weighted_local(mesh, w, np.array([t]), bary[None], wts[None])[0]
                todo[t] = False

    if near_points is not None and len(near_points):
        h = element_sizes(mesh).h
        near = np.zeros(mesh.n_tets, dtype=bool)
        for p in np.atleast_2d(near_points):
            near |= np.linalg.norm(mesh.centroids - p, axis=1) <= (near_layers + 0.5) * h
        ids = np.flatnonzero(near & todo)
        if len(ids):
            local[ids] = _weighted_local(mesh, w, ids, near_rule.points, near_rule.weights)
            todo[ids] = False

    ids = np.flatnonzero(todo)
    if len(ids):
        local[ids] = _weighted_local(mesh, w, ids, rule.points, rule.weights)
    return _scatter(mesh, local, full)


def gram(M, U, V) -> np.ndarray:
    """Matrix of pairwise L2 inner products ``(u_i, v_j)``."""
    U = np.asarray(U)
    V = np.asarray(V)
    if U.ndim == 1:
        U = U[:, None]
    if V.ndim == 1:
        V = V[:, None]
    if U.shape[0] != M.shape[0] or V.shape[0] != M.shape[1]:
        raise ValueError(f"shape mismatch: M {M.shape}, U {U.shape}, V {V.shape}")
    return U.T @ (M @ V)


def jacobi_preconditioner(A) -> Callable[[np.ndarray], np.ndarray]:
    d = A.diagonal()
    if np.any(d <= 0):
        raise ValueError("matrix has non-positive diagonal")
    inv = 1.0 / d
    return lambda r: inv * r


def solve_spd(A, b, rel_tol: float = 1e-10, x0=None, precond=None, maxiter: int | None = None) -> np.ndarray:
    """Preconditioned conjugate gradients with ``||Ax - b|| <= rel_tol ||b||``.

    ``b`` may have several columns; each is solved independently.
    ``precond`` is a callable applying an approximate inverse (Jacobi if
    omitted).
    """
    if rel_tol <= 0:
        raise ValueError("rel_tol must be positive")
    b = np.asarray(b, dtype=float)
    if b.ndim == 2:
        x0 = np.zeros_like(b) if x0 is None else np.asarray(x0, dtype=float)
        cols = [solve_spd(A, b[:, j], rel_tol, x0[:, j], precond, maxiter) for j in range(b.shape[1])]
        return np.column_stack(cols) if cols else np.zeros_like(b)

    n = b.shape[0]
    if maxiter is None:
        maxiter = 10 * n
    if precond is None:
        precond = jacobi_preconditioner(A)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n)
    target = rel_tol * bnorm

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    rnorm = np.linalg.norm(r)
    it = 0
    while rnorm > target:
        z = precond(r)
        p = z.copy()
        rz = r @ z
        while True:
            if it >= maxiter:
                raise SolverStagnation(
                    f"CG did not reach relative residual {rel_tol:g} in {maxiter} iterations "
                    f"(achieved {rnorm / bnorm:.3e})",
                    rnorm / bnorm,
                )
            Ap = A @ p
            alpha = rz / (p @ Ap)
            x += alpha * p
            r -= alpha * Ap
            it += 1
            rnorm = np.linalg.norm(r)
            if rnorm <= target:
                break
            z = precond(r)
            rz_new = r @ z
            p = z + (rz_new / rz) * p
            rz = rz_new
        # guard against drift of the recursive residual
        r = b - A @ x
        rnorm = np.linalg.norm(r)
    return x


class QuadratureData:
    """Quadrature points of one rule on every tet of a mesh.

    Used for the matrix-free evaluation of nonlinear terms: values at
    quadrature points, integrals, and load vectors ``int f phi_i``.
    """

    def __init__(self, mesh: Mesh, rule: QuadratureRule = TET4):
        self.mesh = mesh
        self.rule = rule
        self.basis = rule.points  # (q, 4)
        self.dx = mesh.volumes[:, None] * rule.weights[None, :]  # (nt, q)
        self._points = None

    @property
    def points(self) -> np.ndarray:
        if self._points is None:
            self._points = np.einsum("qa,tad->tqd", self.basis, self.mesh.vertices[self.mesh.tets])
        return self._points

    def interpolate(self, nodal: np.ndarray) -> np.ndarray:
        """Values at quadrature points, shape (nt, q) or (nt, q, N)."""
        nodal = np.asarray(nodal)
        local = nodal[self.mesh.tets]  # (nt, 4[, N])
        if nodal.ndim == 1:
            return local @ self.basis.T
        return np.einsum("qa,tan->tqn", self.basis, local)

    def integrate(self, values: np.ndarray) -> float:
        return float((self.dx * values).sum())

    def load(self, values: np.ndarray) -> np.ndarray:
        """Full-vertex vector of ``int f phi_i`` for ``f`` given at quadrature points."""
        contrib = (self.dx * values) @ self.basis  # (nt, 4)
        return np.bincount(self.mesh.tets.ravel(), weights=contrib.ravel(), minlength=self.mesh.n_vertices)

    def weighted_apply(self, weight: np.ndarray, nodal: np.ndarray) -> np.ndarray:
        """Full-vertex ``W u`` with ``W_ij = int weight phi_i phi_j``, without forming ``W``."""
        nodal = np.asarray(nodal)
        if nodal.ndim == 1:
            return self.load(weight * self.interpolate(nodal))
        uq = self.interpolate(nodal)
        return np.column_stack([self.load(weight * uq[:, :, j]) for j in range(nodal.shape[1])])

