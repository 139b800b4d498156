"""
Recovery-based error indicators on the electron density and Doerfler marking.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import fem
from .mesh import Mesh, element_sizes

MODES = ("literal", "zz")


@dataclass(frozen=True)
class IndicatorField:
    eta: np.ndarray  # per tet, nonnegative
    mode: str = "literal"

    @property
    def total(self) -> float:
        return float(self.eta.sum())


@dataclass(frozen=True)
class MarkSet:
    marked: np.ndarray
    theta: float


def _values(rho) -> np.ndarray:
    return np.asarray(getattr(rho, "values", rho), dtype=float)


def element_gradients(mesh: Mesh, nodal: np.ndarray) -> np.ndarray:
    """Piecewise-constant gradients of a P1 field, shape (nt, 3) or (nt, 3, k) for vector fields."""
    local = nodal[mesh.tets]  # (nt, 4[, k])
    if local.ndim == 2:
        return np.einsum("tad,ta->td", mesh.barycentric_gradients, local)
    return np.einsum("tad,tak->tkd", mesh.barycentric_gradients, local)


def recover_gradient(mesh: Mesh, rho) -> np.ndarray:
    """Volume-weighted vertex average of the element gradients, shape (nv, 3)."""
    grads = element_gradients(mesh, _values(rho))
    vol = mesh.volumes
    idx = mesh.tets.ravel()
    weight = np.bincount(idx, weights=np.repeat(vol, 4), minlength=mesh.n_vertices)
    out = np.empty((mesh.n_vertices, 3))
    for d in range(3):
        out[:, d] = np.bincount(idx, weights=np.repeat(vol * grads[:, d], 4), minlength=mesh.n_vertices)
    return out / weight[:, None]


def indicator(mesh: Mesh, rho, mode: str = "literal") -> IndicatorField:
    """Per-tet indicator of a nodal density.

    ``literal``: ``h_T |T| |grad R(grad rho)|_F^2`` with the recovered field
    ``R(grad rho)`` differentiated elementwise.
    ``zz``: ``int_T |R(grad rho) - grad rho|^2``, integrated exactly.
    """
    if mode not in MODES:
        raise ValueError(f"unknown indicator mode {mode!r}")
    rho = _values(rho)
    rec = recover_gradient(mesh, rho)
    if mode == "literal":
        jac = element_gradients(mesh, rec)  # (nt, 3, 3)
        eta = element_sizes(mesh).h * mesh.volumes * (jac ** 2).sum(axis=(1, 2))
    else:
        diff = rec[mesh.tets] - element_gradients(mesh, rho)[:, None, :]  # (nt, 4, 3)
        Mloc = fem.local_mass(mesh.volumes)  # (nt, 4, 4)
        eta = np.einsum("tad,tab,tbd->t", diff, Mloc, diff)
    return IndicatorField(np.maximum(eta, 0.0), mode)


def mark(eta: IndicatorField, theta: float = 0.5) -> MarkSet:
    """Smallest set of largest indicators carrying a ``theta`` fraction of the total."""
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must lie in (0, 1)")
    values = np.asarray(eta.eta if isinstance(eta, IndicatorField) else eta, dtype=float)
    total = values.sum()
    if total <= 0:
        return MarkSet(np.empty(0, dtype=np.int64), theta)
    order = np.lexsort((np.arange(len(values)), -values))
    csum = np.cumsum(values[order])
    k = int(np.searchsorted(csum, theta * total, side="left")) + 1
    return MarkSet(np.sort(order[:min(k, len(values))]), theta)


def write_indicator_csv(path, mesh: Mesh, field: IndicatorField):
    c = mesh.centroids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tet", "cx", "cy", "cz", "eta"])
        for i in range(mesh.n_tets):
            w.writerow([i, repr(float(c[i, 0])), repr(float(c[i, 1])), repr(float(c[i, 2])), repr(float(field.eta[i]))])
