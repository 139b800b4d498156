"""
Conforming tetrahedral meshes of box domains.

Meshes start from a Kuhn (Freudenthal) triangulation of a uniform grid of
boxes and are refined by newest-vertex bisection in Maubach's tagged form:
a tet stored as ``(x0, x1, x2, x3)`` with tag ``k`` is bisected through the
midpoint ``z`` of its refinement edge ``x0 -- xk`` into

    (x0, ..., x_{k-1}, z, x_{k+1}, ..., x3)   and   (x1, ..., xk, z, x_{k+1}, ..., x3)

and both children receive tag ``k - 1`` (or 3 when ``k == 1``).  On Kuhn
triangulations this rule closes conformingly and produces finitely many
similarity classes of tets.

Every vertex created by refinement remembers the edge it bisected, so
nodal P1 data can be carried from any ancestor mesh to a descendant exactly.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

BOUNDARY_TOL = 1e-12

_uid_counter = itertools.count()

# local vertex pairs of the six edges of a tet
TET_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])
# local vertex triples of the four faces (face i is opposite vertex i)
TET_FACES = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])


class InvalidDomainError(ValueError):
    pass


class RefinementError(RuntimeError):
    pass


class LineageError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh:
    """Tetrahedral mesh of the box ``[lo, hi]``.

    Attributes
    ----------
    vertices : (nv, 3) float array
    tets : (nt, 4) int array, vertices in bisection order
    tags : (nt,) int array, the refinement edge of tet i is ``tets[i, 0] -- tets[i, tags[i]]``
    parents : (nv, 2) int array, endpoints of the bisected edge for created
        vertices and ``(-1, -1)`` for vertices of the initial grid
    level : number of ``bisect`` calls since the initial grid
    """

    vertices: np.ndarray
    tets: np.ndarray
    tags: np.ndarray
    parents: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    level: int = 0
    ancestors: frozenset = frozenset()
    uid: int = field(default_factory=lambda: next(_uid_counter))

    def __post_init__(self):
        for name in ("vertices", "tets", "tags", "parents", "lo", "hi"):
            getattr(self, name).flags.writeable = False

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    @property
    def refinement_edge(self) -> np.ndarray:
        """(nt, 2) array of refinement-edge endpoints."""
        rows = np.arange(self.n_tets)
        return np.column_stack([self.tets[:, 0], self.tets[rows, self.tags]])

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        v = self.vertices
        on_lo = np.abs(v - self.lo) <= BOUNDARY_TOL
        on_hi = np.abs(v - self.hi) <= BOUNDARY_TOL
        return (on_lo | on_hi).any(axis=1)

    @property
    def boundary_vertices(self) -> np.ndarray:
        return np.flatnonzero(self.boundary_mask)

    @property
    def interior_vertices(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_mask)

    @cached_property
    def _jacobians(self) -> np.ndarray:
        p = self.vertices[self.tets]
        return p[:, 1:, :] - p[:, :1, :]  # rows are x_i - x_0

    @cached_property
    def signed_volumes(self) -> np.ndarray:
        return np.linalg.det(self._jacobians) / 6.0

    @cached_property
    def volumes(self) -> np.ndarray:
        return np.abs(self.signed_volumes)

    @cached_property
    def barycentric_gradients(self) -> np.ndarray:
        """(nt, 4, 3) gradients of the barycentric coordinates of each tet."""
        inv = np.linalg.inv(self._jacobians)  # columns are grad lambda_1..3
        g = np.empty((self.n_tets, 4, 3))
        g[:, 1:, :] = np.transpose(inv, (0, 2, 1))
        g[:, 0, :] = -g[:, 1:, :].sum(axis=1)
        return g

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.tets].mean(axis=1)

    @property
    def domain_volume(self) -> float:
        return float(np.prod(self.hi - self.lo))


@dataclass(frozen=True)
class ElementSizeField:
    h: np.ndarray


def build_box_mesh(lo, hi, n) -> Mesh:
    """Kuhn triangulation of ``n`` boxes per axis, six tets per box."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    n = np.broadcast_to(np.asarray(n, dtype=int), (3,)).copy()
    if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
        raise InvalidDomainError(f"degenerate box lo={lo}, hi={hi}")
    if np.any(n < 1):
        raise InvalidDomainError(f"need at least one cell per axis, got {n}")

    axes = [np.linspace(lo[d], hi[d], n[d] + 1) for d in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    # exact box faces so the boundary test is robust
    for d in range(3):
        vertices[:, d] = np.where(np.isclose(vertices[:, d], lo[d]), lo[d], vertices[:, d])
        vertices[:, d] = np.where(np.isclose(vertices[:, d], hi[d]), hi[d], vertices[:, d])

    stride = np.array([(n[1] + 1) * (n[2] + 1), n[2] + 1, 1])
    I, J, K = np.meshgrid(np.arange(n[0]), np.arange(n[1]), np.arange(n[2]), indexing="ij")
    corner = np.column_stack([I.ravel(), J.ravel(), K.ravel()]) @ stride

    tets = []
    for perm in itertools.permutations(range(3)):
        path = [corner]
        offset = np.zeros(3, dtype=int)
        for axis in perm:
            offset[axis] = 1
            path.append(corner + offset @ stride)
        tets.append(np.column_stack(path))
    # interleave so the six tets of a box are contiguous
    tets = np.stack(tets, axis=1).reshape(-1, 4)

    return Mesh(
        vertices=vertices,
        tets=tets.astype(np.int64),
        tags=np.full(len(tets), 3, dtype=np.int64),
        parents=np.full((len(vertices), 2), -1, dtype=np.int64),
        lo=lo,
        hi=hi,
    )


def _edge_keys(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    lo = np.minimum(a, b).astype(np.int64)
    hi = np.maximum(a, b).astype(np.int64)
    return (lo << 32) | hi


class _MidpointTable:
    """Edges bisected during one refinement call, keyed by sorted vertex pair."""

    def __init__(self):
        self.keys = np.empty(0, dtype=np.int64)
        self.values = np.empty(0, dtype=np.int64)

    def lookup(self, keys):
        pos = np.searchsorted(self.keys, keys)
        pos = np.minimum(pos, len(self.keys) - 1) if len(self.keys) else pos
        found = np.zeros(len(keys), dtype=bool)
        if len(self.keys):
            found = self.keys[pos] == keys
        return found, np.where(found, self.values[pos] if len(self.keys) else -1, -1)

    def add(self, keys, values):
        keys = np.concatenate([self.keys, keys])
        values = np.concatenate([self.values, values])
        order = np.argsort(keys, kind="stable")
        self.keys, self.values = keys[order], values[order]


def bisect(mesh: Mesh, marked, max_depth: int = 50) -> Mesh:
    """Bisect every marked tet at least once and restore conformity.

    Closure is iterative: any tet having an edge whose midpoint was created
    in this call is bisected again, until no such edge remains.
    """
    marked = np.unique(np.asarray(marked, dtype=np.int64).ravel())
    if len(marked) == 0:
        return mesh
    if marked[0] < 0 or marked[-1] >= mesh.n_tets:
        raise IndexError("marked tet index out of range")

    tets = mesh.tets.copy()
    tags = mesh.tags.copy()
    new_vertices: list[np.ndarray] = []
    new_parents: list[np.ndarray] = []
    nv = mesh.n_vertices
    table = _MidpointTable()
    touched = np.zeros(nv, dtype=bool)
    vertices = mesh.vertices

    split = marked
    for _ in range(max_depth):
        if len(split) == 0:
            break
        sel = tets[split]
        k = tags[split]
        a = sel[:, 0]
        b = sel[np.arange(len(split)), k]
        keys = _edge_keys(a, b)

        found, mid = table.lookup(keys)
        fresh_keys, first = np.unique(keys[~found], return_index=True)
        if len(fresh_keys):
            src = np.flatnonzero(~found)[first]
            ends = np.column_stack([a[src], b[src]])
            ids = np.arange(nv, nv + len(fresh_keys))
            nv += len(fresh_keys)
            pts = 0.5 * (vertices[ends[:, 0]] + vertices[ends[:, 1]])
            new_vertices.append(pts)
            new_parents.append(ends)
            vertices = np.vstack([vertices, pts])
            table.add(fresh_keys, ids)
            touched = np.concatenate([touched, np.zeros(len(ids), dtype=bool)])
            touched[ends.ravel()] = True
            found, mid = table.lookup(keys)

        child1 = sel.copy()
        child1[np.arange(len(split)), k] = mid
        child2 = np.empty_like(sel)
        for kk in (1, 2, 3):
            rows = k == kk
            s = sel[rows]
            child2[rows] = np.column_stack([s[:, 1:kk + 1], mid[rows], s[:, kk + 1:]])
        new_tag = np.where(k > 1, k - 1, 3)

        tets[split] = child1
        tags[split] = new_tag
        tets = np.vstack([tets, child2])
        tags = np.concatenate([tags, new_tag])

        # tets that still carry a bisected edge have a hanging vertex
        cand = np.flatnonzero(touched[tets].sum(axis=1) >= 2)
        ct = tets[cand]
        ekeys = _edge_keys(ct[:, TET_EDGES[:, 0]], ct[:, TET_EDGES[:, 1]])
        hang, _ = table.lookup(ekeys.ravel())
        split = cand[hang.reshape(-1, 6).any(axis=1)]
    else:
        raise RefinementError(f"closure did not terminate within {max_depth} passes")

    parents = np.vstack([mesh.parents] + new_parents) if new_parents else mesh.parents.copy()
    return Mesh(
        vertices=vertices,
        tets=tets,
        tags=tags,
        parents=parents,
        lo=mesh.lo.copy(),
        hi=mesh.hi.copy(),
        level=mesh.level + 1,
        ancestors=mesh.ancestors | {mesh.uid},
    )


def refine_uniform(mesh: Mesh, rounds: int = 1) -> Mesh:
    """Bisect every tet ``rounds`` times; three rounds halve all edge lengths."""
    for _ in range(rounds):
        mesh = bisect(mesh, np.arange(mesh.n_tets))
    return mesh


def tets_near_points(mesh: Mesh, points, radius: float = 0.0) -> np.ndarray:
    """Indices of tets whose closure comes within ``radius`` of any point.

    Distances are measured conservatively with the circumscribing ball
    around the centroid.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if len(points) == 0:
        return np.empty(0, dtype=np.int64)
    c = mesh.centroids
    reach = np.linalg.norm(mesh.vertices[mesh.tets] - c[:, None, :], axis=2).max(axis=1)
    hit = np.zeros(mesh.n_tets, dtype=bool)
    for p in points:
        hit |= np.linalg.norm(c - p, axis=1) <= reach + radius + BOUNDARY_TOL
    return np.flatnonzero(hit)


def refine_near_points(mesh: Mesh, points, rounds: int, radius: float = 0.0) -> Mesh:
    """Repeatedly bisect the tets close to ``points`` (e.g. nuclei)."""
    for _ in range(rounds):
        mesh = bisect(mesh, tets_near_points(mesh, points, radius))
    return mesh


def grade_toward_points(mesh: Mesh, points, ratio: float, h_min: float, max_rounds: int = 200) -> Mesh:
    """Bisect until every tet satisfies ``h <= max(h_min, ratio * dist)``.

    ``dist`` is the distance from the nearest point to the tet's circumscribing
    ball, so the result is geometrically graded toward the points with a
    floor of ``h_min`` on the element size.
    """
    if ratio <= 0 or h_min <= 0:
        raise ValueError("ratio and h_min must be positive")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    for _ in range(max_rounds):
        c = mesh.centroids
        reach = np.linalg.norm(mesh.vertices[mesh.tets] - c[:, None, :], axis=2).max(axis=1)
        dist = np.min([np.linalg.norm(c - p, axis=1) for p in points], axis=0) - reach
        h = element_sizes(mesh).h
        todo = np.flatnonzero(h > np.maximum(h_min, ratio * np.maximum(dist, 0.0)))
        if len(todo) == 0:
            return mesh
        mesh = bisect(mesh, todo)
    raise RefinementError("grading did not terminate")


def element_sizes(mesh: Mesh) -> ElementSizeField:
    p = mesh.vertices[mesh.tets]
    d = p[:, TET_EDGES[:, 0], :] - p[:, TET_EDGES[:, 1], :]
    return ElementSizeField(h=np.sqrt((d * d).sum(axis=2)).max(axis=1))


def transfer_nodal(field, coarse: Mesh, fine: Mesh) -> np.ndarray:
    """Interpolate nodal P1 values from ``coarse`` onto its descendant ``fine``.

    ``field`` may carry trailing dimensions (e.g. several orbitals).
    """
    if fine.uid != coarse.uid and coarse.uid not in fine.ancestors:
        raise LineageError("fine mesh is not a bisection descendant of the coarse mesh")
    field = np.asarray(field, dtype=float)
    if field.shape[0] != coarse.n_vertices:
        raise ValueError("field does not match the coarse mesh")
    out = np.empty((fine.n_vertices,) + field.shape[1:])
    out[: coarse.n_vertices] = field
    done = np.zeros(fine.n_vertices, dtype=bool)
    done[: coarse.n_vertices] = True
    pending = np.arange(coarse.n_vertices, fine.n_vertices)
    parents = fine.parents
    while len(pending):
        ready = done[parents[pending]].all(axis=1)
        if not ready.any():
            raise LineageError("broken vertex genealogy")
        rows = pending[ready]
        out[rows] = 0.5 * (out[parents[rows, 0]] + out[parents[rows, 1]])
        done[rows] = True
        pending = pending[~ready]
    return out


def face_audit(mesh: Mesh) -> tuple[bool, str]:
    """Conformity audit by face matching.

    Every face must be shared by exactly two tets or lie on the boundary of
    the box; together with volume conservation this rules out hanging
    vertices and overlaps.
    """
    faces = np.sort(mesh.tets[:, TET_FACES].reshape(-1, 3), axis=1)
    uniq, counts = np.unique(faces, axis=0, return_counts=True)
    if np.any(counts > 2):
        return False, f"{int((counts > 2).sum())} faces shared by more than two tets"
    single = uniq[counts == 1]
    v = mesh.vertices[single]  # (nf, 3 vertices, 3 coords)
    on_plane = np.zeros(len(single), dtype=bool)
    for d in range(3):
        for bound in (mesh.lo[d], mesh.hi[d]):
            on_plane |= np.all(np.abs(v[:, :, d] - bound) <= BOUNDARY_TOL, axis=1)
    if not on_plane.all():
        return False, f"{int((~on_plane).sum())} unmatched interior faces"
    if np.any(mesh.signed_volumes == 0.0):
        return False, "degenerate tet"
    vol = mesh.volumes.sum()
    if abs(vol - mesh.domain_volume) > 1e-12 * mesh.domain_volume:
        return False, f"volume {vol} differs from box volume {mesh.domain_volume}"
    return True, "ok"


def min_dihedral_angle(mesh: Mesh) -> float:
    """Smallest dihedral angle (radians) over all tets."""
    g = mesh.barycentric_gradients
    n = g / np.linalg.norm(g, axis=2, keepdims=True)
    worst = np.pi
    for i, j in TET_EDGES:
        cosang = -(n[:, i, :] * n[:, j, :]).sum(axis=1)
        worst = min(worst, float(np.arccos(np.clip(cosang, -1, 1)).min()))
    return worst


def write_vtk(path, mesh: Mesh, point_data: dict | None = None, title: str = "ksflow mesh") -> Path:
    """Legacy ASCII VTK unstructured grid with optional scalar point data."""
    path = Path(path)
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {mesh.n_vertices} double")
    lines.extend(" ".join(repr(float(x)) for x in p) for p in mesh.vertices)
    lines.append(f"CELLS {mesh.n_tets} {5 * mesh.n_tets}")
    lines.extend("4 " + " ".join(str(int(i)) for i in t) for t in mesh.tets)
    lines.append(f"CELL_TYPES {mesh.n_tets}")
    lines.extend(["10"] * mesh.n_tets)
    if point_data:
        lines.append(f"POINT_DATA {mesh.n_vertices}")
        for name, values in point_data.items():
            values = np.asarray(values, dtype=float)
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(repr(float(x)) for x in values)
    path.write_text("\n".join(lines) + "\n")
    return path
