"""Geodesic distances on triangle meshes.

Two backends: the heat method (short-time diffusion, normalised gradient,
Poisson recovery) and Dijkstra along mesh edges. ``face_to_face_distance``
combines three per-vertex fields into the seed-face distance used for patch
growth.
"""

from __future__ import annotations

import csv

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse import linalg as spla

from .mesh import TriMesh, average_edge_length

COT_FLOOR = 1e-8
CG_TOL = 1e-8


class SolverError(RuntimeError):
    """Raised when an iterative solve fails to converge."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


def _corner_cotangents(mesh: TriMesh) -> np.ndarray:
    """cot of the interior angle at each corner, shape (F, 3)."""
    p = mesh.vertices[mesh.faces]
    cots = np.empty((mesh.n_faces, 3))
    for i in range(3):
        a = p[:, (i + 1) % 3] - p[:, i]
        b = p[:, (i + 2) % 3] - p[:, i]
        cross = np.linalg.norm(np.cross(a, b), axis=1)
        cots[:, i] = np.einsum("ij,ij->i", a, b) / np.maximum(cross, 1e-300)
    return cots


def cotan_laplacian(mesh: TriMesh) -> sparse.csr_matrix:
    """Negative semi-definite cotangent Laplacian.

    Off-diagonal ``L[i, j] = max(w_ij, 1e-8)`` with ``w_ij`` the half-sum of
    the cotangents opposite edge ij; rows sum to zero.
    """
    f = mesh.faces
    cots = _corner_cotangents(mesh)
    I, J, W = [], [], []
    for i in range(3):
        # corner i is opposite edge (i+1, i+2)
        I.append(f[:, (i + 1) % 3])
        J.append(f[:, (i + 2) % 3])
        W.append(0.5 * cots[:, i])
    I, J, W = np.concatenate(I), np.concatenate(J), np.concatenate(W)
    n = mesh.n_vertices
    off = sparse.coo_matrix((W, (I, J)), shape=(n, n)).tocsr()
    off = off + off.T
    off.data = np.maximum(off.data, COT_FLOOR)
    diag = np.asarray(off.sum(axis=1)).ravel()
    return (off - sparse.diags(diag)).tocsr()


def lumped_mass(mesh: TriMesh) -> np.ndarray:
    """Barycentric vertex areas (a third of each incident face area)."""
    a = np.zeros(mesh.n_vertices)
    for i in range(3):
        np.add.at(a, mesh.faces[:, i], mesh.face_areas / 3.0)
    return a


def face_gradient(mesh: TriMesh, u: np.ndarray) -> np.ndarray:
    """Per-face gradient of a piecewise-linear vertex function, shape (F, 3)."""
    p = mesh.vertices[mesh.faces]
    n = mesh.face_normals
    area2 = 2.0 * mesh.face_areas
    g = np.zeros((mesh.n_faces, 3))
    for i in range(3):
        e = p[:, (i + 2) % 3] - p[:, (i + 1) % 3]  # edge opposite corner i, CCW
        g += u[mesh.faces[:, i], None] * np.cross(n, e)
    return g / np.maximum(area2, 1e-300)[:, None]


def vertex_divergence(mesh: TriMesh, X: np.ndarray) -> np.ndarray:
    """Integrated divergence of a per-face vector field, consistent with
    :func:`cotan_laplacian` so that ``div(grad u) == L u``."""
    p = mesh.vertices[mesh.faces]
    cots = _corner_cotangents(mesh)
    div = np.zeros(mesh.n_vertices)
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        e1 = p[:, j] - p[:, i]
        e2 = p[:, k] - p[:, i]
        # cot at k is opposite e1, cot at j is opposite e2
        val = 0.5 * (cots[:, k] * np.einsum("ij,ij->i", e1, X)
                     + cots[:, j] * np.einsum("ij,ij->i", e2, X))
        np.add.at(div, mesh.faces[:, i], val)
    return div


def _pcg(A, b, tol=CG_TOL, maxiter=None):
    d = A.diagonal()
    M = sparse.diags(np.where(d != 0, 1.0 / d, 1.0))
    maxiter = maxiter or 5 * A.shape[0]
    x, info = spla.cg(A, b, rtol=tol, atol=0.0, maxiter=maxiter, M=M)
    bn = np.linalg.norm(b)
    res = np.linalg.norm(A @ x - b) / (bn if bn > 0 else 1.0)
    if info != 0:
        raise SolverError("conjugate gradient did not converge", res)
    return x


class _SPDSolver:
    def __init__(self, A, method):
        self.A = A.tocsc()
        self.method = method
        self._lu = spla.splu(self.A) if method == "direct" else None

    def solve(self, b):
        if self.method == "direct":
            return self._lu.solve(np.asarray(b, dtype=np.float64))
        b = np.asarray(b, dtype=np.float64)
        if b.ndim == 1:
            return _pcg(self.A, b)
        return np.stack([_pcg(self.A, b[:, c]) for c in range(b.shape[1])], axis=1)


class HeatGeodesics:
    """Heat-method distance solver with precomputed system matrices.

    Parameters
    ----------
    mesh : TriMesh
    time_scale : float
        Diffusion time is ``time_scale * h**2`` with ``h`` the mean edge length.
    solver : {"direct", "cg"}
        Sparse LU factorisation reused across sources, or Jacobi-preconditioned
        conjugate gradients per solve.
    """

    def __init__(self, mesh: TriMesh, time_scale: float = 1.0, solver: str = "direct"):
        if solver not in ("direct", "cg"):
            raise ValueError(f"unknown solver {solver!r}")
        self.mesh = mesh
        h = average_edge_length(mesh)
        self.t = time_scale * h * h
        L = cotan_laplacian(mesh)
        self.L = L
        self.mass = lumped_mass(mesh)
        self._heat = _SPDSolver(sparse.diags(self.mass) - self.t * L, solver)

        n = mesh.n_vertices
        ncomp, labels = csgraph.connected_components(
            sparse.coo_matrix((np.ones(len(mesh.edges)),
                               (mesh.edges[:, 0], mesh.edges[:, 1])), shape=(n, n)),
            directed=False)
        self.labels = labels
        # pin one vertex per component to remove the constant null space of -L
        pins = np.array([np.flatnonzero(labels == c)[0] for c in range(ncomp)])
        keep = np.ones(n, dtype=bool)
        keep[pins] = False
        self._keep = keep
        self._poisson = _SPDSolver((-L)[keep][:, keep], solver)

    def distance(self, source: int) -> np.ndarray:
        """Distances from ``source``; vertices in other components are ``inf``."""
        return self.distances([source])[0]

    def distances(self, sources) -> np.ndarray:
        """Distance fields for several sources, shape (len(sources), V)."""
        sources = [int(s) for s in sources]
        n = self.mesh.n_vertices
        rhs = np.zeros((n, len(sources)))
        for c, s in enumerate(sources):
            rhs[s, c] = 1.0
        u = self._heat.solve(rhs)
        if u.ndim == 1:
            u = u[:, None]
        b = np.zeros((n, len(sources)))
        for c in range(len(sources)):
            g = face_gradient(self.mesh, u[:, c])
            gn = np.linalg.norm(g, axis=1)
            X = np.where(gn[:, None] > 0, -g / np.where(gn > 0, gn, 1.0)[:, None], 0.0)
            b[:, c] = vertex_divergence(self.mesh, X)
        phi = np.zeros((n, len(sources)))
        sol = self._poisson.solve(-b[self._keep])
        phi[self._keep] = sol.reshape(-1, len(sources))
        out = np.empty((len(sources), n))
        for c, s in enumerate(sources):
            d = phi[:, c] - phi[s, c]
            d = np.maximum(d, 0.0)
            d[self.labels != self.labels[s]] = np.inf
            d[s] = 0.0
            out[c] = d
        return out


def heat_geodesic(mesh: TriMesh, source_vertex: int, time_scale: float = 1.0,
                  solver: str = "direct") -> np.ndarray:
    """Heat-method geodesic distance from one vertex to all vertices."""
    return HeatGeodesics(mesh, time_scale, solver).distance(source_vertex)


def edge_graph(mesh: TriMesh) -> sparse.csr_matrix:
    e = mesh.edges
    w = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    n = mesh.n_vertices
    g = sparse.coo_matrix((w, (e[:, 0], e[:, 1])), shape=(n, n)).tocsr()
    return g + g.T


class DijkstraGeodesics:
    """Edge-path distances; same interface as :class:`HeatGeodesics`."""

    def __init__(self, mesh: TriMesh):
        self.mesh = mesh
        self._graph = edge_graph(mesh)

    def distance(self, source: int) -> np.ndarray:
        return self.distances([source])[0]

    def distances(self, sources) -> np.ndarray:
        return csgraph.dijkstra(self._graph, directed=False,
                                indices=np.asarray(sources, dtype=np.int64))


def dijkstra_geodesic(mesh: TriMesh, source_vertex: int) -> np.ndarray:
    """Shortest edge-path distances; unreachable vertices are ``inf``."""
    return DijkstraGeodesics(mesh).distance(source_vertex)


def make_backend(mesh: TriMesh, backend: str = "heat", **kw):
    if backend == "heat":
        return HeatGeodesics(mesh, **kw)
    if backend == "dijkstra":
        return DijkstraGeodesics(mesh)
    raise ValueError(f"unknown geodesic backend {backend!r}")


def face_to_face_distance(mesh: TriMesh, seed_face: int, dist_fields) -> np.ndarray:
    """Seed-to-face distance: min over the 9 (seed vertex, face vertex) pairs.

    ``dist_fields`` holds the three vertex distance fields sourced at the
    seed face's vertices, shape (3, V).
    """
    D = np.asarray(dist_fields, dtype=np.float64)
    if D.shape != (3, mesh.n_vertices):
        raise ValueError(f"expected (3, {mesh.n_vertices}) distance fields, got {D.shape}")
    out = D[:, mesh.faces].min(axis=(0, 2))
    out[seed_face] = 0.0
    return out


def dump_distance_csv(path, distances) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vertex", "distance"])
        for i, d in enumerate(distances):
            w.writerow([i, repr(float(d))])
