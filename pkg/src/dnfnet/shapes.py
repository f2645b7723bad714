"""Procedural test meshes: grids, cubes, icospheres, tori."""

import numpy as np

from .mesh import TriMesh


def unit_cube() -> TriMesh:
    """Axis-aligned unit cube, 8 vertices, 12 outward-facing triangles."""
    v = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
    # vertex id = 4x + 2y + z
    quads = [
        (0, 1, 3, 2),  # x = 0
        (4, 6, 7, 5),  # x = 1
        (0, 4, 5, 1),  # y = 0
        (2, 3, 7, 6),  # y = 1
        (0, 2, 6, 4),  # z = 0
        (1, 5, 7, 3),  # z = 1
    ]
    f = []
    for a, b, c, d in quads:
        f += [(a, b, c), (a, c, d)]
    return TriMesh(v, f)


def grid(nx: int, ny: int, size=(1.0, 1.0), alternate=False) -> TriMesh:
    """Flat ``nx`` x ``ny`` vertex grid in the z=0 plane, normals +z.

    ``alternate`` flips the diagonal in a checkerboard, giving a more
    isotropic triangulation.
    """
    xs = np.linspace(0.0, size[0], nx)
    ys = np.linspace(0.0, size[1], ny)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    v = np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], axis=1)
    f = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            a, b = i * ny + j, (i + 1) * ny + j
            c, d = (i + 1) * ny + j + 1, i * ny + j + 1
            if alternate and (i + j) % 2:
                f += [(a, b, d), (b, c, d)]
            else:
                f += [(a, b, c), (a, c, d)]
    return TriMesh(v, f)


def box_grid(m: int, size=1.0) -> TriMesh:
    """Closed cube surface with each side split into ``m`` x ``m`` quads (12 m^2 faces)."""
    t = np.linspace(-0.5, 0.5, m + 1) * size
    verts, index, faces = [], {}, []

    def vid(p):
        key = tuple(np.round(p, 12))
        if key not in index:
            index[key] = len(verts)
            verts.append(p)
        return index[key]

    h = 0.5 * size
    for axis in range(3):
        for sign in (-1.0, 1.0):
            u, w = [a for a in range(3) if a != axis]
            for i in range(m):
                for j in range(m):
                    ids = []
                    for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = np.zeros(3)
                        p[axis] = sign * h
                        p[u], p[w] = t[i + di], t[j + dj]
                        ids.append(vid(p))
                    a, b, c, d = ids
                    # orient outward: (u, w, axis) right-handed iff axis == 1 flips
                    outward = sign * (1 if axis != 1 else -1)
                    q = [(a, b, c), (a, c, d)] if outward > 0 else [(a, c, b), (a, d, c)]
                    if (i + j) % 2:
                        q = ([(a, b, d), (b, c, d)] if outward > 0
                             else [(a, d, b), (b, d, c)])
                    faces += q
    return TriMesh(np.array(verts), faces)


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriMesh:
    """Geodesic sphere from a subdivided icosahedron (20 * 4^s faces)."""
    p = (1.0 + 5 ** 0.5) / 2.0
    v = [(-1, p, 0), (1, p, 0), (-1, -p, 0), (1, -p, 0),
         (0, -1, p), (0, 1, p), (0, -1, -p), (0, 1, -p),
         (p, 0, -1), (p, 0, 1), (-p, 0, -1), (-p, 0, 1)]
    verts = [np.array(x, float) / np.linalg.norm(x) for x in v]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriMesh(np.array(verts) * radius, faces)


def torus(n_major: int = 32, n_minor: int = 16, R: float = 1.0, r: float = 0.4) -> TriMesh:
    """Torus around the z axis with outward normals (2 * n_major * n_minor faces)."""
    u = np.arange(n_major) * 2 * np.pi / n_major
    w = np.arange(n_minor) * 2 * np.pi / n_minor
    U, W = np.meshgrid(u, w, indexing="ij")
    x = (R + r * np.cos(W)) * np.cos(U)
    y = (R + r * np.cos(W)) * np.sin(U)
    z = r * np.sin(W)
    v = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    f = []
    for i in range(n_major):
        for j in range(n_minor):
            a = i * n_minor + j
            b = ((i + 1) % n_major) * n_minor + j
            c = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
            d = i * n_minor + (j + 1) % n_minor
            f += [(a, b, c), (a, c, d)]
    return TriMesh(v, f)
