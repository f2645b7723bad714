"""Indexed triangle meshes, text-format I/O and per-face geometry."""

from __future__ import annotations

import os
from functools import cached_property

import numpy as np

SUPPORTED_FORMATS = ("obj", "off", "ply")

# relative threshold on |cross|, scaled by the squared longest edge
_DEGENERATE_REL = 1e-12


class MeshError(ValueError):
    """Base error for malformed meshes."""


class MeshParseError(MeshError):
    pass


class MeshTopologyError(MeshError):
    pass


class TriMesh:
    """Immutable indexed triangle mesh.

    Parameters
    ----------
    vertices : array_like, shape (V, 3)
    faces : array_like of int, shape (F, 3)
        Vertex indices, 0-based. Winding defines the normal orientation.

    Derived quantities (normals, centroids, adjacency) are computed lazily
    and cached; the coordinate and index arrays are read-only so the caches
    can never go stale.
    """

    def __init__(self, vertices, faces):
        v = np.array(vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(faces, dtype=np.int64).reshape(-1, 3)
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                bad = f[(f < 0) | (f >= len(v))][0]
                raise MeshTopologyError(
                    f"face index {bad} out of range for {len(v)} vertices")
            rep = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if rep.any():
                raise MeshTopologyError(
                    f"face {int(np.flatnonzero(rep)[0])} repeats a vertex index")
        v.setflags(write=False)
        f.setflags(write=False)
        self._v = v
        self._f = f

    @property
    def vertices(self) -> np.ndarray:
        return self._v

    @property
    def faces(self) -> np.ndarray:
        return self._f

    @property
    def n_vertices(self) -> int:
        return len(self._v)

    @property
    def n_faces(self) -> int:
        return len(self._f)

    def __repr__(self):
        return f"TriMesh(V={self.n_vertices}, F={self.n_faces})"

    def with_vertices(self, vertices) -> "TriMesh":
        """Same connectivity, new positions."""
        out = TriMesh.__new__(TriMesh)
        v = np.array(vertices, dtype=np.float64).reshape(self._v.shape)
        v.setflags(write=False)
        out._v = v
        out._f = self._f
        return out

    # -- per-face geometry -------------------------------------------------

    @cached_property
    def _cross(self) -> np.ndarray:
        p = self._v[self._f]
        return np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])

    @cached_property
    def degenerate(self) -> np.ndarray:
        """Boolean mask of zero-area faces."""
        if not self.n_faces:
            return np.zeros(0, dtype=bool)
        p = self._v[self._f]
        e2 = np.max([np.sum((p[:, i] - p[:, (i + 1) % 3]) ** 2, axis=1)
                     for i in range(3)], axis=0)
        mag = np.linalg.norm(self._cross, axis=1)
        return mag <= _DEGENERATE_REL * e2

    @cached_property
    def face_normals(self) -> np.ndarray:
        n = self._cross.copy()
        mag = np.linalg.norm(n, axis=1)
        deg = self.degenerate
        n[~deg] /= mag[~deg, None]
        n[deg] = (0.0, 0.0, 1.0)
        n.setflags(write=False)
        return n

    @cached_property
    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._cross, axis=1)

    @cached_property
    def face_centroids(self) -> np.ndarray:
        c = self._v[self._f].mean(axis=1)
        c.setflags(write=False)
        return c

    @cached_property
    def vertex_normals(self) -> np.ndarray:
        """Area-weighted vertex normals (unnormalized cross products summed)."""
        acc = np.zeros_like(self._v)
        for i in range(3):
            np.add.at(acc, self._f[:, i], self._cross)
        mag = np.linalg.norm(acc, axis=1)
        ok = mag > 0
        acc[ok] /= mag[ok, None]
        acc[~ok] = (0.0, 0.0, 1.0)
        return acc

    # -- connectivity ------------------------------------------------------

    @cached_property
    def _half_edges(self):
        # (sorted edge key pairs, owning face) for the 3F face sides
        f = self._f
        a = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
        b = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        owner = np.tile(np.arange(len(f)), 3)
        return lo, hi, owner

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges, shape (E, 2), each listed once."""
        if not self.n_faces:
            return np.zeros((0, 2), dtype=np.int64)
        lo, hi, _ = self._half_edges
        return np.unique(np.stack([lo, hi], axis=1), axis=0)

    @cached_property
    def face_adjacency(self) -> list[np.ndarray]:
        """Per face, the sorted ids of faces sharing an edge with it."""
        nf = self.n_faces
        if not nf:
            return []
        lo, hi, owner = self._half_edges
        key = lo * self.n_vertices + hi
        order = np.argsort(key, kind="stable")
        key, owner = key[order], owner[order]
        starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
        ends = np.r_[starts[1:], len(key)]
        nbrs = [set() for _ in range(nf)]
        for s, e in zip(starts, ends):
            if e - s < 2:
                continue
            group = owner[s:e]
            for g in group:
                nbrs[g].update(group)
        out = []
        for i, s in enumerate(nbrs):
            s.discard(i)
            out.append(np.array(sorted(s), dtype=np.int64))
        return out

    @cached_property
    def boundary_faces(self) -> np.ndarray:
        """Mask of faces with at least one edge not shared by another face."""
        nf = self.n_faces
        if not nf:
            return np.zeros(0, dtype=bool)
        lo, hi, owner = self._half_edges
        key = lo * self.n_vertices + hi
        _, inv, counts = np.unique(key, return_inverse=True, return_counts=True)
        mask = np.zeros(nf, dtype=bool)
        mask[owner[counts[inv] == 1]] = True
        return mask

    @cached_property
    def vertex_faces(self) -> list[np.ndarray]:
        """Per vertex, ids of incident faces."""
        flat = self._f.ravel()
        fid = np.repeat(np.arange(self.n_faces), 3)
        order = np.argsort(flat, kind="stable")
        counts = np.bincount(flat, minlength=self.n_vertices)
        return np.split(fid[order], np.cumsum(counts)[:-1])


def face_normals(mesh: TriMesh) -> np.ndarray:
    """Unit normals following vertex winding; degenerate faces get (0, 0, 1).

    Check ``mesh.degenerate`` for the fallback flag.
    """
    return mesh.face_normals


def face_centroids(mesh: TriMesh) -> np.ndarray:
    return mesh.face_centroids


def face_adjacency(mesh: TriMesh) -> list[np.ndarray]:
    return mesh.face_adjacency


def average_edge_length(mesh: TriMesh) -> float:
    e = mesh.edges
    if not len(e):
        raise MeshError("mesh has no edges")
    v = mesh.vertices
    return float(np.linalg.norm(v[e[:, 0]] - v[e[:, 1]], axis=1).mean())


def one_ring_normal_variance(mesh: TriMesh, normals=None) -> np.ndarray:
    """Mean squared deviation of edge-adjacent normals from the ring mean.

    The ring mean includes the centre face; faces without neighbours get 0.
    """
    n = mesh.face_normals if normals is None else np.asarray(normals, dtype=np.float64)
    if len(n) != mesh.n_faces:
        raise ValueError(f"normals length {len(n)} != face count {mesh.n_faces}")
    out = np.zeros(mesh.n_faces)
    for f, adj in enumerate(mesh.face_adjacency):
        if not len(adj):
            continue
        ring = n[adj]
        mean = (n[f] + ring.sum(axis=0)) / (len(adj) + 1)
        out[f] = np.mean(np.sum((ring - mean) ** 2, axis=1))
    return out


# -- file I/O ---------------------------------------------------------------

def _detect_format(path, fmt):
    if fmt is None:
        fmt = os.path.splitext(str(path))[1].lstrip(".").lower()
    fmt = fmt.lower()
    if fmt == "ply-ascii":
        fmt = "ply"
    if fmt not in SUPPORTED_FORMATS:
        raise MeshParseError(f"unsupported mesh format {fmt!r}")
    return fmt


def _fan(poly):
    return [(poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1)]


def _read_obj(lines):
    verts, faces = [], []
    for no, line in enumerate(lines, 1):
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        try:
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
                if len(verts[-1]) != 3:
                    raise ValueError("vertex needs 3 coordinates")
            elif tok[0] == "f":
                idx = []
                for t in tok[1:]:
                    i = int(t.split("/")[0])
                    # negative indices are relative to the current vertex count
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                if len(idx) < 3:
                    raise ValueError("face needs at least 3 vertices")
                faces.extend(_fan(idx))
        except ValueError as exc:
            raise MeshParseError(f"line {no}: {exc}") from None
    return verts, faces


def _tokens(lines):
    for line in lines:
        body = line.split("#", 1)[0].split()
        if body:
            yield body


def _read_off(lines):
    it = _tokens(lines)
    try:
        head = next(it)
        if head[0] not in ("OFF", "COFF", "NOFF") and not head[0].endswith("OFF"):
            raise MeshParseError("missing OFF header")
        counts = head[1:] if len(head) > 1 else next(it)
        nv, nf = int(counts[0]), int(counts[1])
        verts = [[float(x) for x in next(it)[:3]] for _ in range(nv)]
        faces = []
        for _ in range(nf):
            row = next(it)
            k = int(row[0])
            idx = [int(x) for x in row[1:1 + k]]
            if len(idx) != k or k < 3:
                raise MeshParseError("malformed OFF face record")
            faces.extend(_fan(idx))
    except (StopIteration, IndexError, ValueError) as exc:
        raise MeshParseError(f"truncated or malformed OFF file: {exc}") from None
    return verts, faces


def _read_ply(lines):
    lines = list(lines)
    if not lines or lines[0].strip() != "ply":
        raise MeshParseError("missing ply magic")
    elements = []  # [name, count, [props]]
    body_at = None
    for i, line in enumerate(lines[1:], 1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise MeshParseError(f"only ASCII PLY is supported, got {tok[1]}")
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise MeshParseError("property before element")
            elements[-1][2].append(tok[1:])
        elif tok[0] == "end_header":
            body_at = i + 1
            break
    if body_at is None:
        raise MeshParseError("missing end_header")
    rows = (l.split() for l in lines[body_at:] if l.strip())
    verts, faces = [], []
    try:
        for name, count, props in elements:
            names = [p[-1] for p in props]
            for _ in range(count):
                row = next(rows)
                if name == "vertex":
                    xyz = [row[names.index(c)] for c in ("x", "y", "z")]
                    verts.append([float(x) for x in xyz])
                elif name == "face":
                    k = int(row[0])
                    idx = [int(x) for x in row[1:1 + k]]
                    if len(idx) != k or k < 3:
                        raise MeshParseError("malformed PLY face record")
                    faces.extend(_fan(idx))
    except (StopIteration, ValueError) as exc:
        raise MeshParseError(f"truncated or malformed PLY body: {exc}") from None
    return verts, faces


_READERS = {"obj": _read_obj, "off": _read_off, "ply": _read_ply}


def load_mesh(path, format=None) -> TriMesh:
    """Read an OBJ, OFF or ASCII PLY file; polygons are fan-triangulated."""
    fmt = _detect_format(path, format)
    with open(path, "r") as fh:
        verts, faces = _READERS[fmt](fh.read().splitlines())
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                   np.array(faces, dtype=np.int64).reshape(-1, 3))


def _fmt(x):
    return repr(float(x))


def save_mesh(mesh: TriMesh, path, format=None, face_colors=None) -> None:
    """Write ``mesh``; coordinates are written at full double precision.

    ``face_colors`` (F, 3) uint8 is only honoured for PLY output.
    """
    fmt = _detect_format(path, format)
    v, f = mesh.vertices, mesh.faces
    out = []
    if fmt == "obj":
        out += [f"v {_fmt(a)} {_fmt(b)} {_fmt(c)}" for a, b, c in v]
        out += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in f]
    elif fmt == "off":
        out.append("OFF")
        out.append(f"{len(v)} {len(f)} 0")
        out += [f"{_fmt(a)} {_fmt(b)} {_fmt(c)}" for a, b, c in v]
        out += [f"3 {a} {b} {c}" for a, b, c in f]
    else:
        out += ["ply", "format ascii 1.0", f"element vertex {len(v)}",
                "property double x", "property double y", "property double z",
                f"element face {len(f)}", "property list uchar int vertex_indices"]
        if face_colors is not None:
            out += ["property uchar red", "property uchar green", "property uchar blue"]
        out.append("end_header")
        out += [f"{_fmt(a)} {_fmt(b)} {_fmt(c)}" for a, b, c in v]
        if face_colors is None:
            out += [f"3 {a} {b} {c}" for a, b, c in f]
        else:
            cols = np.asarray(face_colors, dtype=np.uint8)
            out += [f"3 {a} {b} {c} {r} {g} {bl}"
                    for (a, b, c), (r, g, bl) in zip(f, cols)]
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
