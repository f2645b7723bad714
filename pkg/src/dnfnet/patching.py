"""Patch extraction: seed sampling, geodesic growth, neighbour indices,
ground-truth pairing, augmentation and the binary patch dataset format."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial.transform import Rotation

from .geodesics import face_to_face_distance, make_backend
from .mesh import TriMesh, one_ring_normal_variance

MAGIC = b"DNFPATCH"
VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass
class PatchSample:
    """One network input unit.

    ``normals`` and ``gt_normals`` are (N, 3) float32 with row r belonging to
    face ``face_ids[r]``; ``neighbor_index`` is (N, K) with row indices into
    the patch, never containing its own row.
    """

    seed_face: int
    face_ids: np.ndarray
    normals: np.ndarray
    neighbor_index: np.ndarray
    gt_normals: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.face_ids)

    @property
    def k(self) -> int:
        return self.neighbor_index.shape[1]

    def validate(self) -> None:
        N = self.n
        if self.face_ids[0] != self.seed_face:
            raise DatasetError("first patch face must be the seed")
        if len(np.unique(self.face_ids)) != N:
            raise DatasetError("duplicate face ids in patch")
        idx = self.neighbor_index
        if idx.shape[0] != N or idx.min() < 0 or idx.max() >= N:
            raise DatasetError("neighbour index out of range")
        if np.any(idx == np.arange(N)[:, None]):
            raise DatasetError("neighbour index contains its own row")
        for arr in (self.normals, self.gt_normals):
            if arr is None:
                continue
            if arr.shape != (N, 3):
                raise DatasetError(f"normal matrix has shape {arr.shape}, expected ({N}, 3)")
            if np.abs(np.linalg.norm(arr.astype(np.float64), axis=1) - 1).max() > 1e-6:
                raise DatasetError("normal rows are not unit length")


@dataclass
class PatchDataset:
    N: int
    K: int
    samples: list = field(default_factory=list)
    provenance: str = ""
    version: int = VERSION

    def __len__(self):
        return len(self.samples)


# -- seeds and growth --------------------------------------------------------

def sample_seed_faces(mesh: TriMesh, variance, P: int, rng_seed) -> np.ndarray:
    """Draw ``P`` distinct faces with probability proportional to
    ``variance + eps`` (``eps`` = 1e-6 times the largest variance, or 1e-6)."""
    var = np.asarray(variance, dtype=np.float64)
    if P > mesh.n_faces:
        raise ValueError(f"cannot sample {P} seeds from {mesh.n_faces} faces")
    vmax = var.max() if len(var) and var.max() > 0 else 1.0
    w = var + 1e-6 * vmax
    rng = np.random.default_rng(rng_seed)
    return rng.choice(mesh.n_faces, size=P, replace=False, p=w / w.sum())


def seed_distances(mesh: TriMesh, seed_face: int, geo) -> np.ndarray:
    """Nine-distance seed-to-face field using a geodesic backend object."""
    fields = geo.distances(mesh.faces[seed_face])
    return face_to_face_distance(mesh, seed_face, fields)


def grow_patch(mesh: TriMesh, seed_face: int, N: int, backend="heat", geo=None) -> np.ndarray:
    """Seed followed by the ``N - 1`` geodesically nearest faces.

    Ties are broken by face id. A component with fewer than ``N`` faces yields
    a shorter patch. ``geo`` may be a prebuilt backend to reuse factorisations.
    """
    geo = geo or make_backend(mesh, backend)
    d = seed_distances(mesh, seed_face, geo)
    ids = np.arange(mesh.n_faces)
    finite = np.isfinite(d)
    rank = d.copy()
    rank[seed_face] = -1.0
    order = np.lexsort((ids[finite], rank[finite]))
    return ids[finite][order][:N]


def _patch_dual_graph(mesh: TriMesh, face_ids) -> sparse.csr_matrix:
    face_ids = np.asarray(face_ids)
    local = {int(f): r for r, f in enumerate(face_ids)}
    cent = mesh.face_centroids[face_ids]
    rows, cols = [], []
    adj = mesh.face_adjacency
    for r, f in enumerate(face_ids):
        for g in adj[f]:
            c = local.get(int(g))
            if c is not None:
                rows.append(r)
                cols.append(c)
    rows, cols = np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64)
    w = np.linalg.norm(cent[rows] - cent[cols], axis=1) if len(rows) else np.zeros(0)
    # zero-length edges would be dropped by csgraph; keep them reachable
    w = np.maximum(w, 1e-300)
    n = len(face_ids)
    return sparse.coo_matrix((w, (rows, cols)), shape=(n, n)).tocsr()


def build_neighbor_index(mesh: TriMesh, face_ids, K: int) -> np.ndarray:
    """K nearest other patch faces per row, by patch-restricted dual-graph
    path length with centroid-distance edge weights.

    Ties go to the smaller row index. Faces not reachable inside the patch
    rank after all reachable ones, ordered by centroid distance. With fewer
    than ``K`` other faces the last neighbour is repeated.
    """
    face_ids = np.asarray(face_ids)
    N = len(face_ids)
    if N < 2:
        raise ValueError("neighbour index needs at least two patch faces")
    D = csgraph.dijkstra(_patch_dual_graph(mesh, face_ids), directed=False)
    unreached = ~np.isfinite(D)
    if unreached.any():
        cent = mesh.face_centroids[face_ids]
        E = np.linalg.norm(cent[:, None] - cent[None], axis=2)
        top = np.max(D[~unreached]) if (~unreached).any() else 0.0
        D[unreached] = 2.0 * top + 1.0 + E[unreached]
    np.fill_diagonal(D, np.inf)
    order = np.argsort(D, axis=1, kind="stable")[:, : min(K, N - 1)]
    if order.shape[1] < K:
        pad = np.repeat(order[:, -1:], K - order.shape[1], axis=1)
        order = np.concatenate([order, pad], axis=1)
    return order.astype(np.int64)


def extract_patch_pair(noisy: TriMesh, gt: TriMesh | None, seed_face: int, N: int, K: int,
                       backend="heat", geo=None) -> PatchSample:
    """Grow a patch on ``noisy`` and read both meshes' normals on the same faces.

    ``gt`` may be None at inference.
    """
    if gt is not None and not np.array_equal(noisy.faces, gt.faces):
        raise ValueError("noisy and ground-truth meshes have different connectivity")
    ids = grow_patch(noisy, seed_face, N, backend, geo)
    idx = build_neighbor_index(noisy, ids, K) if len(ids) >= 2 else np.zeros((1, K), np.int64)
    return PatchSample(
        seed_face=int(seed_face),
        face_ids=ids,
        normals=noisy.face_normals[ids].astype(np.float32),
        neighbor_index=idx,
        gt_normals=None if gt is None else gt.face_normals[ids].astype(np.float32),
    )


def extract_patches(noisy: TriMesh, gt: TriMesh, P: int, N: int, K: int, rng_seed,
                    backend="heat") -> list[PatchSample]:
    """Sample ``P`` variance-weighted seeds and extract a patch pair for each."""
    var = one_ring_normal_variance(noisy)
    seeds = sample_seed_faces(noisy, var, P, rng_seed)
    geo = make_backend(noisy, backend)
    return [extract_patch_pair(noisy, gt, s, N, K, backend, geo) for s in seeds]


def _rownorm(x):
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def augment_patch(sample: PatchSample, rng_seed, jitter_sigma: float = 0.01,
                  rotate: bool = True) -> PatchSample:
    """Random global rotation of both normal matrices, then Gaussian jitter
    on the noisy normals only (rows renormalised)."""
    rng = np.random.default_rng(rng_seed)
    n = sample.normals.astype(np.float64)
    g = None if sample.gt_normals is None else sample.gt_normals.astype(np.float64)
    if rotate:
        R = Rotation.random(random_state=rng).as_matrix()
        n = n @ R.T
        g = None if g is None else g @ R.T
    if jitter_sigma > 0:
        n = _rownorm(n + rng.normal(0.0, jitter_sigma, size=n.shape))
    return replace(sample,
                   normals=n.astype(np.float32),
                   gt_normals=None if g is None else g.astype(np.float32))


# -- serialisation -----------------------------------------------------------

_HEAD = struct.Struct("<8sIIIII")


def write_dataset(path, dataset: PatchDataset) -> None:
    """Little-endian binary file: header, records, trailing CRC32."""
    prov = dataset.provenance.encode("utf-8")
    parts = [_HEAD.pack(MAGIC, VERSION, dataset.N, dataset.K, len(dataset.samples), len(prov)),
             prov]
    for s in dataset.samples:
        if s.n != dataset.N or s.k != dataset.K:
            raise DatasetError(f"sample shape ({s.n}, {s.k}) does not match dataset "
                               f"({dataset.N}, {dataset.K})")
        s.validate()
        has_gt = s.gt_normals is not None
        parts.append(struct.pack("<IB", s.seed_face, int(has_gt)))
        parts.append(np.asarray(s.face_ids, dtype="<u4").tobytes())
        parts.append(np.asarray(s.normals, dtype="<f4").tobytes())
        parts.append(np.asarray(s.neighbor_index, dtype="<u4").tobytes())
        if has_gt:
            parts.append(np.asarray(s.gt_normals, dtype="<f4").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def read_dataset(path) -> PatchDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEAD.size + 4:
        raise DatasetError("file too short for a patch dataset")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    magic, version, N, K, count, plen = _HEAD.unpack_from(body)
    if magic != MAGIC:
        raise DatasetError("not a patch dataset (bad magic)")
    if zlib.crc32(body) != crc:
        raise DatasetError("checksum mismatch (corrupt or truncated file)")
    if version != VERSION:
        raise DatasetError(f"unsupported dataset version {version}")
    off = _HEAD.size
    prov = body[off:off + plen].decode("utf-8")
    off += plen
    buf = memoryview(body)

    def take(dtype, count_, shape):
        nonlocal off
        nbytes = np.dtype(dtype).itemsize * count_
        arr = np.frombuffer(buf[off:off + nbytes], dtype=dtype).reshape(shape)
        off += nbytes
        return arr

    samples = []
    for _ in range(count):
        seed, has_gt = struct.unpack_from("<IB", body, off)
        off += 5
        ids = take("<u4", N, (N,)).astype(np.int64)
        normals = take("<f4", 3 * N, (N, 3)).astype(np.float32)
        idx = take("<u4", N * K, (N, K)).astype(np.int64)
        gt = take("<f4", 3 * N, (N, 3)).astype(np.float32) if has_gt else None
        s = PatchSample(int(seed), ids, normals, idx, gt)
        s.validate()
        samples.append(s)
    if off != len(body):
        raise DatasetError("trailing bytes after last record")
    return PatchDataset(N=N, K=K, samples=samples, provenance=prov, version=version)
