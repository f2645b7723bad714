import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats
from scipy.sparse import csgraph

from dnfnet import shapes
from dnfnet.geodesics import make_backend
from dnfnet.mesh import TriMesh, one_ring_normal_variance
from dnfnet.noise import NoiseSpec, add_noise
from dnfnet.patching import (DatasetError, PatchDataset, PatchSample, _patch_dual_graph,
                             augment_patch, build_neighbor_index, extract_patch_pair,
                             extract_patches, grow_patch, read_dataset, sample_seed_faces,
                             seed_distances, write_dataset)


def _angles(a, b):
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    return np.arctan2(np.linalg.norm(np.cross(a, b), axis=1), np.sum(a * b, axis=1))


# -- seeds ------------------------------------------------------------------

def test_seed_sampling_distinct_and_deterministic():
    m = shapes.icosphere(2)
    var = one_ring_normal_variance(m)
    a = sample_seed_faces(m, var, 50, 7)
    assert len(set(a.tolist())) == 50
    assert np.array_equal(a, sample_seed_faces(m, var, 50, 7))


def test_seed_sampling_too_many():
    m = shapes.unit_cube()
    with pytest.raises(ValueError):
        sample_seed_faces(m, np.zeros(12), 13, 0)


def test_seed_sampling_frequencies_chi_square():
    m = shapes.unit_cube()
    var = np.ones(12)
    var[4] = 12.0
    trials = 10_000
    counts = np.bincount([sample_seed_faces(m, var, 1, s)[0] for s in range(trials)], minlength=12)
    w = var + 1e-6 * var.max()
    expected = trials * w / w.sum()
    assert stats.chisquare(counts, expected).pvalue > 0.01


def test_flat_plane_sampling_is_uniform():
    m = shapes.grid(4, 4)
    counts = np.bincount([sample_seed_faces(m, np.zeros(m.n_faces), 1, s)[0]
                          for s in range(5000)], minlength=m.n_faces)
    assert stats.chisquare(counts).pvalue > 0.01


# -- growth -----------------------------------------------------------------

@pytest.mark.parametrize("backend", ["heat", "dijkstra"])
def test_grow_all_and_single(backend):
    m = shapes.box_grid(2)
    full = grow_patch(m, 5, m.n_faces, backend)
    assert full[0] == 5 and sorted(full.tolist()) == list(range(m.n_faces))
    assert grow_patch(m, 5, 1, backend).tolist() == [5]


def test_grow_matches_brute_force_on_plane():
    m = shapes.grid(8, 8)
    seed = 45
    geo = make_backend(m, "heat")
    got = grow_patch(m, seed, 9, geo=geo)
    d = seed_distances(m, seed, geo)
    brute = sorted(range(m.n_faces), key=lambda f: (f != seed, d[f], f))[:9]
    assert got.tolist() == brute
    assert np.all(np.diff(d[got[1:]]) >= 0)


def test_grow_small_component():
    a = shapes.unit_cube()
    b = a.with_vertices(a.vertices + 5)
    m = TriMesh(np.vstack([a.vertices, b.vertices]), np.vstack([a.faces, a.faces + 8]))
    ids = grow_patch(m, 0, 20)
    assert len(ids) == 12 and ids.max() < 12


# -- neighbour index --------------------------------------------------------

def test_two_face_padding():
    m = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], [[0, 1, 2], [1, 3, 2]])
    assert build_neighbor_index(m, [0, 1], 3).tolist() == [[1, 1, 1], [0, 0, 0]]


def test_strip_hop_order():
    strip = shapes.grid(2, 6)
    ids = np.arange(strip.n_faces)
    idx = build_neighbor_index(strip, ids, 4)
    D = csgraph.dijkstra(_patch_dual_graph(strip, ids), directed=False)
    np.fill_diagonal(D, np.inf)
    brute = np.argsort(D, axis=1, kind="stable")[:, :4]
    assert np.array_equal(idx, brute)
    hops = csgraph.dijkstra(_patch_dual_graph(strip, ids) > 0, directed=False, unweighted=True)
    for r in range(len(ids)):
        assert np.all(np.diff(hops[r, idx[r]]) >= 0)


def test_neighbor_index_self_free_and_in_range():
    m = shapes.icosphere(2)
    ids = grow_patch(m, 0, 60)
    idx = build_neighbor_index(m, ids, 10)
    assert idx.shape == (60, 10)
    assert np.all((idx >= 0) & (idx < 60))
    assert not np.any(idx == np.arange(60)[:, None])


def test_neighbor_index_needs_two_faces():
    with pytest.raises(ValueError):
        build_neighbor_index(shapes.unit_cube(), [0], 3)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_neighbor_index_equivariance(seed):
    m = shapes.icosphere(1)
    rng = np.random.default_rng(seed)
    m = m.with_vertices(m.vertices + rng.normal(0, 0.01, m.vertices.shape))
    ids = grow_patch(m, int(rng.integers(m.n_faces)), 30, "dijkstra")
    perm = rng.permutation(30)
    a = build_neighbor_index(m, ids, 6)
    b = build_neighbor_index(m, ids[perm], 6)
    # distances are generically distinct, so tie-breaking never kicks in
    assert np.array_equal(perm[b], a[perm])


# -- pairs ------------------------------------------------------------------

def test_zero_noise_pair_identical():
    m = shapes.icosphere(2)
    s = extract_patch_pair(m, m, 3, 40, 8)
    assert np.abs(s.normals - s.gt_normals).max() <= 1e-6


def test_noisy_plane_gt_rows_are_plane_normal():
    clean = shapes.grid(10, 10)
    noisy = add_noise(clean, NoiseSpec("gaussian-iso", 0.2, rng_seed=1))
    s = extract_patch_pair(noisy, clean, 20, 30, 6)
    assert np.allclose(s.gt_normals, [0, 0, 1])


def test_noisy_cube_error_matches_full_mesh():
    clean = shapes.box_grid(4)
    noisy = add_noise(clean, NoiseSpec("gaussian-normal", 0.2, rng_seed=3))
    s = extract_patch_pair(noisy, clean, 0, 50, 8)
    full = _angles(noisy.face_normals, clean.face_normals)[s.face_ids]
    patch = _angles(s.normals, s.gt_normals)
    assert patch.mean() > 0
    assert np.allclose(patch, full, atol=1e-5)


def test_connectivity_mismatch():
    a = shapes.grid(4, 4)
    b = shapes.grid(4, 4, alternate=True)
    with pytest.raises(ValueError):
        extract_patch_pair(a, b, 0, 4, 2)


def test_extract_patches_distance_ordering():
    m = add_noise(shapes.icosphere(2), NoiseSpec("gaussian-normal", 0.2, rng_seed=2))
    geo = make_backend(m, "heat")
    for s in extract_patches(m, m, 4, 50, 8, rng_seed=0):
        d = seed_distances(m, s.seed_face, geo)[s.face_ids]
        assert d[0] == 0 and np.all(np.diff(d[1:]) >= 0)


# -- augmentation -----------------------------------------------------------

def _sample(rng, n=40):
    x = rng.normal(size=(n, 3))
    g = rng.normal(size=(n, 3))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    idx = np.zeros((n, 2), np.int64)
    idx[0] = 1
    return PatchSample(0, np.arange(n), x.astype(np.float32), idx, g.astype(np.float32))


def test_augment_identity():
    s = _sample(np.random.default_rng(0))
    out = augment_patch(s, 1, jitter_sigma=0.0, rotate=False)
    assert np.array_equal(out.normals, s.normals) and np.array_equal(out.gt_normals, s.gt_normals)


def test_rotation_preserves_row_angles():
    s = _sample(np.random.default_rng(0))
    out = augment_patch(s, 5, jitter_sigma=0.0)
    assert not np.allclose(out.normals, s.normals)
    assert np.allclose(_angles(out.normals, out.gt_normals), _angles(s.normals, s.gt_normals),
                       atol=1e-5)
    assert np.array_equal(out.neighbor_index, s.neighbor_index)


def test_jitter_monte_carlo():
    rng = np.random.default_rng(0)
    s = _sample(rng, 20_000)
    out = augment_patch(s, 9, jitter_sigma=0.01, rotate=False)
    mean = _angles(out.normals, s.normals).mean()
    # tangent component of an isotropic 3-D Gaussian: Rayleigh mean sigma * sqrt(pi/2)
    assert mean == pytest.approx(0.01 * np.sqrt(np.pi / 2), rel=0.03)
    assert np.array_equal(out.gt_normals, s.gt_normals)


# -- serialisation ----------------------------------------------------------

def _dataset():
    m = add_noise(shapes.icosphere(1), NoiseSpec("gaussian-normal", 0.2, rng_seed=2))
    samples = extract_patches(m, shapes.icosphere(1), 3, 20, 4, rng_seed=1)
    return PatchDataset(N=20, K=4, samples=samples, provenance='{"test": 1}')


def test_dataset_round_trip(tmp_path):
    ds = _dataset()
    p = tmp_path / "d.bin"
    write_dataset(p, ds)
    back = read_dataset(p)
    assert (back.N, back.K, len(back), back.provenance) == (20, 4, 3, ds.provenance)
    for a, b in zip(ds.samples, back.samples):
        assert a.seed_face == b.seed_face
        assert np.array_equal(a.face_ids, b.face_ids)
        assert np.array_equal(a.normals, b.normals)
        assert np.array_equal(a.neighbor_index, b.neighbor_index)
        assert np.array_equal(a.gt_normals, b.gt_normals)


def test_truncated_dataset(tmp_path):
    p = tmp_path / "d.bin"
    write_dataset(p, _dataset())
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(DatasetError):
        read_dataset(p)


def test_corrupted_dataset(tmp_path):
    p = tmp_path / "d.bin"
    write_dataset(p, _dataset())
    raw = bytearray(p.read_bytes())
    raw[100] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(DatasetError, match="checksum"):
        read_dataset(p)


def test_empty_dataset(tmp_path):
    p = tmp_path / "e.bin"
    write_dataset(p, PatchDataset(N=8, K=3, samples=[]))
    back = read_dataset(p)
    assert len(back) == 0 and back.N == 8


def test_write_rejects_bad_index(tmp_path):
    ds = _dataset()
    ds.samples[0].neighbor_index[0, 0] = 0
    with pytest.raises(DatasetError):
        write_dataset(tmp_path / "x.bin", ds)
