import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toothfuse.mesh import (MeshError, PointCloud, TriMesh, icosphere, load_cloud, load_mesh, sample_surface,
                            save_ply, voxel_downsample)
from toothfuse.reconstruct import hlo_smooth, laplacian_smooth, marching_cubes
from toothfuse.volume import LabelVolume


def _grid(n=11, noise=0.0, seed=0):
    x, y = np.meshgrid(np.arange(n, dtype=float), np.arange(n, dtype=float), indexing="ij")
    z = np.random.default_rng(seed).normal(scale=noise, size=x.shape) if noise else np.zeros_like(x)
    v = np.c_[x.ravel(), y.ravel(), z.ravel()]
    f = []
    for i in range(n - 1):
        for j in range(n - 1):
            a, b, c, d = i * n + j, (i + 1) * n + j, (i + 1) * n + j + 1, i * n + j + 1
            f += [(a, b, c), (a, c, d)]
    return TriMesh(v, np.array(f))


def _sphere(n=64, r=8.0, spacing=0.25):
    g = np.indices((n, n, n)).astype(float) - (n - 1) / 2.0
    return LabelVolume((np.sqrt((g ** 2).sum(0)) <= r).astype(np.uint8), (spacing,) * 3)


def test_empty_volume_gives_empty_mesh():
    m = marching_cubes(LabelVolume(np.zeros((5, 5, 5)), (1, 1, 1)), 1)
    assert m.n_vertices == 0 and m.n_faces == 0


def test_single_voxel_sphere_topology():
    lab = np.zeros((5, 5, 5))
    lab[2, 2, 2] = 1
    m = marching_cubes(LabelVolume(lab, (1, 1, 1)), 1)
    assert m.euler_characteristic() == 2
    assert m.is_watertight()
    assert m.signed_volume() > 0


def test_boundary_voxel_still_closed():
    lab = np.zeros((4, 4, 4))
    lab[0, 0, 0] = 1
    assert marching_cubes(LabelVolume(lab, (1, 1, 1)), 1).is_watertight()


def test_sphere_area_within_five_percent():
    m = marching_cubes(_sphere(), 1)
    assert m.is_watertight()
    assert abs(m.area() / (4 * np.pi * 2.0 ** 2) - 1) < 0.05


def test_spacing_covariance():
    lab = _sphere(24, 6.0, 1.0).labels
    a = marching_cubes(LabelVolume(lab, (0.25, 0.25, 0.25)), 1)
    b = marching_cubes(LabelVolume(lab, (0.5, 0.5, 0.5)), 1)
    assert np.array_equal(a.faces, b.faces)
    assert np.allclose(b.vertices, 2 * a.vertices, rtol=0, atol=1e-12)


def test_voxel_units():
    lab = _sphere(24, 6.0, 1.0).labels
    a = marching_cubes(LabelVolume(lab, (0.25, 0.25, 0.5)), 1, units="voxel")
    b = marching_cubes(LabelVolume(lab, (0.25, 0.25, 0.5)), 1)
    assert a.units == "voxel"
    assert np.allclose(a.vertices * [0.25, 0.25, 0.5], b.vertices, atol=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=15, deadline=None)
def test_random_solids_watertight(seed):
    rng = np.random.default_rng(seed)
    lab = (rng.random((8, 8, 8)) < 0.4).astype(np.uint8)
    m = marching_cubes(LabelVolume(lab, (1, 1, 1)), 1)
    if m.n_faces:
        assert np.all(m.edge_face_counts() == 2)


def test_hlo_flat_patch_unchanged():
    m = _grid()
    out = hlo_smooth(m, 10)
    assert np.abs(out.vertices - m.vertices).max() < 1e-9


def test_hlo_reduces_noise():
    m = _grid(21, 0.1, 3)
    inner = (np.abs(m.vertices[:, 0] - 10) < 9) & (np.abs(m.vertices[:, 1] - 10) < 9)

    def rms(x):
        z = x.vertices[inner]
        a = np.c_[z[:, :2], np.ones(len(z))]
        coef, *_ = np.linalg.lstsq(a, z[:, 2], rcond=None)
        return np.sqrt(np.mean((z[:, 2] - a @ coef) ** 2))

    assert rms(hlo_smooth(m, 10)) <= 0.5 * rms(m)


def _wedge(n=9):
    # two planes meeting at a 90 degree crest along the y axis (x = 0)
    xs = np.arange(-(n // 2), n // 2 + 1, dtype=float)
    v, f = [], []
    idx = {}
    for i, x in enumerate(xs):
        for j, y in enumerate(xs):
            idx[i, j] = len(v)
            v.append((x, y, -abs(x)))
    for i in range(n - 1):
        for j in range(n - 1):
            a, b, c, d = idx[i, j], idx[i + 1, j], idx[i + 1, j + 1], idx[i, j + 1]
            f += [(a, b, c), (a, c, d)]
    return TriMesh(np.array(v), np.array(f)), xs


def test_hlo_preserves_crest():
    m, xs = _wedge()
    x = m.vertices[:, 0]
    crest = x == 0
    rng = np.random.default_rng(1)
    noise = rng.normal(scale=0.02, size=m.vertices.shape)
    noise[crest] = 0.0
    noisy = m.with_vertices(m.vertices + noise)
    out = hlo_smooth(noisy, 10, np.deg2rad(30))
    move = np.linalg.norm(out.vertices - noisy.vertices, axis=1)
    inside = (np.abs(x) < xs.max()) & (np.abs(m.vertices[:, 1]) < xs.max())
    interior = ~crest & inside
    assert move[crest].max() <= 0.1 * move[interior].mean()
    # plain umbrella smoothing flattens the same crest
    plain = laplacian_smooth(noisy, 10, 0.5)
    assert np.linalg.norm(plain.vertices - noisy.vertices, axis=1)[crest & inside].min() > move[interior].mean()


def test_hlo_keeps_connectivity():
    m = icosphere(2)
    out = hlo_smooth(m, 5)
    assert np.array_equal(out.faces, m.faces) and out.n_vertices == m.n_vertices


def test_hlo_rejects_non_manifold():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1.0]])
    f = np.array([[0, 1, 2], [1, 0, 3], [0, 1, 4]])
    with pytest.raises(MeshError):
        hlo_smooth(TriMesh(v, f), 1)


def test_laplacian_identity_and_centroid():
    m = icosphere(1)
    assert laplacian_smooth(m, 0) is m
    # hexagonal fan: centre vertex displaced returns to the ring centroid
    ang = np.arange(6) * np.pi / 3
    ring = np.c_[np.cos(ang), np.sin(ang), np.zeros(6)]
    v = np.vstack([[0.3, -0.2, 0.5], ring])
    f = np.array([[0, 1 + k, 1 + (k + 1) % 6] for k in range(6)])
    out = laplacian_smooth(TriMesh(v, f), 1, 1.0)
    assert np.allclose(out.vertices[0], ring.mean(axis=0), atol=1e-15)


def test_laplacian_volume_shrinkage():
    m = icosphere(3)
    out = laplacian_smooth(m, 5, 0.5)
    assert 1 - out.signed_volume() / m.signed_volume() < 0.15


@pytest.mark.parametrize("binary", [True, False])
def test_ply_round_trip(tmp_path, binary):
    m = icosphere(2).with_props(label=np.arange(162) % 7)
    save_ply(tmp_path / "m.ply", m, binary)
    r = load_mesh(tmp_path / "m.ply")
    assert np.array_equal(r.vertices, m.vertices)
    assert np.array_equal(r.faces, m.faces)
    assert np.array_equal(r.normals, m.normals)
    assert np.array_equal(r.props["label"], m.props["label"])
    c = PointCloud(m.vertices, m.normals)
    save_ply(tmp_path / "c.ply", c, binary)
    assert np.array_equal(load_cloud(tmp_path / "c.ply").points, c.points)


def test_mesh_validation():
    with pytest.raises(MeshError):
        TriMesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))
    with pytest.raises(MeshError):
        TriMesh(np.zeros((3, 3)), np.array([[0, 1, 1]]))


def test_normals_unit_and_outward():
    m = icosphere(2)
    assert np.allclose(np.linalg.norm(m.normals, axis=1), 1, atol=1e-6)
    assert np.all(np.einsum("ij,ij->i", m.normals, m.vertices) > 0)


def test_sampling_and_downsampling():
    m = icosphere(3)
    pts, fidx = sample_surface(m, 50, seed=0)
    assert len(pts) == len(fidx)
    assert np.allclose(np.linalg.norm(pts, axis=1), 1, atol=0.01)
    d = voxel_downsample(PointCloud(pts), 0.2)
    assert 0 < len(d) < len(pts)
    with pytest.raises(MeshError):
        voxel_downsample(PointCloud(pts), 0)
