import functools
import logging

import numpy as np
import pytest
from scipy.spatial import cKDTree

from toothfuse.config import PipelineConfig
from toothfuse.fuse import (UNASSIGNED, FuseError, dbscan_cleanup, fuse_and_reconstruct, fuse_half_jaw,
                            inherit_labels, remove_cbct_crown)
from toothfuse.mesh import PROV_CBCT, PROV_IOS, PointCloud, concat_clouds, icosphere, sample_surface
from toothfuse.metrics import surface_distances
from toothfuse.phantom import JAWS, generate_phantom
from toothfuse.pipeline import GroundTruth, _Run


def _cloud(pts, **props):
    pts = np.asarray(pts, dtype=float)
    nrm = np.tile([0, 0, 1.0], (len(pts), 1))
    return PointCloud(pts, nrm, {k: np.asarray(v) for k, v in props.items()})


@functools.lru_cache(maxsize=None)
def split_phantom():
    """Phantom 0 after reconstruction and jaw split, with the true registered crowns."""
    s = generate_phantom(0)
    run = _Run(s.volume, {j: s.gt_ios_mesh[j] for j in JAWS}, PipelineConfig(), None, GroundTruth.from_scene(s))
    for stage in ("reconstruct", "smooth", "curvseg", "split"):
        getattr(run, stage)()
    return s, run.state["cbct"]


def test_removal_zero_fraction_far_ios():
    rng = np.random.default_rng(0)
    cbct = _cloud(rng.normal(size=(50, 3)))
    ios = _cloud(rng.normal(size=(20, 3)) + 1000.0)
    r = remove_cbct_crown(cbct, ios, 0.0)
    assert r.removed == 0 and np.array_equal(r.kept.points, cbct.points)


def test_removal_hand_sorted():
    rng = np.random.default_rng(1)
    dist = rng.permutation(np.arange(1, 101, dtype=float))
    cbct = _cloud(np.c_[dist, np.zeros(100), np.zeros(100)])
    r = remove_cbct_crown(cbct, _cloud([[0, 0, 0]]), 0.25)
    assert r.removed == 25
    assert np.array_equal(np.sort(r.kept.points[:, 0]), np.arange(26, 101, dtype=float))
    assert r.cut == 25.0


def test_removal_nested_in_fraction():
    rng = np.random.default_rng(2)
    cbct = _cloud(rng.normal(size=(200, 3)))
    ios = _cloud(rng.normal(size=(30, 3)))
    kept = [set(map(tuple, remove_cbct_crown(cbct, ios, f).kept.points)) for f in (0, 0.1, 0.3, 0.6, 1.0)]
    assert all(b <= a for a, b in zip(kept, kept[1:]))
    assert len(kept[-1]) == 0


def test_removal_errors():
    with pytest.raises(FuseError):
        remove_cbct_crown(_cloud(np.zeros((0, 3))), _cloud([[0, 0, 0]]), 0.1)
    with pytest.raises(FuseError):
        remove_cbct_crown(_cloud([[1, 0, 0]]), _cloud([[0, 0, 0]]), 1.5)


def test_phantom_removal_clears_crown():
    scene, cbct = split_phantom()
    ref = concat_clouds([scene.crown_mesh(j).to_cloud() for j in JAWS])
    dense = cKDTree(np.vstack([sample_surface(scene.crown_mesh(j), 200, seed=0)[0] for j in JAWS]))
    for jaw in JAWS:
        kept = remove_cbct_crown(cbct[jaw].to_cloud(), ref).kept
        d, _ = dense.query(kept.points)
        assert d.min() > 0.5 * scene.volume.spacing[0]


def _blob(rng, n=300):
    return rng.uniform(0, 3, size=(n, 3))


def test_dbscan_blob_intact():
    pts = _blob(np.random.default_rng(3))
    out = dbscan_cleanup(_cloud(pts), eps=0.8, min_pts=5, min_cluster=10)
    assert out.removed == 0 and len(out.kept) == len(pts)


def test_dbscan_stragglers_removed():
    rng = np.random.default_rng(4)
    blob = _blob(rng)
    strays = np.array([[20, 0, 0], [0, 20, 0], [0, 0, 20], [-20, 0, 0], [20, 20, 20.0]])
    pts = np.r_[blob, strays]
    out = dbscan_cleanup(_cloud(pts), eps=0.8, min_pts=5, min_cluster=1)
    # brute-force oracle: a straggler has no other point within eps, so it is not core and no core reaches it
    d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    isolated = (d <= 0.8).sum(axis=1) == 1
    assert isolated.sum() == 5 and out.removed == 5
    assert np.array_equal(out.kept.points, pts[~isolated])


def test_dbscan_min_pts_one_keeps_all():
    pts = np.random.default_rng(5).normal(size=(40, 3)) * 50
    out = dbscan_cleanup(_cloud(pts), eps=0.01, min_pts=1, min_cluster=1)
    assert out.removed == 0
    with pytest.raises(FuseError):
        dbscan_cleanup(_cloud(pts), eps=0, min_pts=1)


def test_dbscan_small_clusters_dropped():
    rng = np.random.default_rng(6)
    pts = np.r_[_blob(rng), _blob(rng, 20) + 50]
    out = dbscan_cleanup(_cloud(pts), eps=0.8, min_pts=3, min_cluster=50)
    assert out.removed == 20 and out.clusters == [300]


def test_ios_only_fuse():
    m = icosphere(3)
    pts = m.vertices * 5.0
    ios = PointCloud(pts, m.normals)
    out = fuse_and_reconstruct(ios, PointCloud(np.zeros((0, 3)), np.zeros((0, 3))))
    spacing = float(np.median(cKDTree(pts).query(pts, k=2)[0][:, 1]))
    assert surface_distances(out.vertices, pts).chamfer <= 2 * spacing
    assert np.all(out.props["provenance"] == PROV_IOS)
    assert np.sum(out.edge_face_counts() == 1) == 0


def test_fuse_needs_normals():
    with pytest.raises(FuseError):
        fuse_and_reconstruct(PointCloud(np.random.default_rng(0).normal(size=(30, 3))), _cloud(np.zeros((0, 3))))


def test_degenerate_cloud_rejected():
    x, y = np.meshgrid(np.arange(6.0), np.arange(6.0))
    with pytest.raises(FuseError):
        fuse_and_reconstruct(_cloud(np.c_[x.ravel(), y.ravel(), np.zeros(36)]), _cloud(np.zeros((0, 3))))


def test_inherit_labels_majority_and_tie(caplog):
    ios = _cloud([[0, 0, 0], [10, 0, 0]], label=[11, 12])
    cbct = _cloud([[1, 0, 0], [2, 0, 0], [9, 0, 0], [1, 1, 0], [9, 1, 0]], component=[0, 0, 0, 1, 1])
    with caplog.at_level(logging.WARNING):
        lab = inherit_labels(cbct, ios)
    assert lab.tolist() == [11, 11, 11, UNASSIGNED, UNASSIGNED]
    assert "tie" in caplog.text.lower()
    assert inherit_labels(cbct, _cloud([[0, 0, 0]])) is None


def test_phantom_fuse_half_jaw():
    scene, cbct = split_phantom()
    ref = concat_clouds([scene.crown_mesh(j).to_cloud() for j in JAWS])
    ios = scene.crown_mesh("upper").to_cloud()
    raw, _ = fuse_half_jaw(cbct["upper"].to_cloud(), ios, ref, smooth_iterations=0)
    # every IOS point survives into the fused surface
    d, _ = cKDTree(raw.vertices).query(ios.points)
    assert d.max() == 0.0
    assert np.sum(raw.props["provenance"] == PROV_IOS) == len(ios)
    mesh, stats = fuse_half_jaw(cbct["upper"].to_cloud(), ios, ref)
    assert np.array_equal(mesh.props["provenance"], raw.props["provenance"])
    # crown region (within the removal cut of the IOS crown) carries only IOS vertices
    cbct_v = mesh.vertices[mesh.props["provenance"] == PROV_CBCT]
    dc, _ = cKDTree(ios.points).query(cbct_v)
    assert dc.min() > 0.5 * scene.volume.spacing[0]
    assert set(mesh.props) == {"provenance", "label"}
    assert stats["vertices"] == mesh.n_vertices
