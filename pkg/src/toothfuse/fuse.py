"""Crown replacement: swap the CBCT crown for the registered IOS crown.

Fusion happens on points. CBCT points close to the IOS crowns are dropped,
isolated leftovers are cleaned with DBSCAN, and the union of the IOS crown
and the CBCT residual is re-surfaced by ball pivoting and lightly smoothed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from sklearn.cluster import DBSCAN

from .bpa import ball_pivoting
from .mesh import PROV_CBCT, PROV_IOS, MeshError, PointCloud, TriMesh, concat_clouds, median_spacing
from .reconstruct import laplacian_smooth

log = logging.getLogger(__name__)


class FuseError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CrownRemoval:
    """Result of :func:`remove_cbct_crown`.

    ``kept`` holds the surviving CBCT points, ``distances`` their distance to
    the nearest IOS point (same order), ``cut`` the largest removed distance.
    """
    kept: PointCloud
    distances: np.ndarray
    removed: int
    fraction: float
    cut: float
    adaptive: bool

    def to_json(self):
        return {"removed": int(self.removed), "kept": len(self.kept), "fraction": float(self.fraction),
                "cut_mm": float(self.cut), "adaptive_valley": bool(self.adaptive)}


def valley_cut(distances, bin_width: float, ratio: float = 0.25, max_bins: int = 400):
    """Distance at the first histogram valley after the main mode, or None.

    The histogram has ``bin_width`` bins from 0 to the 99th percentile (at
    most ``max_bins`` of them) and is smoothed with a (1, 2, 1) kernel.
    Starting at the tallest bin, the walk moves right through local minima
    until one is at most ``ratio`` times the peak; the distribution counts
    as bimodal when such a minimum exists and at least 5% of the points lie
    beyond it. The cut is the right edge of the valley bin.
    """
    d = np.asarray(distances, dtype=np.float64)
    hi = float(np.quantile(d, 0.99)) if len(d) else 0.0
    if len(d) < 20 or hi <= 0 or bin_width <= 0:
        return None
    bins = int(min(max_bins, max(3, np.ceil(hi / bin_width))))
    h, edges = np.histogram(d, bins=bins, range=(0.0, hi))
    hs = np.convolve(np.pad(h.astype(np.float64), 1, mode="edge"), [0.25, 0.5, 0.25], mode="valid")
    p = int(np.argmax(hs))
    v = p
    while v + 1 < len(hs):
        if hs[v + 1] > hs[v] and hs[v] <= ratio * hs[p]:
            break
        v += 1
    if v + 1 >= len(hs):
        return None
    cut = float(edges[v + 1])
    if np.mean(d >= cut) < 0.05:
        return None
    return cut


def remove_cbct_crown(cbct: PointCloud, ios: PointCloud, removal_fraction: float | None = None,
                      default_fraction: float = 0.2) -> CrownRemoval:
    """Drop the CBCT points nearest to the IOS cloud.

    Points are ranked by distance to a KD-tree over the IOS points (ties by
    index) and the closest ``removal_fraction`` of them, rounded down, are
    removed. With ``removal_fraction=None`` the fraction comes from the
    histogram valley of the distances when they are bimodal, and is
    ``default_fraction`` otherwise. The valley histogram uses bins of a
    quarter of the IOS point spacing.
    """
    if len(cbct) == 0 or len(ios) == 0:
        raise FuseError("crown removal needs non-empty CBCT and IOS clouds")
    d, _ = cKDTree(ios.points).query(cbct.points)
    adaptive = False
    if removal_fraction is None:
        cut = valley_cut(d, 0.25 * median_spacing(ios.points)) if len(ios) > 1 else None
        if cut is not None:
            removal_fraction = float(np.mean(d < cut))
            adaptive = True
        else:
            removal_fraction = default_fraction
    if not 0 <= removal_fraction <= 1:
        raise FuseError("removal_fraction must lie in [0, 1]")
    n_remove = int(np.floor(removal_fraction * len(d) + 1e-9))
    order = np.lexsort((np.arange(len(d)), d))
    keep = np.sort(order[n_remove:])
    cut = float(d[order[n_remove - 1]]) if n_remove else 0.0
    return CrownRemoval(cbct.select(keep), d[keep], n_remove, removal_fraction, cut, adaptive)


@dataclass(frozen=True, eq=False)
class Cleanup:
    kept: PointCloud
    removed: int
    clusters: list = field(default_factory=list)  # surviving cluster sizes, largest first

    def to_json(self):
        return {"removed": int(self.removed), "clusters": [int(c) for c in self.clusters]}


def dbscan_cleanup(residual: PointCloud, eps: float | None = None, min_pts: int = 8,
                   min_cluster: int = 50) -> Cleanup:
    """Remove DBSCAN noise and clusters with fewer than ``min_cluster`` points.

    ``eps`` defaults to three times the median nearest-neighbour spacing.
    ``min_pts`` counts the point itself, as in the original algorithm.
    """
    n = len(residual)
    if n == 0:
        return Cleanup(residual, 0, [])
    if eps is None:
        eps = 3.0 * median_spacing(residual.points) if n > 1 else 1.0
    if eps <= 0 or min_pts < 1:
        raise FuseError("need eps > 0 and min_pts >= 1")
    lab = DBSCAN(eps=eps, min_samples=min_pts).fit(residual.points).labels_
    sizes = np.bincount(lab[lab >= 0]) if np.any(lab >= 0) else np.zeros(0, dtype=np.int64)
    good = (lab >= 0) & (sizes[np.maximum(lab, 0)] >= min_cluster) if len(sizes) else np.zeros(n, bool)
    kept_sizes = sorted((int(s) for s in sizes if s >= min_cluster), reverse=True)
    return Cleanup(residual.select(np.flatnonzero(good)), int(n - good.sum()), kept_sizes)


UNASSIGNED = -1


def inherit_labels(cbct: PointCloud, ios: PointCloud, key: str = "label", group: str = "component"):
    """FDI labels for CBCT points from the nearest labelled IOS point.

    When the CBCT cloud carries ``group`` ids (tooth components), every
    member of a component takes the component's majority vote; a tied vote
    leaves the component ``UNASSIGNED`` and logs a warning.
    """
    if key not in ios.props:
        return None
    _, nn = cKDTree(ios.points).query(cbct.points)
    lab = ios.props[key][nn]
    if group in cbct.props and len(lab):
        g = cbct.props[group]
        out = lab.copy()
        for c in np.unique(g):
            m = g == c
            vals, cnt = np.unique(lab[m], return_counts=True)
            if np.count_nonzero(cnt == cnt.max()) > 1:
                log.warning("component %s: tied label vote %s, left unassigned", c, vals[cnt == cnt.max()].tolist())
                out[m] = UNASSIGNED
            else:
                out[m] = vals[np.argmax(cnt)]
        lab = out
    return lab


def _check_degenerate(points):
    if len(points) < 4:
        raise FuseError("fused cloud has fewer than four points")
    q = points - points.mean(axis=0)
    sv = np.linalg.svd(q, compute_uv=False)
    if sv[-1] <= 1e-9 * max(sv[0], 1e-300):
        raise FuseError("fused cloud is coplanar")


def fuse_and_reconstruct(ios: PointCloud, cbct_residual: PointCloud, radius_factors=(1.0, 2.0, 4.0),
                         smooth_iterations: int = 2, smooth_step: float = 0.5) -> TriMesh:
    """Ball-pivot the union of the IOS and residual CBCT points into a mesh.

    Ball radii are ``radius_factors`` times the median point spacing of the
    union. Output vertices keep ``provenance`` (IOS or CBCT) and, when
    present, ``label``; points no ball reached are dropped.
    """
    if ios.normals is None or (len(cbct_residual) and cbct_residual.normals is None):
        raise FuseError("fusion needs oriented normals on both clouds")
    parts = []
    for cloud, prov in ((ios, PROV_IOS), (cbct_residual, PROV_CBCT)):
        props = {"provenance": np.full(len(cloud), prov)}
        if "label" in cloud.props:
            props["label"] = cloud.props["label"]
        parts.append(PointCloud(cloud.points, cloud.normals, props))
    fused = concat_clouds(parts)
    _check_degenerate(fused.points)
    rho = median_spacing(fused.points)
    faces = ball_pivoting(fused.points, fused.normals, [f * rho for f in radius_factors])
    if len(faces) == 0:
        raise FuseError("ball pivoting produced no faces")
    used = np.unique(faces)
    remap = -np.ones(len(fused), dtype=np.int64)
    remap[used] = np.arange(len(used))
    try:
        mesh = TriMesh(fused.points[used], remap[faces], fused.normals[used],
                       {k: v[used] for k, v in fused.props.items()})
    except MeshError as exc:
        raise FuseError(str(exc)) from exc
    if len(used) < len(fused):
        log.info("ball pivoting left %d of %d points unreferenced", len(fused) - len(used), len(fused))
    return laplacian_smooth(mesh, smooth_iterations, smooth_step)


def fuse_half_jaw(cbct: PointCloud, ios: PointCloud, reference: PointCloud | None = None,
                  removal_fraction: float | None = None, default_fraction: float = 0.2,
                  eps: float | None = None, min_pts: int = 8, min_cluster: int = 50,
                  radius_factors=(1.0, 2.0, 4.0), smooth_iterations: int = 2, smooth_step: float = 0.5):
    """Crown removal, cleanup, label inheritance and re-surfacing for one jaw.

    ``reference`` (default ``ios``) is the registered IOS geometry used for
    crown removal; passing both jaws' crowns also clears the opposing crown
    tips at contacts. Returns ``(mesh, stats)``; the mesh keeps only the
    ``provenance`` and ``label`` vertex properties.
    """
    rem = remove_cbct_crown(cbct, ios if reference is None else reference, removal_fraction, default_fraction)
    cl = dbscan_cleanup(rem.kept, eps, min_pts, min_cluster)
    residual = cl.kept
    labels = inherit_labels(residual, ios)
    if labels is not None:
        residual = PointCloud(residual.points, residual.normals, {**residual.props, "label": labels})
    fused = fuse_and_reconstruct(ios, residual, radius_factors, smooth_iterations, smooth_step)
    fused = TriMesh(fused.vertices, fused.faces, fused.normals,
                    {k: v for k, v in fused.props.items() if k in ("provenance", "label")})
    stats = {"removal": rem.to_json(), "cleanup": cl.to_json(), "vertices": fused.n_vertices,
             "faces": fused.n_faces, "boundary_edges": int(np.sum(fused.edge_face_counts() == 1))}
    return fused, stats
