"""Point curvature, erosion-expansion tooth separation and upper/lower jaw split."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .mesh import TriMesh

log = logging.getLogger(__name__)


class SegmentationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CurvatureField:
    values: np.ndarray  # radians, one per vertex
    order: int
    mesh: TriMesh


@dataclass(frozen=True, eq=False)
class ComponentLabeling:
    ids: np.ndarray  # per-vertex component id, 0..count-1
    count: int
    centers: np.ndarray  # (count, 3) gravity centres in mm
    sizes: np.ndarray

    def to_json(self):
        return {
            "count": int(self.count),
            "sizes": [int(s) for s in self.sizes],
            "gravity_centers": [[float(x) for x in c] for c in self.centers],
        }


def neighbourhood(mesh: TriMesh, order: int) -> sp.csr_matrix:
    """Vertices reachable in 1..order edge hops (the vertex itself excluded)."""
    if order < 1:
        raise ValueError("neighbour order must be >= 1")
    a = mesh.adjacency().astype(np.int32)
    reach = a.copy()
    step = a
    for _ in range(order - 1):
        step = (step @ a).astype(bool).astype(np.int32)
        reach = reach + step
    reach = reach.astype(bool).tolil()
    reach.setdiag(False)
    reach = reach.tocsr()
    reach.eliminate_zeros()
    return reach


def point_curvature(mesh: TriMesh, order: int = 1) -> CurvatureField:
    """Mean angle between a vertex normal and the normals of its ``order``-ring.

    The angle is evaluated as ``atan2(|n_v x n_u|, n_v . n_u)``, which equals
    the clamped arccos of the normalised dot product but stays accurate for
    nearly parallel normals.
    """
    n = mesh.normals
    ln = np.linalg.norm(n, axis=1)
    if np.any(ln == 0):
        raise SegmentationError("zero-length vertex normal")
    n = n / ln[:, None]
    nb = neighbourhood(mesh, order).tocoo()
    rows, cols = nb.row, nb.col
    cross = np.linalg.norm(np.cross(n[rows], n[cols]), axis=1)
    dot = np.einsum("ij,ij->i", n[rows], n[cols])
    ang = np.arctan2(cross, dot)
    cnt = np.bincount(rows, minlength=mesh.n_vertices)
    tot = np.bincount(rows, weights=ang, minlength=mesh.n_vertices)
    vals = np.divide(tot, cnt, out=np.zeros(mesh.n_vertices), where=cnt > 0)
    return CurvatureField(vals, order, mesh)


def _relabel(raw_ids, valid, n_vertices):
    """Compact ids in order of each component's lowest vertex index."""
    ids = -np.ones(n_vertices, dtype=np.int64)
    uniq, first = np.unique(raw_ids[valid], return_index=True)
    order = uniq[np.argsort(np.flatnonzero(valid)[first])]
    remap = {int(u): k for k, u in enumerate(order)}
    ids[valid] = [remap[int(r)] for r in raw_ids[valid]]
    return ids


def erosion_expansion_segment(mesh: TriMesh, percentile: float = 15.0, order: int = 2,
                              min_component: int = 30, curvature: CurvatureField | None = None
                              ) -> ComponentLabeling:
    """Split a surface at its highest-curvature vertices.

    Erosion drops the top ``percentile`` percent of vertices by point
    curvature (ties resolved by vertex index). The surviving vertex graph is
    split into connected components; components with fewer than
    ``min_component`` vertices count as debris. Expansion then hands every
    dropped or debris vertex to the component holding its Euclidean-nearest
    kept vertex, one KD-tree per component, equal distances going to the
    larger component.
    """
    nv = mesh.n_vertices
    if nv < 2:
        raise SegmentationError("mesh needs at least two vertices")
    if not 0 < percentile < 100:
        raise SegmentationError("percentile must lie in (0, 100)")
    c = (curvature or point_curvature(mesh, order)).values
    n_drop = int(np.floor(nv * percentile / 100.0))
    rank = np.lexsort((np.arange(nv), -c))  # highest curvature first, then lowest index
    kept = np.ones(nv, dtype=bool)
    kept[rank[:n_drop]] = False
    if not kept.any():
        raise SegmentationError("erosion removed every vertex")

    e = mesh.edges()
    e = e[kept[e[:, 0]] & kept[e[:, 1]]]
    g = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(nv, nv))
    _, raw = connected_components(g, directed=False)
    sizes = np.bincount(raw[kept], minlength=raw.max() + 1)
    big = kept & (sizes[raw] >= min_component)
    if not big.any():
        # everything is debris: keep the single largest piece
        largest = np.argmax(sizes)
        big = kept & (raw == largest)
        log.warning("all components below min_component=%d; keeping the largest", min_component)
    ids = _relabel(raw, big, nv)
    count = int(ids.max()) + 1

    comp_sizes = np.bincount(ids[big], minlength=count)
    todo = np.flatnonzero(~big)
    if len(todo):
        q = mesh.vertices[todo]
        dist = np.empty((len(todo), count))
        for k in range(count):
            dist[:, k], _ = cKDTree(mesh.vertices[ids == k]).query(q)
        # lexicographic: nearest first, then larger component, then lower id
        best = np.argmin(dist, axis=1)
        tied = np.flatnonzero((dist == dist.min(axis=1, keepdims=True)).sum(axis=1) > 1)
        for r in tied:
            cand = np.flatnonzero(dist[r] == dist[r].min())
            best[r] = cand[np.argmax(comp_sizes[cand])]
        ids[todo] = best

    sizes = np.bincount(ids, minlength=count)
    centers = np.stack([mesh.vertices[ids == k].mean(axis=0) for k in range(count)])
    return ComponentLabeling(ids, count, centers, sizes)


@dataclass(frozen=True, eq=False)
class JawSplit:
    upper: TriMesh
    lower: TriMesh
    jaw_of_component: np.ndarray  # 0 = upper, 1 = lower
    plane_normal: np.ndarray
    plane_offset: float
    margin: float
    vertex_jaw: np.ndarray
    bone_upper: TriMesh | None = None
    bone_lower: TriMesh | None = None

    def to_json(self):
        return {
            "jaw_of_component": [int(j) for j in self.jaw_of_component],
            "plane_normal": [float(x) for x in self.plane_normal],
            "plane_offset": float(self.plane_offset),
            "margin": float(self.margin),
        }


def _orient(normal):
    # deterministic sign: +z preferred, then +y, then +x
    for k in (2, 1, 0):
        if abs(normal[k]) > 1e-12:
            return normal if normal[k] > 0 else -normal
    return normal


def separating_plane(centers, iterations: int = 500, seed: int = 0):
    """RANSAC over centre pairs: the mid-plane of each sampled pair is scored
    by its margin, the smallest distance of any centre to the plane.

    Returns ``(normal, offset, margin)`` with the plane ``normal . x = offset``;
    the normal is oriented toward +z.
    """
    centers = np.asarray(centers, dtype=np.float64)
    k = len(centers)
    if k < 2:
        raise SegmentationError("need at least two tooth components to split jaws")
    rng = np.random.default_rng(seed)
    best = (-np.inf, None, None)
    for _ in range(iterations):
        i, j = rng.choice(k, size=2, replace=False)
        d = centers[j] - centers[i]
        ln = np.linalg.norm(d)
        if ln == 0:
            continue
        nrm = d / ln
        off = nrm @ (0.5 * (centers[i] + centers[j]))
        margin = np.min(np.abs(centers @ nrm - off))
        if margin > best[0]:
            best = (margin, nrm, off)
    margin, nrm, off = best
    if nrm is None or not margin > 0:
        raise SegmentationError("no separating plane with positive margin")
    o = _orient(nrm)
    if o is not nrm:
        off = -off
    return o, float(off), float(margin)


def split_jaws(labeling: ComponentLabeling, mesh: TriMesh, bone: TriMesh | None = None,
               iterations: int = 500, seed: int = 0):
    """Assign tooth components to the upper (+normal side) or lower jaw.

    Submeshes keep original coordinates. When ``bone`` is given, each bone
    vertex follows the jaw of its nearest tooth vertex.
    """
    nrm, off, margin = separating_plane(labeling.centers, iterations, seed)
    side = labeling.centers @ nrm - off
    jaw_of_comp = np.where(side > 0, 0, 1)
    vjaw = jaw_of_comp[labeling.ids]
    bone_parts = (None, None)
    if bone is not None and bone.n_vertices:
        _, nn = cKDTree(mesh.vertices).query(bone.vertices)
        bjaw = vjaw[nn]
        bone_parts = (bone.submesh(bjaw == 0), bone.submesh(bjaw == 1))
    return JawSplit(mesh.submesh(vjaw == 0), mesh.submesh(vjaw == 1), jaw_of_comp, nrm, off, margin,
                    vjaw, *bone_parts)
