"""Fast Point Feature Histograms (33 bins: 11 each for theta, alpha, phi)."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .mesh import MeshError, PointCloud, estimate_normals

N_BINS = 11
N_FEATURES = 3 * N_BINS


def pair_features(p1, n1, p2, n2):
    """Darboux-frame angles for point pairs (vectorised over rows).

    Returns ``(theta, alpha, phi, dist)``; the source of each pair is the
    point whose normal makes the smaller angle with the connecting line.
    """
    d = p2 - p1
    dist = np.linalg.norm(d, axis=1)
    safe = np.where(dist > 0, dist, 1.0)
    a1 = np.einsum("ij,ij->i", n1, d) / safe
    a2 = np.einsum("ij,ij->i", n2, d) / safe
    swap = np.arccos(np.clip(np.abs(a1), 0, 1)) > np.arccos(np.clip(np.abs(a2), 0, 1))
    u = np.where(swap[:, None], n2, n1)
    nt = np.where(swap[:, None], n1, n2)
    d = np.where(swap[:, None], -d, d)
    phi = np.where(swap, -a2, a1)
    v = np.cross(d, u)
    vn = np.linalg.norm(v, axis=1)
    ok = (dist > 0) & (vn > 0)
    v = v / np.where(vn > 0, vn, 1.0)[:, None]
    w = np.cross(u, v)
    alpha = np.einsum("ij,ij->i", v, nt)
    theta = np.arctan2(np.einsum("ij,ij->i", w, nt), np.einsum("ij,ij->i", u, nt))
    zero = ~ok
    theta[zero] = alpha[zero] = phi[zero] = 0.0
    return theta, alpha, phi, dist


def _bin(x, lo, hi):
    b = np.floor(N_BINS * (x - lo) / (hi - lo)).astype(np.int64)
    return np.clip(b, 0, N_BINS - 1)


def compute_fpfh(cloud: PointCloud, radius_normal: float, radius_feature: float,
                 max_nn: int | None = 100) -> np.ndarray:
    """(N, 33) FPFH descriptors.

    Simplified histograms (SPFH) are accumulated over the ``radius_feature``
    ball, each neighbour adding ``100/k`` to one bin of each 11-bin block.
    The FPFH of a point is its SPFH plus the inverse-distance weighted SPFH
    of its neighbours, each block rescaled to sum to 100. Normals are
    estimated from ``radius_normal`` balls when the cloud has none.
    """
    pts = cloud.points
    if len(pts) < 10:
        raise MeshError("FPFH needs at least 10 points")
    nrm = cloud.normals
    if nrm is None:
        nrm = estimate_normals(pts, radius_normal)
    tree = cKDTree(pts)
    pairs = tree.query_pairs(radius_feature, output_type="ndarray")
    i = np.concatenate([pairs[:, 0], pairs[:, 1]])
    j = np.concatenate([pairs[:, 1], pairs[:, 0]])
    if max_nn is not None:
        # keep the max_nn nearest neighbours of each point
        dd = np.linalg.norm(pts[i] - pts[j], axis=1)
        order = np.lexsort((j, dd, i))
        i, j = i[order], j[order]
        starts = np.searchsorted(i, i, side="left")
        keep = (np.arange(len(i)) - starts) < max_nn
        i, j = i[keep], j[keep]
    n = len(pts)
    k = np.bincount(i, minlength=n)
    if np.any(k == 0):
        raise MeshError(f"{int(np.sum(k == 0))} point(s) have no neighbour within radius_feature")

    theta, alpha, phi, dist = pair_features(pts[i], nrm[i], pts[j], nrm[j])
    incr = 100.0 / k[i]
    spfh = np.zeros(n * N_FEATURES)
    for b, (val, lo, hi) in enumerate(((theta, -np.pi, np.pi), (alpha, -1.0, 1.0), (phi, -1.0, 1.0))):
        spfh += np.bincount(i * N_FEATURES + b * N_BINS + _bin(val, lo, hi), weights=incr,
                            minlength=n * N_FEATURES)
    spfh = spfh.reshape(n, N_FEATURES)

    wgt = sp.csr_matrix((1.0 / dist, (i, j)), shape=(n, n))
    acc = np.asarray(wgt @ spfh)
    for b in range(3):
        blk = acc[:, b * N_BINS:(b + 1) * N_BINS]
        s = blk.sum(axis=1, keepdims=True)
        blk *= np.divide(100.0, s, out=np.zeros_like(s), where=s > 0)
    return acc + spfh
