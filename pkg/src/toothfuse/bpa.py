"""Ball-pivoting surface reconstruction from an oriented point cloud.

A ball of radius ``rho`` is seeded on three points, then rolled around each
boundary edge of the growing front until it touches a new point. Larger
radii are processed in turn, re-activating the boundary left by the smaller
ball so holes and sparse regions are closed progressively.
"""
from __future__ import annotations

from collections import deque

import numpy as np
from scipy.spatial import cKDTree

from .mesh import MeshError

_EMPTY_TOL = 1e-7


def _circumcenters(p1, p2, p3):
    """Circumcentres and radii of triangles given as (M, 3) corner arrays."""
    u = p2 - p1
    w = p3 - p1
    n = np.cross(u, w)
    nn = np.einsum("ij,ij->i", n, n)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = p1 + (np.einsum("ij,ij->i", u, u)[:, None] * np.cross(w, n)
                  + np.einsum("ij,ij->i", w, w)[:, None] * np.cross(n, u)) / (2.0 * nn[:, None])
    return c, np.linalg.norm(c - p1, axis=1), n, nn


class BallPivoting:
    """Front-advancing mesher; call :meth:`run` once with all radii."""

    def __init__(self, points, normals):
        self.p = np.ascontiguousarray(points, dtype=np.float64)
        self.n = np.ascontiguousarray(normals, dtype=np.float64)
        if len(self.p) < 3:
            raise MeshError("ball pivoting needs at least three points")
        if self.n.shape != self.p.shape:
            raise MeshError("ball pivoting needs one normal per point")
        self.tree = cKDTree(self.p)
        self.used = np.zeros(len(self.p), dtype=bool)
        self.front_deg = np.zeros(len(self.p), dtype=np.int64)
        self.faces = []
        self.edge_faces = {}  # undirected edge -> incident face count
        self.front = {}  # directed edge (a, b) -> opposite vertex
        self.queue = deque()

    # -- geometry -----------------------------------------------------------
    def _ball(self, i, j, k, rho):
        """Centre of the ball through (i, j, k) on the side of the face normal
        of the ordered triangle, or None when the triangle is too large, its
        normal disagrees with the vertex normals, or the ball is not empty.
        """
        c, r, fn, nn = _circumcenters(self.p[[i]], self.p[[j]], self.p[[k]])
        if not nn[0] > 0 or r[0] > rho:
            return None
        fn = fn[0] / np.sqrt(nn[0])
        if np.any(self.n[[i, j, k]] @ fn <= 0):
            return None
        centre = c[0] + np.sqrt(max(rho * rho - r[0] * r[0], 0.0)) * fn
        if self._occupied(centre, rho, (i, j, k)):
            return None
        return centre

    def _occupied(self, centre, rho, skip):
        hits = self.tree.query_ball_point(centre, rho * (1.0 - _EMPTY_TOL))
        return any(h not in skip for h in hits)

    # -- topology -----------------------------------------------------------
    def _edge_ok(self, a, b):
        """Whether directed edge (a, b) may be added to a new face."""
        key = (a, b) if a < b else (b, a)
        cnt = self.edge_faces.get(key, 0)
        if cnt >= 2:
            return False
        if cnt == 1 and (b, a) not in self.front:
            # existing edge with the same orientation: adding would flip a face
            return False
        return True

    def _add_face(self, a, b, c):
        self.faces.append((a, b, c))
        for u, v, o in ((a, b, c), (b, c, a), (c, a, b)):
            key = (u, v) if u < v else (v, u)
            self.edge_faces[key] = self.edge_faces.get(key, 0) + 1
            if (v, u) in self.front:
                # glue onto the opposite front edge
                del self.front[v, u]
                self.front_deg[u] -= 1
                self.front_deg[v] -= 1
            else:
                self.front[u, v] = o
                self.front_deg[u] += 1
                self.front_deg[v] += 1
                self.queue.append((u, v))
            self.used[u] = True

    # -- seeding ------------------------------------------------------------
    def _seed(self, rho, start):
        for i in range(start, len(self.p)):
            if self.used[i]:
                continue
            nb = self.tree.query_ball_point(self.p[i], 2 * rho)
            nb = [j for j in nb if j != i and not self.used[j]]
            if len(nb) < 2:
                continue
            d = np.linalg.norm(self.p[nb] - self.p[i], axis=1)
            nb = [nb[t] for t in np.argsort(d, kind="stable")[:16]]
            for x in range(len(nb)):
                for y in range(x + 1, len(nb)):
                    j, k = nb[x], nb[y]
                    fn = np.cross(self.p[j] - self.p[i], self.p[k] - self.p[i])
                    if fn @ (self.n[i] + self.n[j] + self.n[k]) < 0:
                        j, k = k, j
                    if self._ball(i, j, k, rho) is not None:
                        self._add_face(i, j, k)
                        return i
        return None

    # -- pivoting -----------------------------------------------------------
    def _pivot(self, a, b, o, rho):
        """Roll the ball over edge (a, b) of face (a, b, o); return the first
        point hit, or None."""
        centre = self._centre_of(a, b, o, rho)
        if centre is None:
            return None
        pa, pb = self.p[a], self.p[b]
        m = 0.5 * (pa + pb)
        e = pb - pa
        e /= np.linalg.norm(e)
        cand = self.tree.query_ball_point(m, 2 * rho)
        cand = np.array([k for k in cand if k not in (a, b, o)], dtype=np.int64)
        if not len(cand):
            return None
        # new face is (b, a, k)
        c, r, fn, nn = _circumcenters(np.repeat(pb[None], len(cand), 0), np.repeat(pa[None], len(cand), 0),
                                      self.p[cand])
        ok = (nn > 0) & (r <= rho)
        if not ok.any():
            return None
        cand, c, r, fn, nn = cand[ok], c[ok], r[ok], fn[ok], nn[ok]
        fn = fn / np.sqrt(nn)[:, None]
        ctr = c + np.sqrt(np.maximum(rho * rho - r * r, 0.0))[:, None] * fn
        u = centre - m
        v = ctr - m
        ang = np.arctan2(np.cross(u, v) @ e, v @ u)
        ang = np.mod(ang, 2 * np.pi)
        for t in np.argsort(ang, kind="stable"):
            k = int(cand[t])
            if np.any(self.n[[a, b, k]] @ fn[t] <= 0):
                continue
            if self.used[k] and self.front_deg[k] == 0:
                continue
            if not (self._edge_ok(a, k) and self._edge_ok(k, b)):
                continue
            if self._occupied(ctr[t], rho, (a, b, k)):
                continue
            return k
        return None

    def _centre_of(self, a, b, o, rho):
        c, r, fn, nn = _circumcenters(self.p[[a]], self.p[[b]], self.p[[o]])
        if not nn[0] > 0 or r[0] > rho:
            return None
        fn = fn[0] / np.sqrt(nn[0])
        return c[0] + np.sqrt(max(rho * rho - r[0] * r[0], 0.0)) * fn

    def _expand(self, rho):
        while self.queue:
            a, b = self.queue.popleft()
            o = self.front.get((a, b))
            if o is None:
                continue
            k = self._pivot(a, b, o, rho)
            if k is None:
                continue  # boundary for this radius
            if (a, b) not in self.front:
                continue
            self._add_face(b, a, k)

    def run(self, radii):
        for rho in sorted(radii):
            if rho <= 0:
                raise MeshError("ball radii must be positive")
            self.queue = deque(sorted(self.front))
            self._expand(rho)
            start = 0
            while True:
                s = self._seed(rho, start)
                if s is None:
                    break
                start = s
                self._expand(rho)
        return np.array(self.faces, dtype=np.int64).reshape(-1, 3)


def ball_pivoting(points, normals, radii):
    """Faces (F, 3) of the ball-pivoting surface over ``points``.

    Face winding follows the supplied normals. Points never touched by a
    ball stay unreferenced.
    """
    return BallPivoting(points, normals).run(radii)
