"""Two-stage rigid registration of IOS crowns onto a CBCT half jaw.

Stage one is metadata scale alignment followed by RANSAC over FPFH
correspondences; stage two is point-to-plane ICP over a coarse-to-fine
schedule of voxel sizes.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .fpfh import compute_fpfh
from .mesh import MeshError, PointCloud, TriMesh, median_spacing, voxel_downsample
from .transform import SimilarityTransform, rotation_angle, rotation_from_vector

log = logging.getLogger(__name__)


class RegistrationError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class RegistrationConfig:
    voxel: float = 0.5
    radius_normal: float = 1.0
    radius_feature: float = 6.0
    distance_factor: float = 1.5  # RANSAC inlier distance = distance_factor * voxel
    edge_similarity: float = 0.9
    normal_angle_deg: float = 45.0
    max_iterations: int = 100_000
    confidence: float = 0.999
    batch: int = 2000
    min_fitness: float = 0.5
    verify: int = 10
    verify_iterations: int = 15
    verify_threshold: float = 0.25
    seed: int = 0
    icp_voxels: tuple = (2.0, 1.0, 0.25)
    icp_radius_factor: float = 2.0
    icp_max_iterations: int = 50
    icp_tolerance: float = 1e-7
    icp_robust: bool = True


@dataclass
class RegistrationReport:
    fitness: float
    inlier_rmse: float
    correspondence_count: int
    transform: SimilarityTransform = field(repr=False)
    success: bool = True
    stage: str = ""
    iterations: int = 0
    message: str = ""

    def to_json(self):
        return {
            "stage": self.stage,
            "success": bool(self.success),
            "fitness": float(self.fitness),
            "inlier_rmse": float(self.inlier_rmse),
            "correspondence_count": int(self.correspondence_count),
            "iterations": int(self.iterations),
            "transform": [[float(x) for x in row] for row in self.transform.matrix()],
            "message": self.message,
        }


def scale_align(obj, spacing):
    """Express a mesh or cloud in mm.

    Meshes whose ``units`` are ``"voxel"`` are multiplied componentwise by the
    CBCT ``spacing``; meshes already in mm (IOS scans) pass through. Point
    clouds carry no unit flag and are always scaled.
    """
    if spacing is None:
        raise RegistrationError("scale alignment needs the CBCT voxel spacing")
    s = np.asarray(spacing, dtype=np.float64)
    if s.shape != (3,) or np.any(s <= 0):
        raise RegistrationError(f"invalid spacing {spacing!r}")
    if isinstance(obj, TriMesh):
        if obj.units == "mm":
            return obj
        nrm = obj.normals / s
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        return TriMesh(obj.vertices * s, obj.faces, nrm, dict(obj.props), "mm")
    nrm = None
    if obj.normals is not None:
        nrm = obj.normals / s
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return PointCloud(obj.points * s, nrm, dict(obj.props))


def _as_cloud(x):
    return x.to_cloud() if isinstance(x, TriMesh) else x


def kabsch(src, dst, weights=None):
    """Least-squares rotation and translation with ``R src + t ~ dst``."""
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    cs = w @ src
    cd = w @ dst
    h = (src - cs).T @ ((dst - cd) * w[:, None])
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, cd - r @ cs


def _kabsch_batch(s, d):
    """Batched Kabsch for (B, 3, 3) triples."""
    cs = s.mean(axis=1, keepdims=True)
    cd = d.mean(axis=1, keepdims=True)
    h = np.einsum("bki,bkj->bij", s - cs, d - cd)
    u, _, vt = np.linalg.svd(h)
    det = np.linalg.det(np.einsum("bji,bkj->bik", vt, u))
    fix = np.ones((len(s), 3))
    fix[:, 2] = np.sign(det)
    r = np.einsum("bji,bj,bkj->bik", vt, fix, u)
    t = cd[:, 0] - np.einsum("bij,bj->bi", r, cs[:, 0])
    return r, t


def evaluate(src_pts, dst_tree, transform: SimilarityTransform, threshold):
    """Fitness, inlier RMSE and correspondence count of ``transform``."""
    d, idx = dst_tree.query(transform.apply(src_pts), distance_upper_bound=threshold)
    ok = np.isfinite(d)
    n = int(ok.sum())
    rmse = float(np.sqrt(np.mean(d[ok] ** 2))) if n else 0.0
    return n / max(len(src_pts), 1), rmse, n, idx, ok


def global_register(src, dst, cfg: RegistrationConfig | None = None):
    """RANSAC over 3-point FPFH correspondences with local verification.

    Both inputs are voxel-downsampled to ``cfg.voxel``. Hypotheses failing
    the edge-length or normal-agreement checks are discarded unscored; the
    rest are ranked by correspondence inliers and the best of each batch
    enter a pool scored by fitness. The ``cfg.verify`` best distinct pool
    entries are polished by a short point-to-plane ICP and the winner is the
    one with the highest fitness at ``cfg.verify_threshold`` against the
    full-resolution target, which separates near-symmetric poses that a
    loose threshold cannot. Returns ``(transform, report)``;
    ``report.success`` is False when the winner's fitness is below
    ``cfg.min_fitness``.
    """
    cfg = cfg or RegistrationConfig()
    src, dst = _as_cloud(src), _as_cloud(dst)
    s = voxel_downsample(src, cfg.voxel)
    d = voxel_downsample(dst, cfg.voxel)
    if len(s) < 10 or len(d) < 10:
        raise RegistrationError("too few points after downsampling")
    fs = compute_fpfh(s, cfg.radius_normal, cfg.radius_feature)
    fd = compute_fpfh(d, cfg.radius_normal, cfg.radius_feature)
    _, corr = cKDTree(fd).query(fs)
    cs, cd = s.points, d.points[corr]
    ns, nd = s.normals, d.normals[corr]
    n_corr = len(cs)
    thr = cfg.distance_factor * cfg.voxel
    d_tree = cKDTree(d.points)
    cos_normal = np.cos(np.deg2rad(cfg.normal_angle_deg))
    rng = np.random.default_rng(cfg.seed)

    pool = []  # (fitness, -rmse, order, transform)
    best_corr_inliers = 0
    needed = cfg.max_iterations
    done = 0
    while done < min(needed, cfg.max_iterations):
        b = min(cfg.batch, cfg.max_iterations - done)
        idx = rng.integers(0, n_corr, size=(b, 3))
        ps, pd = cs[idx], cd[idx]
        ok = (idx[:, 0] != idx[:, 1]) & (idx[:, 1] != idx[:, 2]) & (idx[:, 0] != idx[:, 2])
        for i, j in ((0, 1), (1, 2), (0, 2)):
            ls = np.linalg.norm(ps[:, i] - ps[:, j], axis=1)
            ld = np.linalg.norm(pd[:, i] - pd[:, j], axis=1)
            ok &= (ls > 0) & (ld > 0) & (np.minimum(ls, ld) >= cfg.edge_similarity * np.maximum(ls, ld))
        rs, ts = _kabsch_batch(ps, pd)
        if cos_normal > -1:
            rn = np.einsum("bij,bkj->bki", rs, ns[idx])
            ok &= np.all(np.einsum("bki,bki->bk", rn, nd[idx]) >= cos_normal, axis=1)
        hyp = np.flatnonzero(ok)
        if len(hyp):
            moved = np.einsum("bij,nj->bni", rs[hyp], cs) + ts[hyp, None, :]
            inl = (np.linalg.norm(moved - cd[None], axis=2) < thr).sum(axis=1)
            best_corr_inliers = max(best_corr_inliers, int(inl.max()))
            for h in hyp[np.argsort(-inl, kind="stable")[:8]]:
                tf = SimilarityTransform(1.0, rs[h], ts[h])
                fit, rmse, _, _, _ = evaluate(s.points, d_tree, tf, thr)
                pool.append((fit, -rmse, -(done + int(h)), tf))
            pool = sorted(pool, key=lambda e: e[:3], reverse=True)[:4 * cfg.verify]
        done += b
        needed = _ransac_budget(best_corr_inliers / n_corr, cfg.confidence, cfg.max_iterations)

    if not pool:
        report = RegistrationReport(0.0, 0.0, 0, SimilarityTransform.identity(), False, "global", done,
                                    "no hypothesis passed the correspondence checks")
        return report.transform, report

    centre = s.points.mean(axis=0)
    picked = []
    for entry in pool:
        if len(picked) == cfg.verify:
            break
        if all(max(np.array(entry[3].error_to(p[3], centre)) / (5.0, cfg.voxel)) > 1 for p in picked):
            picked.append(entry)
    dense = cKDTree(dst.points)
    local = dataclasses.replace(cfg, icp_max_iterations=cfg.verify_iterations)
    scored = []
    for rank, entry in enumerate(picked):
        try:
            tf, _ = multiscale_icp(s, d, entry[3], local, voxels=(None,), radius=thr)
        except RegistrationError:
            tf = entry[3]
        fit, rmse, _, _, _ = evaluate(s.points, dense, tf, cfg.verify_threshold)
        scored.append((fit, -rmse, -rank, tf))
    tf = max(scored, key=lambda e: e[:3])[3]
    fit, rmse, n, _, _ = evaluate(s.points, d_tree, tf, thr)
    success = fit >= cfg.min_fitness
    msg = "" if success else f"best fitness {fit:.3f} below min_fitness {cfg.min_fitness}"
    return tf, RegistrationReport(fit, rmse, n, tf, success, "global", done, msg)


def _ransac_budget(inlier_ratio, confidence, cap):
    """Iterations needed to draw one all-inlier triple with ``confidence``."""
    p_fail = 1.0 - inlier_ratio ** 3
    if p_fail <= 0:
        return 0
    if p_fail >= 1:
        return cap
    return min(cap, int(np.ceil(np.log(1.0 - confidence) / np.log(p_fail))))


def tukey_weights(r, c=4.685):
    """Tukey biweights with the scale taken from the median absolute residual."""
    sigma = 1.4826 * np.median(np.abs(r))
    if sigma <= 0:
        return np.ones_like(r)
    u = r / (c * sigma)
    return np.where(np.abs(u) < 1, (1 - u * u) ** 2, 0.0)


def point_to_plane_step(p, q, n, weights=None):
    """One Gauss-Newton step of ``sum(w ((R p + t - q) . n)^2)`` about R = I.

    Returns ``(R, t)`` to be applied on top of the current pose of ``p``.
    """
    a = np.hstack([np.cross(p, n), n])
    b = -np.einsum("ij,ij->i", p - q, n)
    w = np.ones(len(b)) if weights is None else weights
    ata = a.T @ (a * w[:, None])
    x = np.linalg.lstsq(ata, a.T @ (b * w), rcond=None)[0]
    return rotation_from_vector(x[:3]), x[3:]


def point_to_plane_residual(p, q, n):
    return float(np.sum(np.einsum("ij,ij->i", p - q, n) ** 2))


def _downsample(cloud, voxel):
    if voxel is None or voxel <= 0:
        return cloud
    return voxel_downsample(cloud, voxel)


def multiscale_icp(src, dst, init: SimilarityTransform | None = None, cfg: RegistrationConfig | None = None,
                   voxels=None, radius=None):
    """Point-to-plane ICP at each scale of ``voxels`` (coarse to fine).

    The correspondence radius at each scale is ``cfg.icp_radius_factor`` times
    its voxel size; a voxel of ``None`` or 0 uses the clouds as given, with
    ``radius`` (default twice the median point spacing) as the radius. Scale
    and the initial transform's scale are kept fixed. Raises
    :class:`RegistrationError` when a scale has no correspondences.
    """
    cfg = cfg or RegistrationConfig()
    voxels = tuple(cfg.icp_voxels if voxels is None else voxels)
    src, dst = _as_cloud(src), _as_cloud(dst)
    if dst.normals is None:
        raise MeshError("point-to-plane ICP needs target normals")
    tf = init or SimilarityTransform.identity()
    total = 0
    for voxel in voxels:
        s = _downsample(src, voxel)
        d = _downsample(dst, voxel)
        rad = cfg.icp_radius_factor * voxel if voxel else (radius or _fallback_radius(d))
        tree = cKDTree(d.points)
        prev = None
        for _ in range(cfg.icp_max_iterations):
            p = tf.apply(s.points)
            dist, nn = tree.query(p, distance_upper_bound=rad)
            ok = np.isfinite(dist)
            if not ok.any():
                raise RegistrationError(f"no correspondences within {rad:.3g} mm at voxel {voxel}")
            rmse = float(np.sqrt(np.mean(dist[ok] ** 2)))
            if prev is not None and abs(prev - rmse) < cfg.icp_tolerance:
                break
            prev = rmse
            q, nq = d.points[nn[ok]], d.normals[nn[ok]]
            w = tukey_weights(np.einsum("ij,ij->i", p[ok] - q, nq)) if cfg.icp_robust else None
            r, t = point_to_plane_step(p[ok], q, nq, w)
            tf = SimilarityTransform(1.0, r, t).compose(tf)
            total += 1
    fine = voxels[-1]
    s = _downsample(src, fine)
    d = _downsample(dst, fine)
    thr = cfg.icp_radius_factor * fine if fine else (radius or _fallback_radius(d))
    fit, rmse, n, _, _ = evaluate(s.points, cKDTree(d.points), tf, thr)
    return tf, RegistrationReport(fit, rmse, n, tf, n > 0, "icp", total)


def _fallback_radius(cloud):
    return 2.0 * median_spacing(cloud.points)


def register(src, dst, cfg: RegistrationConfig | None = None):
    """Global RANSAC alignment followed by multiscale ICP.

    Returns ``(transform, global_report, icp_report)``. Raises
    :class:`RegistrationError` (carrying the global report) when the global
    stage fails.
    """
    cfg = cfg or RegistrationConfig()
    tf0, rep0 = global_register(src, dst, cfg)
    if not rep0.success:
        raise RegistrationError(rep0.message or "global registration failed", rep0)
    tf, rep1 = multiscale_icp(src, dst, tf0, cfg)
    return tf, rep0, rep1


def config_dict(cfg: RegistrationConfig):
    d = asdict(cfg)
    d["icp_voxels"] = list(cfg.icp_voxels)
    return d


__all__ = [
    "RegistrationConfig", "RegistrationReport", "RegistrationError", "scale_align", "global_register",
    "multiscale_icp", "register", "kabsch", "point_to_plane_step", "point_to_plane_residual",
    "rotation_angle", "evaluate",
]
