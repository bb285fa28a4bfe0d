"""Overlap scores, surface distances and their report emitters.

Every KD-tree based routine has a brute-force twin (``*_bruteforce``) used
as a test oracle on small inputs.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .mesh import PointCloud, TriMesh, sample_surface


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# overlap

def _ratio(num, den, empty):
    return float(num / den) if den else empty


@dataclass
class ClassScores:
    dice: float
    iou: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int


def class_scores(pred: np.ndarray, gt: np.ndarray) -> ClassScores:
    """Binary scores from boolean masks.

    Empty denominators follow the "nothing to find, nothing found" rule:
    a ratio is 1 when both masks are empty and 0 otherwise.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    both_empty = 1.0 if tp + fp + fn == 0 else 0.0
    return ClassScores(
        dice=_ratio(2 * tp, 2 * tp + fp + fn, both_empty),
        iou=_ratio(tp, tp + fp + fn, both_empty),
        precision=_ratio(tp, tp + fp, both_empty),
        recall=_ratio(tp, tp + fn, both_empty),
        tp=tp, fp=fp, fn=fn,
    )


@dataclass
class OverlapScores:
    """Headline scores are macro means over the classes present in ``gt``."""
    dice: float
    iou: float
    precision: float
    recall: float
    miou: float
    accuracy: float
    per_class: dict = field(default_factory=dict)

    def to_json(self):
        d = asdict(self)
        d["per_class"] = {str(k): asdict(v) for k, v in self.per_class.items()}
        return d


def overlap_scores(pred, gt, ignore=None) -> OverlapScores:
    """Dice, IoU, precision, recall and mIoU of two label arrays.

    Boolean inputs are scored as a single foreground class. Integer inputs
    are scored per label; labels equal to ``ignore`` in ``gt`` are skipped
    everywhere, and means run over the labels present in ``gt``.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.dtype == bool and gt.dtype == bool:
        c = class_scores(pred, gt)
        acc = float(np.mean(pred == gt)) if pred.size else 1.0
        return OverlapScores(c.dice, c.iou, c.precision, c.recall, c.iou, acc, {1: c})
    keep = np.ones(gt.shape, dtype=bool) if ignore is None else gt != ignore
    p, g = pred[keep], gt[keep]
    labels = sorted(set(np.unique(g).tolist()) | set(np.unique(p).tolist()))
    per = {int(k): class_scores(p == k, g == k) for k in labels}
    present = [int(k) for k in np.unique(g)]
    if not present:
        return OverlapScores(1.0, 1.0, 1.0, 1.0, 1.0, 1.0, per)
    mean = {f: float(np.mean([getattr(per[k], f) for k in present])) for f in ("dice", "iou", "precision", "recall")}
    acc = float(np.mean(p == g))
    return OverlapScores(mean["dice"], mean["iou"], mean["precision"], mean["recall"], mean["iou"], acc, per)


def overlap_scores_bruteforce(pred, gt):
    """Loop-based binary oracle: ``(dice, iou, precision, recall)``."""
    tp = fp = fn = 0
    for a, b in zip(np.ravel(pred), np.ravel(gt)):
        tp += bool(a) and bool(b)
        fp += bool(a) and not bool(b)
        fn += bool(b) and not bool(a)
    empty = 1.0 if tp + fp + fn == 0 else 0.0
    dice = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else empty
    iou = tp / (tp + fp + fn) if tp + fp + fn else empty
    prec = tp / (tp + fp) if tp + fp else empty
    rec = tp / (tp + fn) if tp + fn else empty
    return dice, iou, prec, rec


def face_labels(mesh: TriMesh, vertex_labels) -> np.ndarray:
    """Per-face majority of the three vertex labels (ties go to the smallest)."""
    lab = np.asarray(vertex_labels)[mesh.faces]
    a, b, c = lab[:, 0], lab[:, 1], lab[:, 2]
    out = np.minimum(np.minimum(a, b), c)
    out = np.where(a == b, a, out)
    out = np.where(b == c, b, out)
    out = np.where(a == c, a, out)
    return out


def face_accuracy(pred_faces, gt_faces) -> float:
    pred_faces = np.asarray(pred_faces)
    gt_faces = np.asarray(gt_faces)
    if pred_faces.shape != gt_faces.shape:
        raise MetricError("face label arrays differ in shape")
    return float(np.mean(pred_faces == gt_faces)) if pred_faces.size else 1.0


# ---------------------------------------------------------------------------
# surface distances

@dataclass
class SurfaceDistances:
    assd: float
    chamfer: float
    hausdorff: float

    def to_json(self):
        return {"assd": float(self.assd), "chamfer": float(self.chamfer), "hausdorff": float(self.hausdorff)}


def _pts(x):
    if isinstance(x, PointCloud):
        return x.points
    if isinstance(x, TriMesh):
        return x.vertices
    return np.asarray(x, dtype=np.float64).reshape(-1, 3)


def _combine(dab, dba):
    assd = (dab.sum() + dba.sum()) / (len(dab) + len(dba))
    cd = 0.5 * (dab.mean() + dba.mean())
    hd = max(dab.max(), dba.max())
    return SurfaceDistances(float(assd), float(cd), float(hd))


def surface_distances(a, b) -> SurfaceDistances:
    """ASSD, Chamfer distance and Hausdorff distance between point sets (mm).

    ``d(x, B)`` is the Euclidean distance to the nearest point of ``B``;
    ASSD averages over the union of both directions, CD averages the two
    directional means, HD takes the larger directional maximum.
    """
    pa, pb = _pts(a), _pts(b)
    if len(pa) == 0 or len(pb) == 0:
        raise MetricError("surface distances need two non-empty point sets")
    dab, _ = cKDTree(pb).query(pa)
    dba, _ = cKDTree(pa).query(pb)
    return _combine(dab, dba)


def surface_distances_bruteforce(a, b) -> SurfaceDistances:
    """O(N*M) oracle for :func:`surface_distances`."""
    pa, pb = _pts(a), _pts(b)
    if len(pa) == 0 or len(pb) == 0:
        raise MetricError("surface distances need two non-empty point sets")
    dab = np.array([min(np.sqrt(((p - q) ** 2).sum()) for q in pb) for p in pa])
    dba = np.array([min(np.sqrt(((q - p) ** 2).sum()) for p in pa) for q in pb])
    return _combine(dab, dba)


def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles (a, b, c) to points ``p``, all (M, 3)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def put(mask, val):
        m = mask & ~done
        out[m] = val[m] if val.ndim == 2 else val
        done[m] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        put((d1 <= 0) & (d2 <= 0), a)
        put((d3 >= 0) & (d4 <= d3), b)
        put((d6 >= 0) & (d5 <= d6), c)
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b))
        den = 1.0 / (va + vb + vc)
        v = vb * den
        w = vc * den
        put(np.ones(len(p), dtype=bool), a + v[:, None] * ab + w[:, None] * ac)
    return out


def point_to_mesh_distance(points, mesh: TriMesh, k: int = 16) -> np.ndarray:
    """Exact distance from each point to the nearest triangle of ``mesh``.

    Candidate faces come from a KD-tree over face centroids; a point whose
    ``k`` nearest centroids cannot rule out a farther face is re-queried
    with a ball large enough to be conclusive.
    """
    points = _pts(points)
    if mesh.n_faces == 0:
        raise MetricError("mesh has no faces")
    tri = mesh.vertices[mesh.faces]
    cen = tri.mean(axis=1)
    rad = np.linalg.norm(tri - cen[:, None], axis=2).max(axis=1)
    r_max = float(rad.max())
    tree = cKDTree(cen)
    k = min(k, mesh.n_faces)
    dc, fi = tree.query(points, k=k)
    dc = dc.reshape(len(points), k)
    fi = fi.reshape(len(points), k)
    q = np.repeat(points, k, axis=0)
    f = fi.ravel()
    cp = closest_point_on_triangles(q, tri[f, 0], tri[f, 1], tri[f, 2])
    d = np.linalg.norm(cp - q, axis=1).reshape(len(points), k).min(axis=1)
    # a face not among the k candidates has centroid distance >= dc[:, -1]
    # and therefore surface distance >= dc[:, -1] - r_max
    unsure = np.flatnonzero((dc[:, -1] - r_max < d) & (k < mesh.n_faces))
    for i in unsure:
        cand = np.asarray(tree.query_ball_point(points[i], d[i] + r_max), dtype=np.int64)
        qq = np.repeat(points[i][None], len(cand), axis=0)
        cp = closest_point_on_triangles(qq, tri[cand, 0], tri[cand, 1], tri[cand, 2])
        d[i] = min(d[i], np.linalg.norm(cp - qq, axis=1).min())
    return d


def point_to_mesh_distance_bruteforce(points, mesh: TriMesh) -> np.ndarray:
    points = _pts(points)
    tri = mesh.vertices[mesh.faces]
    out = np.empty(len(points))
    for i, p in enumerate(points):
        q = np.repeat(p[None], len(tri), axis=0)
        cp = closest_point_on_triangles(q, tri[:, 0], tri[:, 1], tri[:, 2])
        out[i] = np.linalg.norm(cp - q, axis=1).min()
    return out


def mesh_distances(a: TriMesh, b: TriMesh, mode: str = "sample", density: float = 10.0,
                   seed: int = 0) -> SurfaceDistances:
    """Surface distances between two meshes.

    ``mode="sample"`` samples both surfaces at ``density`` points per mm^2
    (plus their vertices) and compares the point sets. ``mode="triangle"``
    measures the same samples against the other mesh's triangles exactly.
    Both meshes are sampled with the same ``seed``, so identical meshes give
    zero distances.
    """
    if a.n_faces == 0 or b.n_faces == 0:
        raise MetricError("mesh distances need two meshes with faces")
    sa, _ = sample_surface(a, density, seed)
    sb, _ = sample_surface(b, density, seed)
    sa = np.concatenate([a.vertices, sa])
    sb = np.concatenate([b.vertices, sb])
    if mode == "sample":
        return surface_distances(sa, sb)
    if mode == "triangle":
        return _combine(point_to_mesh_distance(sa, b), point_to_mesh_distance(sb, a))
    raise MetricError(f"unknown distance mode {mode!r}")


# ---------------------------------------------------------------------------
# emitters

OVERLAP_COLUMNS = ("case", "Dice", "IoU", "Recall", "Precision")
DISTANCE_COLUMNS = ("case", "ASSD", "CD", "HD")


def overlap_row(case, s: OverlapScores):
    return {"case": case, "Dice": s.dice, "IoU": s.iou, "Recall": s.recall, "Precision": s.precision}


def distance_row(case, s: SurfaceDistances):
    return {"case": case, "ASSD": s.assd, "CD": s.chamfer, "HD": s.hausdorff}


def to_csv(rows, columns, path=None, digits: int = 4) -> str:
    """CSV with the given column order, floats rounded to ``digits``; a
    final ``mean`` row is appended when there is more than one case."""
    rows = list(rows)
    if len(rows) > 1:
        rows.append({"case": "mean", **{c: float(np.mean([r[c] for r in rows])) for c in columns[1:]}})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([r[c] if c == "case" else f"{r[c]:.{digits}f}" for c in columns])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def to_json(obj, path=None) -> str:
    def conv(x):
        if hasattr(x, "to_json"):
            return x.to_json()
        if isinstance(x, np.generic):
            return x.item()
        raise TypeError(f"not serialisable: {type(x).__name__}")
    text = json.dumps(obj, default=conv, indent=2, sort_keys=True) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
