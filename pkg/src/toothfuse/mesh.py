"""Triangle meshes, oriented point clouds and PLY I/O.

Per-vertex integer properties (``label``, ``component``, ``provenance`` ...)
travel in ``props`` and are written as ``int`` vertex properties in PLY.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree


# values of the per-vertex ``provenance`` property
PROV_IOS, PROV_CBCT = 0, 1


class MeshError(ValueError):
    pass


def _as_props(props, n):
    out = {}
    for k, v in (props or {}).items():
        arr = np.asarray(v, dtype=np.int64)
        if arr.shape != (n,):
            raise MeshError(f"property {k!r} has shape {arr.shape}, expected ({n},)")
        out[k] = arr
    return out


def face_normals(vertices, faces, normalize=True):
    v = vertices[faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    if normalize:
        ln = np.linalg.norm(n, axis=1, keepdims=True)
        n = np.divide(n, ln, out=np.zeros_like(n), where=ln > 0)
    return n


def vertex_normals(vertices, faces):
    """Area-weighted average of incident face normals, unit length."""
    fn = face_normals(vertices, faces, normalize=False)
    vn = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(vn, faces[:, k], fn)
    ln = np.linalg.norm(vn, axis=1, keepdims=True)
    return np.divide(vn, ln, out=np.zeros_like(vn), where=ln > 0)


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Indexed triangle surface with unit vertex normals.

    ``units`` is ``"mm"`` or ``"voxel"``; marching cubes can emit either and
    :func:`toothfuse.register.scale_align` converts.
    """

    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = None
    props: dict = field(default_factory=dict)
    units: str = "mm"

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError("face index out of range")
        if len(f) and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise MeshError("degenerate face with repeated vertex index")
        if self.normals is None:
            n = vertex_normals(v, f) if len(f) else np.zeros_like(v)
        else:
            n = np.ascontiguousarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if n.shape != v.shape:
                raise MeshError("normals shape does not match vertices")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "normals", n)
        object.__setattr__(self, "props", _as_props(self.props, len(v)))

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def is_empty(self):
        return len(self.vertices) == 0

    def with_vertices(self, vertices, recompute_normals=True):
        return replace(self, vertices=vertices, normals=None if recompute_normals else self.normals)

    def with_props(self, **props):
        merged = dict(self.props)
        merged.update(props)
        return replace(self, props=merged)

    def edges(self):
        """Unique undirected edges as sorted (i, j) pairs."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def edge_face_counts(self):
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    def is_watertight(self):
        return self.n_faces > 0 and bool(np.all(self.edge_face_counts() == 2))

    def euler_characteristic(self):
        return self.n_vertices - len(self.edges()) + self.n_faces

    def adjacency(self):
        """Symmetric vertex adjacency (CSR, boolean)."""
        e = self.edges()
        n = self.n_vertices
        a = sp.coo_matrix((np.ones(len(e), dtype=bool), (e[:, 0], e[:, 1])), shape=(n, n))
        return (a + a.T).tocsr()

    def face_areas(self):
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def area(self):
        return float(self.face_areas().sum())

    def signed_volume(self):
        v = self.vertices[self.faces]
        return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)

    def submesh(self, vertex_mask):
        """Keep faces whose three vertices are all selected; drop unused vertices."""
        vertex_mask = np.asarray(vertex_mask, dtype=bool)
        fmask = vertex_mask[self.faces].all(axis=1)
        faces = self.faces[fmask]
        keep = np.zeros(self.n_vertices, dtype=bool)
        keep[faces.ravel()] = True
        # isolated selected vertices are kept too, so props stay aligned with the mask
        keep |= vertex_mask
        remap = -np.ones(self.n_vertices, dtype=np.int64)
        remap[keep] = np.arange(keep.sum())
        return TriMesh(
            self.vertices[keep],
            remap[faces],
            self.normals[keep],
            {k: v[keep] for k, v in self.props.items()},
            self.units,
        )

    def to_cloud(self):
        return PointCloud(self.vertices, self.normals, dict(self.props))


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    props: dict = field(default_factory=dict)

    def __post_init__(self):
        p = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", p)
        if self.normals is not None:
            n = np.ascontiguousarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if n.shape != p.shape:
                raise MeshError("normals shape does not match points")
            object.__setattr__(self, "normals", n)
        object.__setattr__(self, "props", _as_props(self.props, len(p)))

    def __len__(self):
        return len(self.points)

    def select(self, mask_or_index):
        idx = np.asarray(mask_or_index)
        return PointCloud(
            self.points[idx],
            None if self.normals is None else self.normals[idx],
            {k: v[idx] for k, v in self.props.items()},
        )

    def transformed(self, transform):
        return PointCloud(
            transform.apply(self.points),
            None if self.normals is None else transform.apply_normals(self.normals),
            dict(self.props),
        )


def concat_clouds(clouds):
    clouds = [c for c in clouds if len(c)]
    if not clouds:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    pts = np.concatenate([c.points for c in clouds])
    nrm = None
    if all(c.normals is not None for c in clouds):
        nrm = np.concatenate([c.normals for c in clouds])
    keys = set.intersection(*(set(c.props) for c in clouds))
    props = {k: np.concatenate([c.props[k] for c in clouds]) for k in sorted(keys)}
    return PointCloud(pts, nrm, props)


def median_spacing(points):
    """Median distance from each point to its nearest other point."""
    d, _ = cKDTree(points).query(points, k=2)
    return float(np.median(d[:, 1]))


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Average points (and normals) falling into each voxel of edge ``voxel``.

    Voxels are emitted in lexicographic key order, so the result is
    deterministic and independent of input point order only up to averaging.
    """
    if voxel <= 0:
        raise MeshError("voxel size must be positive")
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.ravel()
    counts = np.bincount(inv).astype(np.float64)
    pts = np.zeros((len(uniq), 3))
    np.add.at(pts, inv, cloud.points)
    pts /= counts[:, None]
    nrm = None
    if cloud.normals is not None:
        nrm = np.zeros((len(uniq), 3))
        np.add.at(nrm, inv, cloud.normals)
        ln = np.linalg.norm(nrm, axis=1, keepdims=True)
        nrm = np.divide(nrm, ln, out=np.zeros_like(nrm), where=ln > 0)
    return PointCloud(pts, nrm)


def estimate_normals(points, radius, reference=None):
    """PCA normals from ``radius`` neighbourhoods.

    Orientation follows ``reference`` normals when given, otherwise points
    away from the cloud centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    tree = cKDTree(points)
    nbrs = tree.query_ball_point(points, radius)
    out = np.zeros_like(points)
    for i, nb in enumerate(nbrs):
        if len(nb) < 3:
            raise MeshError(f"point {i} has fewer than 3 neighbours within {radius}")
        q = points[nb] - points[nb].mean(axis=0)
        _, vecs = np.linalg.eigh(q.T @ q)
        out[i] = vecs[:, 0]
    ref = (points - points.mean(axis=0)) if reference is None else np.asarray(reference)
    flip = np.einsum("ij,ij->i", out, ref) < 0
    out[flip] *= -1
    return out


def sample_surface(mesh: TriMesh, density: float = 10.0, seed: int = 0):
    """Area-uniform random samples, ``density`` points per mm^2 (at least one per face).

    Returns ``(points, face_index)``.
    """
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    counts = np.maximum(1, np.round(areas * density).astype(np.int64))
    fidx = np.repeat(np.arange(mesh.n_faces), counts)
    r1 = np.sqrt(rng.random(len(fidx)))
    r2 = rng.random(len(fidx))
    tri = mesh.vertices[mesh.faces[fidx]]
    pts = (1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1] + (r1 * r2)[:, None] * tri[:, 2]
    return pts, fidx


def icosphere(level: int = 2, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    v = np.array(verts, dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array(faces, dtype=np.int64)
    for _ in range(level):
        v, f = _subdivide(v, f)
        v /= np.linalg.norm(v, axis=1, keepdims=True)
    return TriMesh(v * radius + np.asarray(center, dtype=np.float64), f, v.copy())


def _subdivide(v, f):
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    uniq, inv = np.unique(e, axis=0, return_inverse=True)
    inv = inv.ravel()
    mid = 0.5 * (v[uniq[:, 0]] + v[uniq[:, 1]])
    m = inv.reshape(3, -1).T + len(v)  # midpoints of edges (01, 12, 20)
    a, b, c = f[:, 0], f[:, 1], f[:, 2]
    ab, bc, ca = m[:, 0], m[:, 1], m[:, 2]
    nf = np.concatenate([
        np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
        np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1),
    ])
    return np.vstack([v, mid]), nf


# ---------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def save_ply(path, obj, binary: bool = True):
    """Write a :class:`TriMesh` or :class:`PointCloud` as PLY.

    Coordinates and normals are stored as doubles so that checkpoints
    round-trip bit-exactly.
    """
    path = Path(path)
    if isinstance(obj, TriMesh):
        pts, nrm, faces, props, units = obj.vertices, obj.normals, obj.faces, obj.props, obj.units
    else:
        pts, nrm, faces, props, units = obj.points, obj.normals, None, obj.props, "mm"
    fmt = "binary_little_endian" if binary else "ascii"
    cols = [("x", "f8"), ("y", "f8"), ("z", "f8")]
    if nrm is not None:
        cols += [("nx", "f8"), ("ny", "f8"), ("nz", "f8")]
    names = sorted(props)
    cols += [(k, "i4") for k in names]
    head = ["ply", f"format {fmt} 1.0", f"comment units {units}", f"element vertex {len(pts)}"]
    rev = {"f8": "double", "i4": "int"}
    head += [f"property {rev[t]} {n}" for n, t in cols]
    if faces is not None:
        head += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    head.append("end_header")
    rec = np.zeros(len(pts), dtype=[(n, "<" + t) for n, t in cols])
    for i, c in enumerate("xyz"):
        rec[c] = pts[:, i]
    if nrm is not None:
        for i, c in enumerate(("nx", "ny", "nz")):
            rec[c] = nrm[:, i]
    for k in names:
        rec[k] = props[k]
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n").encode("ascii"))
        if binary:
            fh.write(rec.tobytes())
            if faces is not None:
                frec = np.zeros(len(faces), dtype=[("n", "u1"), ("v", "<i4", (3,))])
                frec["n"] = 3
                frec["v"] = faces
                fh.write(frec.tobytes())
        else:
            lines = []
            for r in rec:
                lines.append(" ".join(repr(float(x)) if t == "f8" else str(int(x)) for x, (_, t) in zip(r, cols)))
            if faces is not None:
                lines += [f"3 {a} {b} {c}" for a, b, c in faces]
            fh.write(("\n".join(lines) + ("\n" if lines else "")).encode("ascii"))


def _read_header(fh):
    if fh.readline().strip() != b"ply":
        raise MeshError("not a PLY file")
    fmt, units, elements = None, "mm", []
    while True:
        line = fh.readline()
        if not line:
            raise MeshError("truncated PLY header")
        tok = line.decode("ascii").split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "comment" and len(tok) >= 3 and tok[1] == "units":
            units = tok[2]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if tok[1] == "list":
                elements[-1][2].append((tok[4], ("list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]])))
            else:
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        elif tok[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian"):
        raise MeshError(f"unsupported PLY format {fmt!r}")
    return fmt, units, elements


def load_ply(path):
    """Read a PLY written by :func:`save_ply` (or any triangle PLY in ascii /
    binary little endian). Returns a TriMesh when faces are present, else a
    PointCloud."""
    with open(path, "rb") as fh:
        fmt, units, elements = _read_header(fh)
        body = fh.read()
    data = {}
    if fmt == "ascii":
        tokens = body.split()
        pos = 0
        for name, count, props in elements:
            if any(isinstance(t, tuple) for _, t in props):
                rows = []
                for _ in range(count):
                    n = int(tokens[pos])
                    rows.append([int(x) for x in tokens[pos + 1:pos + 1 + n]])
                    pos += 1 + n
                data[name] = rows
            else:
                k = len(props)
                arr = np.array(tokens[pos:pos + count * k], dtype=np.float64).reshape(count, k)
                pos += count * k
                data[name] = {p: arr[:, i] for i, (p, _) in enumerate(props)}
    else:
        off = 0
        for name, count, props in elements:
            if any(isinstance(t, tuple) for _, t in props):
                (pname, (_, ct, it)), = props
                dt = np.dtype([("n", "<" + ct), ("v", "<" + it, (3,))])
                rec = np.frombuffer(body, dtype=dt, count=count, offset=off)
                if count and np.any(rec["n"] != 3):
                    raise MeshError("only triangle faces are supported")
                off += dt.itemsize * count
                data[name] = rec["v"].astype(np.int64)
            else:
                dt = np.dtype([(p, "<" + t) for p, t in props])
                rec = np.frombuffer(body, dtype=dt, count=count, offset=off)
                off += dt.itemsize * count
                data[name] = {p: rec[p] for p, _ in props}
    v = data.get("vertex")
    if v is None:
        raise MeshError("PLY has no vertex element")
    pts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    nrm = None
    if all(k in v for k in ("nx", "ny", "nz")):
        nrm = np.stack([v["nx"], v["ny"], v["nz"]], axis=1).astype(np.float64)
    props = {k: np.asarray(a).astype(np.int64) for k, a in v.items() if k not in ("x", "y", "z", "nx", "ny", "nz")}
    if "face" in data:
        faces = np.asarray(data["face"], dtype=np.int64).reshape(-1, 3)
        return TriMesh(pts, faces, nrm, props, units)
    return PointCloud(pts, nrm, props)


def load_mesh(path) -> TriMesh:
    obj = load_ply(path)
    if not isinstance(obj, TriMesh):
        raise MeshError(f"{path} holds a point cloud, expected a mesh")
    return obj


def load_cloud(path) -> PointCloud:
    obj = load_ply(path)
    return obj.to_cloud() if isinstance(obj, TriMesh) else obj
