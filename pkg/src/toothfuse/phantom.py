"""Synthetic dental phantom with exact ground truth.

Two opposing arches of teeth sit on a parabolic arch. Each tooth is a
cylindrical crown with a hemispherical tip whose root tapers to a smaller
rounded apex; each jaw's roots are embedded in a slab of bone swept
along the same arch. The scene carries the rasterised label volume, an
intraoral-scan stand-in per jaw (fine crown tessellation, FDI labelled, in
its own frame), the IOS -> CBCT transforms and the analytic surfaces.

Frame: x runs across the arch, y toward the front teeth, z upward. Upper
teeth point down (tip toward the occlusal plane), lower teeth point up.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .mesh import PROV_CBCT, PROV_IOS, TriMesh, load_mesh, save_ply
from .transform import SimilarityTransform, random_rotation
from .volume import BONE, TOOTH, LabelVolume, load_volume, save_volume

JAWS = ("upper", "lower")


class PhantomError(ValueError):
    pass


@dataclass
class PhantomConfig:
    teeth_per_jaw: int = 8
    voxel: float = 0.25
    bite_gap: float = -0.2
    radius_min: float = 1.0
    radius_max: float = 1.4
    radius_jitter: float = 0.08
    crown_height: float = 2.0
    root_length: float = 3.5
    root_jitter: float = 0.5
    apex_ratio: float = 0.5
    interproximal_gap: float = 0.5
    arch_curvature: float = 0.08
    bone_wall: float = 0.75
    bone_cover: float = 0.75
    margin: float = 1.0
    ios_edge: float = 0.2
    ios_noise: float = 0.0
    ios_rotation_max_deg: float = 30.0
    ios_translation_max: float = 20.0
    gt_edge: float = 0.1

    def validate(self):
        if not 4 <= self.teeth_per_jaw <= 16:
            raise PhantomError("teeth_per_jaw must be in [4, 16]")
        if not 0.125 <= self.voxel <= 0.5:
            raise PhantomError("voxel must be in [0.125, 0.5] mm")
        if not 0 < self.radius_min <= self.radius_max:
            raise PhantomError("need 0 < radius_min <= radius_max")
        if self.crown_height <= self.radius_max + self.radius_jitter:
            raise PhantomError("crown_height must exceed the largest tooth radius")
        if not 0 < self.apex_ratio <= 1:
            raise PhantomError("apex_ratio must be in (0, 1]")
        if self.root_length - self.root_jitter <= self.radius_max + self.radius_jitter:
            raise PhantomError("root_length too short for the root taper")
        if self.interproximal_gap < 0 or self.ios_edge <= 0 or self.gt_edge <= 0:
            raise PhantomError("gap and tessellation edges must be non-negative / positive")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in known:
                raise PhantomError(f"unknown phantom key {k!r}")
            kw[k] = int(v) if k == "teeth_per_jaw" else float(v)
        return cls(**kw)

    @classmethod
    def load(cls, path):
        """Flat ``key = value`` text file; ``#`` starts a comment."""
        d = {}
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                k, v = line.split("=", 1)
                d[k.strip()] = v.strip()
        return cls.from_dict(d)

    def dumps(self):
        return "".join(f"{k} = {v!r}\n" for k, v in asdict(self).items())


@dataclass
class Tooth:
    """Crown capsule of radius ``radius`` up to the bone crest, then a root
    tapering (as a round cone) to an apex sphere of radius ``apex_radius``.

    Heights ``h`` are measured from the crown tip along the tooth axis.
    """
    fdi: int
    jaw: str
    tip: np.ndarray  # crown tip, mm, volume frame
    direction: float  # +1 axis points up (upper teeth), -1 down
    radius: float
    length: float
    crown_height: float
    apex_radius: float = None

    def __post_init__(self):
        if self.apex_radius is None:
            self.apex_radius = self.radius

    def _local(self, pts):
        rel = pts - self.tip
        h = rel[:, 2] * self.direction
        rho = np.hypot(rel[:, 0], rel[:, 1])
        return rho, h

    def sdf(self, pts):
        rho, h = self._local(pts)
        r, ra = self.radius, self.apex_radius
        hb, ha = self.crown_height, self.length - ra
        # crown capsule: segment h in [r, hb]
        hc = np.clip(h, r, hb)
        d_crown = np.hypot(rho, h - hc) - r
        # root round cone between spheres (hb, r) and (ha, ra)
        L = ha - hb
        b = (r - ra) / L
        a = np.sqrt(1 - b * b)
        y = h - hb
        k = -b * rho + a * y
        d_root = np.where(k < 0, np.hypot(rho, y) - r,
                          np.where(k > a * L, np.hypot(rho, y - L) - ra, a * rho + b * y - r))
        return np.minimum(d_crown, d_root)

    def profile(self):
        """Meridian of the surface as ``[(kind, ...), ...]`` pieces, tip to apex.

        ``("arc", h_centre, R, phi0, phi1)`` traces ``(R cos phi, h_centre + R sin phi)``;
        ``("line", (rho0, h0), (rho1, h1), (n_rho, n_h))`` is a straight piece.
        """
        r, ra = self.radius, self.apex_radius
        hb, ha = self.crown_height, self.length - ra
        beta = np.arcsin((r - ra) / (ha - hb))
        nb = (np.cos(beta), np.sin(beta))
        return [
            ("arc", r, r, -np.pi / 2, 0.0),
            ("line", (r, r), (r, hb), (1.0, 0.0)),
            ("arc", hb, r, 0.0, beta),
            ("line", (r * nb[0], hb + r * nb[1]), (ra * nb[0], ha + ra * nb[1]), nb),
            ("arc", ha, ra, beta, np.pi / 2),
        ]


@dataclass(eq=False)
class PhantomScene:
    config: PhantomConfig
    seed: int
    volume: LabelVolume
    teeth: list
    gt_cbct_mesh: TriMesh
    gt_ios_mesh: dict
    gt_ios_to_cbct: dict
    gt_fused_mesh: dict

    @property
    def gt_jaw_assignment(self):
        return {t.fdi: t.jaw for t in self.teeth}

    @property
    def gt_tooth_count(self):
        return {j: sum(t.jaw == j for t in self.teeth) for j in JAWS}

    def crown_mesh(self, jaw):
        """GT crown surface of ``jaw`` in the CBCT frame."""
        return _transform_mesh(self.gt_ios_mesh[jaw], self.gt_ios_to_cbct[jaw])


# ---------------------------------------------------------------------------
# tessellation

def _zip_rings(a, b):
    """Triangulate the band between two closed rings of vertex indices."""
    na, nb = len(a), len(b)
    if na == 1 or nb == 1:
        pole, ring = (a[0], b) if na == 1 else (b[0], a)
        n = len(ring)
        return [(pole, ring[k], ring[(k + 1) % n]) for k in range(n)]
    faces = []
    i = j = 0
    while i < na or j < nb:
        # advance along whichever ring lags in normalised angle
        if j >= nb or (i < na and (i + 1) / na <= (j + 1) / nb):
            faces.append((a[i % na], a[(i + 1) % na], b[j % nb]))
            i += 1
        else:
            faces.append((a[i % na], b[(j + 1) % nb], b[j % nb]))
            j += 1
    return faces


def _piece_length(p):
    if p[0] == "arc":
        return p[2] * (p[4] - p[3])
    return float(np.hypot(p[2][0] - p[1][0], p[2][1] - p[1][1]))


def _profile_at(pieces, lengths, u):
    """``(rho, h, n_rho, n_h)`` at arc length ``u`` along the meridian."""
    for p, ln in zip(pieces, lengths):
        if u <= ln or p is pieces[-1]:
            t = min(u / ln, 1.0) if ln > 0 else 0.0
            if p[0] == "arc":
                phi = p[3] + t * (p[4] - p[3])
                return p[2] * np.cos(phi), p[1] + p[2] * np.sin(phi), np.cos(phi), np.sin(phi)
            (r0, h0), (r1, h1), nrm = p[1], p[2], p[3]
            return r0 + t * (r1 - r0), h0 + t * (h1 - h0), nrm[0], nrm[1]
        u -= ln
    raise AssertionError("unreachable")


def capsule_surface(tooth: Tooth, edge: float, crown_only: bool = False):
    """Tessellate a tooth (or just its crown, open at the bone crest).

    Returns ``(vertices, faces, normals, is_crown)``; normals are the
    analytic outward normals.
    """
    pieces = tooth.profile()
    if crown_only:
        pieces = pieces[:2]
    lengths = [_piece_length(p) for p in pieces]
    # ring positions: uniform per piece so ring seams land on piece joints
    us = [0.0]
    acc = 0.0
    for ln in lengths:
        if ln <= 0:
            continue
        k = max(1, int(np.ceil(ln / edge)))
        us += list(acc + ln * np.arange(1, k + 1) / k)
        acc += ln
    verts, norms, rings = [], [], []
    ax = np.array([0.0, 0.0, tooth.direction])
    last = len(us) - 1
    for k, u in enumerate(us):
        rho, h, nr, na = _profile_at(pieces, lengths, u)
        pole = (k == 0) or (not crown_only and k == last)
        m = 1 if pole else max(6, int(np.ceil(2 * np.pi * rho / edge)))
        th = (np.arange(m) + 0.5 * (k % 2)) * 2 * np.pi / m
        ring_pts = tooth.tip + ax * h + rho * np.stack([np.cos(th), np.sin(th), np.zeros(m)], 1)
        ring_nrm = nr * np.stack([np.cos(th), np.sin(th), np.zeros(m)], 1) + na * ax
        if pole:
            ring_pts = (tooth.tip + ax * h)[None]
            ring_nrm = (na * ax)[None]
        base = sum(len(x) for x in verts)
        rings.append(list(range(base, base + len(ring_pts))))
        verts.append(ring_pts)
        norms.append(ring_nrm)
    faces = []
    for a, b in zip(rings[:-1], rings[1:]):
        faces += _zip_rings(a, b)
    v = np.concatenate(verts)
    n = np.concatenate(norms)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    f = np.array(faces, dtype=np.int64)
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    flip = np.einsum("ij,ij->i", fn, n[f].sum(axis=1)) < 0
    f[flip] = f[flip][:, ::-1]
    height = np.abs(v[:, 2] - tooth.tip[2])
    is_crown = height <= tooth.crown_height + 1e-9
    return v, f, n, is_crown


def _merge(parts):
    vs, fs, ns, props = [], [], [], {}
    off = 0
    for v, f, n, p in parts:
        vs.append(v)
        fs.append(f + off)
        ns.append(n)
        for k, a in p.items():
            props.setdefault(k, []).append(a)
        off += len(v)
    return TriMesh(np.concatenate(vs), np.concatenate(fs), np.concatenate(ns),
                   {k: np.concatenate(a) for k, a in props.items()})


def _transform_mesh(mesh, tf):
    return TriMesh(tf.apply(mesh.vertices), mesh.faces, tf.apply_normals(mesh.normals),
                   dict(mesh.props), mesh.units)


# ---------------------------------------------------------------------------
# layout

def _arch_points(a, half_length, step=0.01):
    """Dense samples of ``y = -a x^2`` by arc length on both sides of x = 0."""
    xs = np.linspace(0.0, half_length, int(half_length / step) + 1)
    ds = np.sqrt(1.0 + 4 * a * a * xs ** 2)
    s = np.concatenate([[0.0], np.cumsum(0.5 * (ds[1:] + ds[:-1]) * np.diff(xs))])
    return xs, s


def _fdi_codes(n):
    n_right = (n + 1) // 2
    n_left = n // 2
    upper = [(10 + q, -1, q) for q in range(1, n_right + 1)] + [(20 + q, +1, q) for q in range(1, n_left + 1)]
    lower = [(40 + q, -1, q) for q in range(1, n_right + 1)] + [(30 + q, +1, q) for q in range(1, n_left + 1)]
    return upper, lower


def generate_phantom(seed: int = 0, config: PhantomConfig | None = None) -> PhantomScene:
    cfg = (config or PhantomConfig()).validate()
    rng = np.random.default_rng(seed)
    n = cfg.teeth_per_jaw
    upper_codes, lower_codes = _fdi_codes(n)
    n_side = (n + 1) // 2

    def radius(q):
        base = cfg.radius_min + (cfg.radius_max - cfg.radius_min) * (q - 1) / 7.0
        return min(base, cfg.radius_max) + rng.uniform(-cfg.radius_jitter, cfg.radius_jitter)

    # per-jaw, per-side sizes; positions shared by opposing teeth
    sizes = {}
    for jaw, codes in (("upper", upper_codes), ("lower", lower_codes)):
        for fdi, side, q in codes:
            sizes[jaw, side, q] = (radius(q), cfg.crown_height + cfg.root_length
                                   + rng.uniform(-cfg.root_jitter, cfg.root_jitter))
    arc = {}
    for side in (-1, +1):
        s = cfg.interproximal_gap / 2
        prev = None
        for q in range(1, n_side + 1):
            w = 2 * max(sizes.get((j, side, q), (0.0, 0))[0] for j in JAWS)
            if w == 0:
                continue
            s += (w / 2) if prev is None else (prev / 2 + cfg.interproximal_gap + w / 2)
            arc[side, q] = s
            prev = w
    half = max(arc.values()) + cfg.radius_max + 2.0
    xs, ss = _arch_points(cfg.arch_curvature, half * 1.2)

    def arch_xy(side, s):
        x = np.interp(s, ss, xs)
        return np.array([side * x, -cfg.arch_curvature * x * x])

    teeth = []
    for jaw, codes in (("upper", upper_codes), ("lower", lower_codes)):
        d = 1.0 if jaw == "upper" else -1.0
        for fdi, side, q in codes:
            r, length = sizes[jaw, side, q]
            xy = arch_xy(side, arc[side, q])
            tip = np.array([xy[0], xy[1], d * cfg.bite_gap / 2])
            teeth.append(Tooth(fdi, jaw, tip, d, r, length, cfg.crown_height, cfg.apex_ratio * r))

    # bone slab: horizontally within `wall` of the arch curve, between the crest and above the apices
    s_end = max(arc.values()) + cfg.radius_max + cfg.bone_wall
    s_dense = np.linspace(0.0, s_end, int(s_end / 0.02) + 1)
    curve = np.concatenate([np.stack([arch_xy(-1, s) for s in s_dense[::-1]]),
                            np.stack([arch_xy(+1, s) for s in s_dense[1:]])])
    wall = cfg.radius_max + cfg.radius_jitter + cfg.bone_wall
    crest = cfg.bite_gap / 2 + cfg.crown_height
    top = {j: max(t.length for t in teeth if t.jaw == j) + cfg.bite_gap / 2 + cfg.bone_cover for j in JAWS}

    # grid: bounding box plus margin, occlusal plane on a voxel centre
    v = cfg.voxel
    lo = np.array([curve[:, 0].min() - wall, curve[:, 1].min() - wall, -top["lower"]]) - cfg.margin
    hi = np.array([curve[:, 0].max() + wall, curve[:, 1].max() + wall, top["upper"]]) + cfg.margin
    lo = np.floor(lo / v) * v
    dims = tuple(int(np.ceil((hi[k] - lo[k]) / v)) + 1 for k in range(3))
    shift = -lo
    for t in teeth:
        t.tip = t.tip + shift
    curve = curve + shift[:2]
    crest_z = {"upper": shift[2] + crest, "lower": shift[2] - crest}
    top_z = {"upper": shift[2] + top["upper"], "lower": shift[2] - top["lower"]}

    grid = np.stack(np.meshgrid(*(np.arange(d) * v for d in dims), indexing="ij"), -1).reshape(-1, 3)
    labels = np.zeros(len(grid), dtype=np.uint8)
    dxy, _ = cKDTree(curve).query(grid[:, :2])
    in_slab = dxy <= wall
    labels[in_slab & (grid[:, 2] >= crest_z["upper"]) & (grid[:, 2] <= top_z["upper"])] = BONE
    labels[in_slab & (grid[:, 2] <= crest_z["lower"]) & (grid[:, 2] >= top_z["lower"])] = BONE
    for t in teeth:
        box = np.all(np.abs(grid[:, :2] - t.tip[:2]) <= t.radius + v, axis=1)
        idx = np.flatnonzero(box)
        labels[idx[t.sdf(grid[idx]) <= 0]] = TOOTH
    volume = LabelVolume(labels.reshape(dims), (v, v, v))

    # analytic surfaces
    gt_parts, fused_parts = [], {j: [] for j in JAWS}
    for jid, t in enumerate(teeth):
        vv, ff, nn, crown = capsule_surface(t, cfg.gt_edge)
        jaw_code = JAWS.index(t.jaw)
        gt_parts.append((vv, ff, nn, {"label": np.full(len(vv), t.fdi), "jaw": np.full(len(vv), jaw_code)}))
        prov = np.where(crown, PROV_IOS, PROV_CBCT)
        fused_parts[t.jaw].append((vv, ff, nn, {"label": np.full(len(vv), t.fdi), "provenance": prov}))
    gt_cbct = _merge(gt_parts)
    gt_fused = {j: _merge(fused_parts[j]) for j in JAWS}

    ios, tfs = {}, {}
    for jaw in JAWS:
        parts = []
        for t in teeth:
            if t.jaw != jaw:
                continue
            vv, ff, nn, _ = capsule_surface(t, cfg.ios_edge, crown_only=True)
            parts.append((vv, ff, nn, {"label": np.full(len(vv), t.fdi)}))
        crowns = _merge(parts)
        c = crowns.vertices.mean(axis=0)
        rot = random_rotation(rng, np.deg2rad(cfg.ios_rotation_max_deg))
        dirn = rng.normal(size=3)
        disp = dirn / np.linalg.norm(dirn) * rng.uniform(0.0, cfg.ios_translation_max)
        # IOS frame y relates to CBCT frame x by x = R (y - c + disp) + c
        tf = SimilarityTransform(1.0, rot, c - rot @ c + rot @ disp)
        local = _transform_mesh(crowns, tf.inverse())
        if cfg.ios_noise > 0:
            local = TriMesh(local.vertices + rng.normal(scale=cfg.ios_noise, size=local.vertices.shape),
                            local.faces, local.normals, local.props)
        ios[jaw] = local
        tfs[jaw] = tf
    return PhantomScene(cfg, seed, volume, teeth, gt_cbct, ios, tfs, gt_fused)


# ---------------------------------------------------------------------------
# persistence

def save_scene(scene: PhantomScene, out_dir, binary: bool = True) -> Path:
    """Write every scene artifact into ``out_dir``; returns the directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(scene.volume, out / "volume.hdr")
    save_ply(out / "gt_cbct.ply", scene.gt_cbct_mesh, binary)
    for jaw in JAWS:
        save_ply(out / f"ios_{jaw}.ply", scene.gt_ios_mesh[jaw], binary)
        save_ply(out / f"gt_fused_{jaw}.ply", scene.gt_fused_mesh[jaw], binary)
        scene.gt_ios_to_cbct[jaw].save(out / f"gt_ios_to_cbct_{jaw}.txt")
    (out / "phantom.cfg").write_text(scene.config.dumps())
    meta = {
        "seed": scene.seed,
        "teeth": [
            {"fdi": t.fdi, "jaw": t.jaw, "tip": [float(x) for x in t.tip], "direction": t.direction,
             "radius": t.radius, "length": t.length, "crown_height": t.crown_height,
             "apex_radius": t.apex_radius}
            for t in scene.teeth
        ],
        "gt_tooth_count": scene.gt_tooth_count,
    }
    (out / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def load_scene(directory) -> PhantomScene:
    d = Path(directory)
    meta = json.loads((d / "scene.json").read_text())
    teeth = [Tooth(t["fdi"], t["jaw"], np.array(t["tip"]), t["direction"], t["radius"], t["length"],
                   t["crown_height"], t.get("apex_radius")) for t in meta["teeth"]]
    return PhantomScene(
        PhantomConfig.load(d / "phantom.cfg"),
        meta["seed"],
        load_volume(d / "volume.hdr"),
        teeth,
        load_mesh(d / "gt_cbct.ply"),
        {j: load_mesh(d / f"ios_{j}.ply") for j in JAWS},
        {j: SimilarityTransform.load(d / f"gt_ios_to_cbct_{j}.txt") for j in JAWS},
        {j: load_mesh(d / f"gt_fused_{j}.ply") for j in JAWS},
    )
