"""End-to-end CBCT/IOS fusion with stage checkpoints.

Stages run in order::

    reconstruct -> smooth -> curvseg -> split -> register -> fuse -> metrics

With a checkpoint directory every stage writes its artifacts there, and a
run can resume from any stage by reloading the previous stage's outputs.
Layout (jaw is ``upper`` or ``lower``)::

    config.cfg                       effective configuration
    reconstruct/cbct_raw.ply         marching-cubes tooth surface
    smooth/cbct.ply                  smoothed surface
    curvseg/cbct_components.ply      surface with per-vertex ``component``
    split/cbct_<jaw>.ply             half-jaw surfaces
    split/split.json                 plane and per-component jaw
    register/transform_<jaw>.txt     IOS -> CBCT, 4x4 row-major
    register/ios_<jaw>.ply           registered IOS crowns
    register/register.json           per-jaw registration reports
    fuse/fused_<jaw>.ply             fused mesh (provenance, label)
    fuse/fuse.json                   removal and cleanup statistics
    metrics/metrics.json             distances to ground truth, if given
    report.json                      PipelineReport

All meshes are stored as binary float64 PLY, so a resumed run sees
bit-identical inputs.
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import config as C
from .curvseg import ComponentLabeling, SegmentationError, erosion_expansion_segment, split_jaws
from .fuse import FuseError, fuse_half_jaw
from .mesh import MeshError, TriMesh, concat_clouds, load_mesh, save_ply
from .metrics import mesh_distances
from .phantom import JAWS, PhantomScene, load_scene
from .reconstruct import hlo_smooth, marching_cubes
from .register import RegistrationError, register, scale_align
from .transform import SimilarityTransform
from .volume import TOOTH, LabelVolume, VolumeError, load_volume

log = logging.getLogger(__name__)

SCHEMA = "toothfuse.pipeline/1"
STAGES = ("reconstruct", "smooth", "curvseg", "split", "register", "fuse", "metrics")
# checkpointed outputs each stage reads
_INPUTS = {"reconstruct": (), "smooth": ("reconstruct",), "curvseg": ("smooth",), "split": ("curvseg",),
           "register": ("split",), "fuse": ("split", "register"), "metrics": ("fuse",)}


class PipelineError(RuntimeError):
    def __init__(self, stage, message, report=None):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.message = message
        self.report = report


@dataclass
class GroundTruth:
    """Optional references for the metrics stage (all in the CBCT frame)."""
    fused: dict = field(default_factory=dict)  # jaw -> TriMesh
    transforms: dict = field(default_factory=dict)  # jaw -> SimilarityTransform (IOS -> CBCT)
    cbct: TriMesh | None = None  # with per-vertex ``jaw`` property

    @classmethod
    def from_scene(cls, scene: PhantomScene):
        return cls(dict(scene.gt_fused_mesh), dict(scene.gt_ios_to_cbct), scene.gt_cbct_mesh)


@dataclass
class PipelineResult:
    fused: dict  # jaw -> TriMesh
    report: dict


def _json_dump(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _labeling_from_ids(mesh, ids):
    count = int(ids.max()) + 1
    centers = np.stack([mesh.vertices[ids == k].mean(axis=0) for k in range(count)])
    return ComponentLabeling(ids, count, centers, np.bincount(ids, minlength=count))


class _Run:
    def __init__(self, volume, ios, cfg, checkpoint, ground_truth):
        self.volume = volume
        self.ios = ios
        self.cfg = cfg
        self.ckpt = None if checkpoint is None else Path(checkpoint)
        self.gt = ground_truth
        self.stages = {}
        self.timing = {}
        self.state = {}

    # -- checkpoint helpers ---------------------------------------------------
    def _dir(self, stage):
        d = self.ckpt / stage
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _save_mesh(self, stage, name, mesh):
        if self.ckpt is not None:
            save_ply(self._dir(stage) / name, mesh, binary=True)

    def _save_json(self, stage, name, obj):
        if self.ckpt is not None:
            _json_dump(obj, self._dir(stage) / name)

    def _need_ckpt(self, stage, name):
        if self.ckpt is None:
            raise PipelineError(stage, "resuming needs a checkpoint directory")
        p = self.ckpt / stage / name
        if not p.exists():
            raise PipelineError(stage, f"missing checkpoint artifact {p}")
        return p

    def jaws(self):
        return [j for j in JAWS if self.ios.get(j) is not None]

    # -- stages ---------------------------------------------------------------
    def reconstruct(self):
        mesh = marching_cubes(self.volume, TOOTH)
        if mesh.is_empty():
            raise PipelineError("reconstruct", "volume has no tooth voxels")
        self.state["raw"] = mesh
        self._save_mesh("reconstruct", "cbct_raw.ply", mesh)
        return {"vertices": mesh.n_vertices, "faces": mesh.n_faces, "watertight": mesh.is_watertight()}

    def load_reconstruct(self):
        self.state["raw"] = load_mesh(self._need_ckpt("reconstruct", "cbct_raw.ply"))

    def smooth(self):
        s = self.cfg.smooth
        mesh = hlo_smooth(self.state["raw"], s.iterations, np.deg2rad(s.normal_gate_deg), s.step, s.inflate)
        self.state["mesh"] = mesh
        self._save_mesh("smooth", "cbct.ply", mesh)
        return {"vertices": mesh.n_vertices}

    def load_smooth(self):
        self.state["mesh"] = load_mesh(self._need_ckpt("smooth", "cbct.ply"))

    def curvseg(self):
        s = self.cfg.segment
        lab = erosion_expansion_segment(self.state["mesh"], s.percentile, s.order, s.min_component)
        mesh = self.state["mesh"].with_props(component=lab.ids)
        self.state["mesh"] = mesh
        self.state["labeling"] = lab
        self._save_mesh("curvseg", "cbct_components.ply", mesh)
        self._save_json("curvseg", "curvseg.json", lab.to_json())
        return {"components": lab.count}

    def load_curvseg(self):
        mesh = load_mesh(self._need_ckpt("curvseg", "cbct_components.ply"))
        self.state["mesh"] = mesh
        self.state["labeling"] = _labeling_from_ids(mesh, mesh.props["component"])

    def split(self):
        sp = split_jaws(self.state["labeling"], self.state["mesh"], iterations=self.cfg.segment.split_iterations,
                        seed=self.cfg.seed)
        self.state["cbct"] = {"upper": sp.upper, "lower": sp.lower}
        for jaw in JAWS:
            self._save_mesh("split", f"cbct_{jaw}.ply", self.state["cbct"][jaw])
        info = sp.to_json()
        info["components"] = {"upper": int(np.sum(sp.jaw_of_component == 0)),
                              "lower": int(np.sum(sp.jaw_of_component == 1))}
        if self.gt is not None and self.gt.cbct is not None and "jaw" in self.gt.cbct.props:
            _, nn = cKDTree(self.gt.cbct.vertices).query(self.state["mesh"].vertices)
            gjaw = self.gt.cbct.props["jaw"][nn]
            ids = self.state["labeling"].ids
            ok = [bool(np.bincount(gjaw[ids == k], minlength=2).argmax() == sp.jaw_of_component[k])
                  for k in range(self.state["labeling"].count)]
            info["correct_components"] = int(sum(ok))
            info["correct"] = bool(all(ok))
        self._save_json("split", "split.json", info)
        return info

    def load_split(self):
        self.state["cbct"] = {j: load_mesh(self._need_ckpt("split", f"cbct_{j}.ply")) for j in JAWS}

    def _register_jaw(self, jaw):
        src = scale_align(self.ios[jaw], self.volume.spacing)
        dst = self.state["cbct"][jaw]
        if dst.n_vertices < 10:
            raise PipelineError("register", f"{jaw} CBCT half jaw is empty")
        tf, rep0, rep1 = register(src, dst, C.registration_config(self.cfg))
        return jaw, src, tf, rep0, rep1

    def register(self):
        jaws = self.jaws()
        out = {}
        with ThreadPoolExecutor(max_workers=min(self.cfg.worker_count(), max(len(jaws), 1))) as ex:
            results = list(ex.map(self._register_jaw, jaws))
        self.state["tf"] = {}
        self.state["ios_reg"] = {}
        for jaw, src, tf, rep0, rep1 in results:
            self.state["tf"][jaw] = tf
            reg = TriMesh(tf.apply(src.vertices), src.faces, tf.apply_normals(src.normals), src.props)
            self.state["ios_reg"][jaw] = reg
            entry = {"global": rep0.to_json(), "icp": rep1.to_json(), "success": bool(rep1.success)}
            if self.gt is not None and jaw in self.gt.transforms:
                rot, trans = tf.error_to(self.gt.transforms[jaw], src.vertices.mean(axis=0))
                entry["error_deg"] = rot
                entry["error_mm"] = trans
            out[jaw] = entry
            if self.ckpt is not None:
                tf.save(self._dir("register") / f"transform_{jaw}.txt")
            self._save_mesh("register", f"ios_{jaw}.ply", reg)
        for jaw in JAWS:
            if jaw not in out:
                out[jaw] = {"status": "skipped", "reason": "no IOS scan"}
        self._save_json("register", "register.json", out)
        return out

    def load_register(self):
        self.state["tf"] = {}
        self.state["ios_reg"] = {}
        for jaw in self.jaws():
            self.state["tf"][jaw] = SimilarityTransform.load(self._need_ckpt("register", f"transform_{jaw}.txt"))
            self.state["ios_reg"][jaw] = load_mesh(self._need_ckpt("register", f"ios_{jaw}.ply"))

    def _fuse_jaw(self, jaw, reference):
        f = self.cfg.fuse
        fused, stats = fuse_half_jaw(self.state["cbct"][jaw].to_cloud(), self.state["ios_reg"][jaw].to_cloud(),
                                     reference, f.removal_fraction, f.default_fraction, f.dbscan_eps,
                                     f.dbscan_min_pts, f.min_cluster, f.radius_factors, f.smooth_iterations,
                                     f.smooth_step)
        return jaw, fused, stats

    def fuse(self):
        jaws = self.jaws()
        reference = concat_clouds([self.state["ios_reg"][j].to_cloud() for j in jaws])
        with ThreadPoolExecutor(max_workers=min(self.cfg.worker_count(), max(len(jaws), 1))) as ex:
            results = list(ex.map(lambda j: self._fuse_jaw(j, reference), jaws))
        out = {}
        self.state["fused"] = {}
        for jaw, fused, stats in results:
            self.state["fused"][jaw] = fused
            self._save_mesh("fuse", f"fused_{jaw}.ply", fused)
            out[jaw] = stats
        for jaw in JAWS:
            if jaw not in out:
                out[jaw] = {"status": "skipped", "reason": "no IOS scan"}
        self._save_json("fuse", "fuse.json", out)
        return out

    def load_fuse(self):
        self.state["fused"] = {j: load_mesh(self._need_ckpt("fuse", f"fused_{j}.ply")) for j in self.jaws()}

    def metrics(self):
        if self.gt is None or not self.gt.fused:
            return {"status": "skipped", "reason": "no ground truth"}
        m = self.cfg.metrics
        out = {}
        for jaw, fused in self.state["fused"].items():
            ref = self.gt.fused.get(jaw)
            if ref is None:
                continue
            d = mesh_distances(fused, ref, m.mode, m.density, self.cfg.seed)
            entry = d.to_json()
            if "label" in fused.props and "label" in ref.props:
                _, nn = cKDTree(ref.vertices).query(fused.vertices)
                entry["label_accuracy"] = float(np.mean(fused.props["label"] == ref.props["label"][nn]))
            out[jaw] = entry
        self._save_json("metrics", "metrics.json", out)
        return out

    # -- driver ---------------------------------------------------------------
    def run(self, resume_from=None):
        start = 0
        if resume_from is not None:
            if resume_from not in STAGES:
                raise PipelineError("pipeline", f"unknown stage {resume_from!r}")
            start = STAGES.index(resume_from)
            prev = self._load_report()
            for name in STAGES[:start]:
                self.stages[name] = prev.get("stages", {}).get(name, {"status": "success"})
            for name in _INPUTS[resume_from]:
                getattr(self, "load_" + name)()
        if self.ckpt is not None:
            self.ckpt.mkdir(parents=True, exist_ok=True)
            (self.ckpt / "config.cfg").write_text(C.dumps(self.cfg))
        for name in STAGES[start:]:
            t0 = time.perf_counter()
            try:
                detail = getattr(self, name)()
            except PipelineError as exc:
                self._fail(name, exc.message, t0)
                raise PipelineError(name, exc.message, self.report()) from exc
            except (RegistrationError, SegmentationError, FuseError, MeshError, VolumeError, ValueError) as exc:
                self._fail(name, str(exc), t0)
                raise PipelineError(name, str(exc), self.report()) from exc
            self.timing[name] = time.perf_counter() - t0
            status = detail.get("status", "success")
            self.stages[name] = {"status": status, "detail": detail}
            log.info("stage %s done in %.2fs", name, self.timing[name])
        rep = self.report()
        self._save_report(rep)
        return PipelineResult(dict(self.state.get("fused", {})), rep)

    def _fail(self, name, message, t0):
        self.timing[name] = time.perf_counter() - t0
        self.stages[name] = {"status": "failed", "error": message}
        self._save_report(self.report())

    def _load_report(self):
        if self.ckpt is None or not (self.ckpt / "report.json").exists():
            return {}
        return json.loads((self.ckpt / "report.json").read_text())

    def _save_report(self, rep):
        if self.ckpt is not None:
            _json_dump(rep, self.ckpt / "report.json")

    def report(self):
        return {
            "schema": SCHEMA,
            "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in C.flatten(self.cfg).items()},
            "inputs": {"volume_dims": list(self.volume.dims), "spacing": list(self.volume.spacing),
                       "jaws": {j: ("present" if self.ios.get(j) is not None else "skipped") for j in JAWS}},
            "stages": {k: self.stages[k] for k in STAGES if k in self.stages},
            "timing": {**{k: self.timing[k] for k in STAGES if k in self.timing},
                       "total": float(sum(self.timing.values()))},
        }


def _as_mesh(x):
    if x is None or isinstance(x, TriMesh):
        return x
    return load_mesh(x)


def run_pipeline(volume, ios_upper, ios_lower, config: C.PipelineConfig | None = None, checkpoint=None,
                 resume_from: str | None = None, ground_truth: GroundTruth | None = None) -> PipelineResult:
    """Fuse a labelled CBCT volume with per-jaw IOS crown scans.

    ``volume`` is a :class:`LabelVolume` or a path to one; IOS scans are
    meshes or paths, and either may be ``None`` (that jaw is reported as
    skipped). Raises :class:`PipelineError` naming the failing stage; the
    partial report travels on the exception and, with a checkpoint
    directory, is also written to ``report.json``.
    """
    cfg = config or C.PipelineConfig()
    vol = volume if isinstance(volume, LabelVolume) else load_volume(volume)
    ios = {"upper": _as_mesh(ios_upper), "lower": _as_mesh(ios_lower)}
    if all(v is None for v in ios.values()):
        raise PipelineError("pipeline", "at least one IOS scan is required")
    return _Run(vol, ios, cfg, checkpoint, ground_truth).run(resume_from)


def run_phantom(scene_or_dir, config: C.PipelineConfig | None = None, checkpoint=None, resume_from=None,
                jaws=JAWS) -> PipelineResult:
    """Run on a phantom scene (object or saved directory) with its ground truth."""
    scene = scene_or_dir if isinstance(scene_or_dir, PhantomScene) else load_scene(scene_or_dir)
    ios = {j: scene.gt_ios_mesh[j] if j in jaws else None for j in JAWS}
    return run_pipeline(scene.volume, ios["upper"], ios["lower"], config, checkpoint, resume_from,
                        GroundTruth.from_scene(scene))


def strip_timing(report: dict) -> dict:
    """Report without wall-clock fields, for determinism comparisons."""
    return {k: v for k, v in report.items() if k != "timing"}
