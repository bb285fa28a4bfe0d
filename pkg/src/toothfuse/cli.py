"""``toothfuse`` command line.

Exit codes: 0 success, 1 domain error (bad data, failed registration...),
2 usage error. ``--json`` prints a machine-readable result on stdout.
Settings resolve as flags > ``--config`` file > defaults, and
``--print-config`` shows the effective values.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import config as C
from .curvseg import erosion_expansion_segment, split_jaws
from .fuse import fuse_half_jaw
from .losses_check import run_checks
from .mesh import TriMesh, concat_clouds, load_cloud, load_mesh, load_ply, save_ply
from .metrics import mesh_distances, overlap_scores, surface_distances
from .phantom import PhantomConfig, generate_phantom, save_scene
from .pipeline import PipelineError, run_phantom, run_pipeline
from .reconstruct import hlo_smooth, marching_cubes
from .register import RegistrationError, register, scale_align
from .volume import LABEL_NAMES, load_volume

log = logging.getLogger("toothfuse")


class CliError(Exception):
    """Domain failure: message for stderr plus an optional JSON payload."""

    def __init__(self, message, payload=None):
        super().__init__(message)
        self.payload = payload


def _emit(args, payload, text):
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(text)


def _settings(args):
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _pipeline_config(args, flag_map=None):
    """Defaults, then --config, then --set, then dedicated flags."""
    settings = _settings(args)
    if getattr(args, "seed", None) is not None:
        settings["seed"] = str(args.seed)
    if getattr(args, "threads", None) is not None:
        settings["threads"] = str(args.threads)
    for flag, key in (flag_map or {}).items():
        v = getattr(args, flag, None)
        if v is not None:
            settings[key] = ", ".join(map(str, v)) if isinstance(v, (list, tuple)) else str(v)
    return C.load(args.config, settings)


def _label_code(name):
    for code, n in LABEL_NAMES.items():
        if name in (n, str(code)):
            return code
    raise CliError(f"unknown label {name!r}")


def _load_geometry(path):
    """Mesh when the file has faces, else a point cloud."""
    obj = load_ply(path)
    return obj if not isinstance(obj, TriMesh) or obj.n_faces else obj.to_cloud()


def _mesh_transform(mesh: TriMesh, tf):
    return TriMesh(tf.apply(mesh.vertices), mesh.faces, tf.apply_normals(mesh.normals), mesh.props, mesh.units)


# ---------------------------------------------------------------------------
# subcommands

def cmd_phantom(args):
    cfg = PhantomConfig.load(args.config) if args.config else PhantomConfig()
    for k, v in _settings(args).items():
        cfg = PhantomConfig.from_dict({**vars(cfg), k: v})
    cfg.validate()
    if args.print_config:
        print(cfg.dumps(), end="")
        return 0
    if not args.out:
        raise CliError("phantom needs --out")
    scene = generate_phantom(args.seed or 0, cfg)
    out = save_scene(scene, args.out, binary=not args.ascii)
    payload = {"out": str(out), "seed": scene.seed, "dims": list(scene.volume.dims),
               "teeth": scene.gt_tooth_count}
    _emit(args, payload, f"phantom seed {scene.seed} written to {out} (volume {scene.volume.dims})")
    return 0


def cmd_reconstruct(args):
    cfg = _pipeline_config(args, {"iterations": "smooth.iterations", "gate_deg": "smooth.normal_gate_deg"})
    if args.print_config:
        print(C.dumps(cfg), end="")
        return 0
    vol = load_volume(args.volume)
    mesh = marching_cubes(vol, _label_code(args.label), units=args.units)
    raw = {"vertices": mesh.n_vertices, "faces": mesh.n_faces, "watertight": mesh.is_watertight()}
    s = cfg.smooth
    if s.iterations > 0 and mesh.n_faces:
        mesh = hlo_smooth(mesh, s.iterations, np.deg2rad(s.normal_gate_deg), s.step, s.inflate)
    save_ply(args.out, mesh, binary=not args.ascii)
    payload = {"out": args.out, "raw": raw, "area_mm2": mesh.area(), "units": mesh.units}
    _emit(args, payload, f"{mesh.n_vertices} vertices, {mesh.n_faces} faces -> {args.out}")
    return 0


def cmd_curvseg(args):
    cfg = _pipeline_config(args, {"percentile": "segment.percentile", "order": "segment.order"})
    if args.print_config:
        print(C.dumps(cfg), end="")
        return 0
    mesh = load_mesh(args.mesh)
    s = cfg.segment
    lab = erosion_expansion_segment(mesh, s.percentile, s.order, s.min_component)
    mesh = mesh.with_props(component=lab.ids)
    payload = lab.to_json()
    if args.out:
        save_ply(args.out, mesh, binary=not args.ascii)
    if args.upper or args.lower or args.split:
        sp = split_jaws(lab, mesh, iterations=s.split_iterations, seed=cfg.seed)
        payload["jaw_split"] = sp.to_json()
        if args.upper:
            save_ply(args.upper, sp.upper, binary=not args.ascii)
        if args.lower:
            save_ply(args.lower, sp.lower, binary=not args.ascii)
    _emit(args, payload, f"{lab.count} components")
    return 0


def cmd_register(args):
    cfg = _pipeline_config(args, {"voxel": "register.voxel", "min_fitness": "register.min_fitness"})
    if args.print_config:
        print(C.dumps(cfg), end="")
        return 0
    src = _load_geometry(args.src)
    dst = _load_geometry(args.dst)
    if args.spacing:
        src = scale_align(src, args.spacing)
    try:
        tf, rep0, rep1 = register(src, dst, C.registration_config(cfg))
    except RegistrationError as exc:
        payload = {"success": False, "error": str(exc),
                   "global": exc.report.to_json() if exc.report is not None else None}
        raise CliError(f"registration failed: {exc}", payload) from exc
    if args.out:
        tf.save(args.out)
    if args.out_mesh:
        moved = _mesh_transform(src, tf) if isinstance(src, TriMesh) else src.transformed(tf)
        save_ply(args.out_mesh, moved, binary=not args.ascii)
    payload = {"success": True, "global": rep0.to_json(), "icp": rep1.to_json()}
    _emit(args, payload, f"fitness {rep1.fitness:.4f}, rmse {rep1.inlier_rmse:.4f} mm")
    return 0


def cmd_fuse(args):
    cfg = _pipeline_config(args, {"removal_fraction": "fuse.removal_fraction"})
    if args.print_config:
        print(C.dumps(cfg), end="")
        return 0
    f = cfg.fuse
    ios = load_cloud(args.ios)
    cbct = load_cloud(args.cbct)
    reference = concat_clouds([ios] + [load_cloud(p) for p in args.reference or []])
    fused, stats = fuse_half_jaw(cbct, ios, reference, f.removal_fraction, f.default_fraction, f.dbscan_eps,
                                 f.dbscan_min_pts, f.min_cluster, f.radius_factors, f.smooth_iterations,
                                 f.smooth_step)
    save_ply(args.out, fused, binary=not args.ascii)
    payload = {"out": args.out, **stats}
    _emit(args, payload, f"removed {stats['removal']['removed']} CBCT points, fused mesh {fused.n_faces} faces"
                         f" -> {args.out}")
    return 0


def cmd_metrics(args):
    pred = load_mesh(args.pred)
    gt = load_mesh(args.gt)
    payload = {}
    if pred.n_faces and gt.n_faces:
        payload["surface"] = mesh_distances(pred, gt, args.mode, args.density, args.seed or 0).to_json()
    else:
        payload["surface"] = surface_distances(pred.vertices, gt.vertices).to_json()
    key = args.label_key
    if key in pred.props and key in gt.props:
        if pred.n_vertices == gt.n_vertices and np.array_equal(pred.vertices, gt.vertices):
            pl = pred.props[key]
        else:
            _, nn = cKDTree(pred.vertices).query(gt.vertices)
            pl = pred.props[key][nn]
        payload["overlap"] = overlap_scores(pl, gt.props[key]).to_json()
    s = payload["surface"]
    text = f"ASSD {s['assd']:.4f}  CD {s['chamfer']:.4f}  HD {s['hausdorff']:.4f} mm"
    if "overlap" in payload:
        o = payload["overlap"]
        text += f"\nDice {o['dice']:.4f}  IoU {o['iou']:.4f}  Recall {o['recall']:.4f}  Precision {o['precision']:.4f}"
    _emit(args, payload, text)
    return 0


def cmd_losses_check(args):
    rep = run_checks(args.batches, args.seed or 0, args.lovasz_pixels)
    lines = [f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}" for c in rep["checks"]]
    _emit(args, rep, "\n".join(lines))
    if not rep["passed"]:
        raise CliError("loss checks failed")
    return 0


def cmd_pipeline(args):
    cfg = _pipeline_config(args)
    if args.print_config:
        print(C.dumps(cfg), end="")
        return 0
    try:
        if args.phantom:
            jaws = [j for j in ("upper", "lower") if not (j == "lower" and args.skip_lower)]
            res = run_phantom(args.phantom, cfg, args.checkpoint, args.resume_from, jaws)
        else:
            if not args.volume or not (args.ios_upper or args.ios_lower):
                raise CliError("pipeline needs --phantom, or --volume with at least one IOS scan")
            res = run_pipeline(args.volume, args.ios_upper, args.ios_lower, cfg, args.checkpoint,
                               args.resume_from)
    except PipelineError as exc:
        raise CliError(str(exc), exc.report) from exc
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for jaw, mesh in res.fused.items():
            save_ply(out / f"fused_{jaw}.ply", mesh, binary=not args.ascii)
        (out / "report.json").write_text(json.dumps(res.report, indent=2, sort_keys=True) + "\n")
    stages = res.report["stages"]
    text = "\n".join(f"{k:12s} {v['status']}" for k, v in stages.items())
    _emit(args, res.report, text)
    return 0


# ---------------------------------------------------------------------------
# parser

def _common(p, seed=True, config=True):
    p.add_argument("--json", action="store_true", help="machine-readable output on stdout")
    p.add_argument("--threads", type=int, help="worker threads (default: logical cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    if seed:
        p.add_argument("--seed", type=int, help="random seed")
    if config:
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
        p.add_argument("--print-config", action="store_true", help="print effective settings and exit")
    p.add_argument("--ascii", action="store_true", help="write text PLY instead of binary")


def build_parser():
    ap = argparse.ArgumentParser(prog="toothfuse", description="CBCT / intraoral scan tooth fusion")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic scene with ground truth")
    _common(p)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("reconstruct", help="label volume -> smoothed surface mesh")
    _common(p, seed=False)
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--label", default="tooth")
    p.add_argument("--units", choices=("mm", "voxel"), default="mm")
    p.add_argument("--iterations", type=int, help="smoothing iterations (0 disables)")
    p.add_argument("--gate-deg", type=float, help="smoothing normal gate in degrees")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("curvseg", help="curvature segmentation and jaw split")
    _common(p)
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", help="mesh with per-vertex component ids")
    p.add_argument("--percentile", type=float, help="top-curvature percentile M")
    p.add_argument("--order", type=int, help="neighbour order l")
    p.add_argument("--split", action="store_true", help="also split into jaws")
    p.add_argument("--upper", help="write the upper half jaw here")
    p.add_argument("--lower", help="write the lower half jaw here")
    p.set_defaults(func=cmd_curvseg)

    p = sub.add_parser("register", help="rigidly align an IOS scan onto a CBCT half jaw")
    _common(p)
    p.add_argument("--src", required=True)
    p.add_argument("--dst", required=True)
    p.add_argument("--spacing", type=float, nargs=3, help="scale a voxel-unit source to mm")
    p.add_argument("--voxel", type=float, help="global registration voxel size (mm)")
    p.add_argument("--min-fitness", type=float)
    p.add_argument("--out", help="write the 4x4 transform here")
    p.add_argument("--out-mesh", help="write the registered source here")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("fuse", help="replace the CBCT crown by the registered IOS crown")
    _common(p)
    p.add_argument("--ios", required=True, help="registered IOS crowns of this jaw")
    p.add_argument("--cbct", required=True, help="CBCT half-jaw surface")
    p.add_argument("--reference", action="append", help="extra registered IOS scans used for crown removal")
    p.add_argument("--removal-fraction", type=float, help="fixed removal fraction (default adaptive)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("metrics", help="surface distances and overlap scores")
    _common(p, config=False)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mode", choices=("sample", "triangle"), default="sample")
    p.add_argument("--density", type=float, default=20.0, help="samples per mm^2")
    p.add_argument("--label-key", default="label")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("losses-check", help="run loss oracles and gradient checks")
    _common(p, config=False)
    p.add_argument("--batches", type=int, default=50)
    p.add_argument("--lovasz-pixels", type=int, default=6)
    p.set_defaults(func=cmd_losses_check)

    p = sub.add_parser("pipeline", help="end-to-end fusion")
    _common(p)
    p.add_argument("--phantom", help="phantom scene directory (inputs and ground truth)")
    p.add_argument("--skip-lower", action="store_true", help="with --phantom, drop the lower IOS scan")
    p.add_argument("--volume")
    p.add_argument("--ios-upper")
    p.add_argument("--ios-lower")
    p.add_argument("--checkpoint", help="checkpoint directory")
    p.add_argument("--resume-from", choices=("reconstruct", "smooth", "curvseg", "split", "register", "fuse",
                                             "metrics"))
    p.add_argument("--out", help="directory for fused meshes and report.json")
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except C.ConfigError as exc:
        print(f"toothfuse: {exc}", file=sys.stderr)
        return 2
    except CliError as exc:
        if args.json and exc.payload is not None:
            print(json.dumps(exc.payload, indent=2, sort_keys=True))
        print(f"toothfuse: {exc}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"toothfuse: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
