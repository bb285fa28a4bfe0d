"""Configuration, command line and pipeline orchestration."""
import json

import numpy as np
import pytest

from toothfuse import config as C
from toothfuse.cli import main
from toothfuse.mesh import PointCloud, icosphere, load_mesh, save_ply
from toothfuse.phantom import PhantomConfig
from toothfuse.pipeline import PipelineError, run_phantom, run_pipeline
from toothfuse.volume import LabelVolume


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    assert main(["phantom", "--seed", "0", "--out", str(d / "s")]) == 0
    return d / "s"


# -- configuration -------------------------------------------------------------

def test_config_round_trip_and_precedence(tmp_path):
    cfg = C.PipelineConfig()
    again = C.apply(C.PipelineConfig(), C.parse_text(C.dumps(cfg)))
    assert C.dumps(again) == C.dumps(cfg)
    f = tmp_path / "c.cfg"
    f.write_text("# comment\nregister.voxel = 0.7\nsmooth.iterations = 3\nfuse.removal_fraction = 0.3\n")
    cfg = C.load(f, {"register.voxel": "0.9"})
    assert cfg.register.voxel == 0.9 and cfg.smooth.iterations == 3 and cfg.fuse.removal_fraction == 0.3
    assert C.apply(cfg, {"fuse.removal_fraction": "none"}).fuse.removal_fraction is None
    assert C.apply(cfg, {"fuse.radius_factors": "1, 3"}).fuse.radius_factors == (1.0, 3.0)


def test_config_errors(tmp_path):
    with pytest.raises(C.ConfigError):
        C.load(None, {"nope.key": "1"})
    with pytest.raises(C.ConfigError):
        C.load(None, {"register.voxel": "abc"})
    (tmp_path / "bad.cfg").write_text("just words\n")
    with pytest.raises(C.ConfigError):
        C.load(tmp_path / "bad.cfg")


def test_seed_reaches_registration():
    cfg = C.load(None, {"seed": "7"})
    assert C.registration_config(cfg).seed == 7
    assert "register.seed" not in C.dumps(cfg)


# -- command line ------------------------------------------------------------

def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2
    code, _, err = run(capsys, "pipeline", "--set", "bogus.key=1", "--print-config")
    assert code == 2 and "bogus.key" in err


def test_print_config_precedence(capsys, tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("register.voxel = 0.7\nseed = 3\n")
    code, out, _ = run(capsys, "register", "--src", "x", "--dst", "y", "--config", f, "--set", "seed=4",
                       "--voxel", "0.8", "--print-config")
    assert code == 0
    lines = dict(line.split(" = ", 1) for line in out.strip().splitlines())
    assert lines["register.voxel"] == "0.8" and lines["seed"] == "4"


def test_phantom_deterministic(capsys, tmp_path):
    for name in ("a", "b"):
        code, out, _ = run(capsys, "phantom", "--seed", 7, "--out", tmp_path / name, "--json")
        assert code == 0 and json.loads(out)["teeth"] == {"upper": 8, "lower": 8}
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    code, out, _ = run(capsys, "phantom", "--set", "bite_gap=1.5", "--print-config")
    (tmp_path / "p.cfg").write_text(out)
    assert code == 0 and PhantomConfig.load(tmp_path / "p.cfg").bite_gap == 1.5


def test_reconstruct_and_curvseg(capsys, scene_dir, tmp_path):
    code, out, _ = run(capsys, "reconstruct", "--volume", scene_dir / "volume.hdr", "--out", tmp_path / "t.ply",
                       "--json")
    assert code == 0 and json.loads(out)["raw"]["watertight"]
    code, out, _ = run(capsys, "curvseg", "--mesh", tmp_path / "t.ply", "--split", "--upper", tmp_path / "u.ply",
                       "--json")
    rep = json.loads(out)
    assert code == 0 and rep["count"] >= 15
    assert sorted(set(rep["jaw_split"]["jaw_of_component"])) == [0, 1]
    assert load_mesh(tmp_path / "u.ply").n_faces > 0


def test_register_negative_exits_1(capsys, tmp_path):
    rng = np.random.default_rng(0)
    src = icosphere(3)
    save_ply(tmp_path / "src.ply", src.with_vertices(src.vertices * 8))
    pts = rng.uniform(-8, 8, size=(2000, 3))
    nrm = rng.normal(size=pts.shape)
    save_ply(tmp_path / "dst.ply", PointCloud(pts, nrm / np.linalg.norm(nrm, axis=1, keepdims=True)))
    code, out, err = run(capsys, "register", "--src", tmp_path / "src.ply", "--dst", tmp_path / "dst.ply",
                         "--set", "register.max_iterations=2000", "--json")
    assert code == 1 and "registration failed" in err
    assert json.loads(out)["success"] is False


def test_metrics_json(capsys, tmp_path):
    m = icosphere(3).with_props(label=np.arange(642) % 4)
    save_ply(tmp_path / "m.ply", m)
    code, out, _ = run(capsys, "metrics", "--pred", tmp_path / "m.ply", "--gt", tmp_path / "m.ply", "--json")
    rep = json.loads(out)
    assert code == 0 and rep["surface"]["hausdorff"] == 0.0 and rep["overlap"]["dice"] == 1.0


def test_losses_check_small(capsys):
    code, out, _ = run(capsys, "losses-check", "--batches", 3, "--lovasz-pixels", 3, "--json")
    rep = json.loads(out)
    assert code == 0 and rep["passed"]


def test_missing_file_exits_1(capsys, tmp_path):
    code, _, err = run(capsys, "reconstruct", "--volume", tmp_path / "none.hdr", "--out", tmp_path / "o.ply")
    assert code == 1 and err


# -- pipeline ----------------------------------------------------------------

def test_pipeline_cli_skip_lower(capsys, scene_dir, tmp_path):
    code, out, _ = run(capsys, "pipeline", "--phantom", scene_dir, "--skip-lower", "--out", tmp_path / "o",
                       "--json")
    rep = json.loads(out)
    assert code == 0
    assert rep["stages"]["register"]["detail"]["lower"]["status"] == "skipped"
    assert rep["stages"]["fuse"]["detail"]["lower"]["status"] == "skipped"
    assert rep["stages"]["metrics"]["detail"]["upper"]["assd"] <= 0.25
    assert (tmp_path / "o" / "fused_upper.ply").exists() and not (tmp_path / "o" / "fused_lower.ply").exists()
    assert json.loads((tmp_path / "o" / "report.json").read_text())["stages"] == rep["stages"]


@pytest.mark.parametrize("solid,stage", [(False, "reconstruct"), (True, "split")])
def test_pipeline_error_names_stage(tmp_path, solid, stage):
    lab = np.zeros((24, 24, 24), dtype=np.uint8)
    if solid:
        g = np.indices(lab.shape) - 11.5
        lab[np.sqrt((g ** 2).sum(0)) <= 8] = 1  # a single tooth cannot be split into jaws
    vol = LabelVolume(lab, (0.25, 0.25, 0.25))
    with pytest.raises(PipelineError) as exc:
        run_pipeline(vol, icosphere(2), None, checkpoint=tmp_path / "ck")
    assert exc.value.stage == stage and str(exc.value).startswith(f"{stage}: ")
    assert not exc.value.message.startswith(f"{stage}:")
    rep = json.loads((tmp_path / "ck" / "report.json").read_text())
    assert rep["stages"][stage]["status"] == "failed"
    with pytest.raises(PipelineError):
        run_pipeline(vol, None, None)


def test_resume_needs_checkpoint(scene_dir, tmp_path):
    with pytest.raises(PipelineError):
        run_phantom(scene_dir, resume_from="fuse")
    with pytest.raises(PipelineError):
        run_phantom(scene_dir, checkpoint=tmp_path / "empty", resume_from="fuse")
