import json

import numpy as np
import pytest

from depthforge.cli import main
from depthforge.errors import ConfigError, StageError
from depthforge.geometry import PointCloud, TriangleMesh
from depthforge.io import read_mesh, read_point_cloud, read_trajectory, write_mesh, write_point_cloud
from depthforge.pipeline import INTERMEDIATE_NAMES, PipelineConfig, parse_grid, reconstruct, run_pipeline
from depthforge.synth import uv_sphere
from conftest import sphere_points


@pytest.fixture
def sphere_files(tmp_path):
    rng = np.random.default_rng(3)
    p, n = sphere_points(4000, rng=rng)
    p = p + rng.normal(0, 0.5, p.shape)
    cloud_path = tmp_path / "cloud.ply"
    write_point_cloud(cloud_path, PointCloud(p, n))
    unit = uv_sphere(128, 64)
    gt_path = tmp_path / "gt.ply"
    write_mesh(gt_path, TriangleMesh(unit.vertices * 50.0, unit.triangles))
    return cloud_path, gt_path


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, (json.loads(out) if code == 0 else None)


# ---------------------------------------------------------------- config
def test_config_text_roundtrip():
    cfg = PipelineConfig(input="a.ply", output="b.ply", radius=2.5, icp=False, resolution=48)
    again = PipelineConfig.from_text(cfg.to_text())
    assert again == cfg


def test_config_comments_and_types():
    cfg = PipelineConfig.from_text("# header\nradius = 3  # mm\nicp = false\nresolution = 32\nmls_bandwidth = none\n")
    assert cfg.radius == 3.0 and cfg.icp is False and cfg.resolution == 32 and cfg.mls_bandwidth is None


def test_config_unknown_key_names_key_and_line():
    with pytest.raises(ConfigError, match=r"cfg:2: unknown config key 'voxell_size'"):
        PipelineConfig.from_text("radius = 1\nvoxell_size = 2\n", "cfg")
    with pytest.raises(ConfigError, match="unknown config key 'bogus'"):
        PipelineConfig.from_dict({"bogus": 1})


@pytest.mark.parametrize("text", ["resolution = 4", "padding = 1", "preconditioner = jacobi", "radius = -1",
                                  "eval_grid = 10by10", "resolution = many"])
def test_config_rejects_bad_values(text):
    with pytest.raises(ConfigError):
        PipelineConfig.from_text(text)


def test_parse_grid():
    assert parse_grid("200x150") == (200, 150)
    with pytest.raises(ConfigError):
        parse_grid("0x10")


# ---------------------------------------------------------------- pipeline
def test_reconstruct_in_memory(sphere_cloud):
    mesh, clouds, report = reconstruct(sphere_cloud, PipelineConfig(resolution=48))
    assert mesh.is_closed()
    assert set(clouds) >= {"radius", "voxel", "mls"}
    assert report.counts["input_points"] == len(sphere_cloud)
    assert all(v >= 0 for v in report.timings_ms.values())


def test_pipeline_keeps_exactly_six_intermediates(tmp_path, sphere_files):
    cloud_path, _ = sphere_files
    cfg = PipelineConfig(input=str(cloud_path), output=str(tmp_path / "out" / "mesh.ply"),
                         keep_intermediates=True, intermediates_dir=str(tmp_path / "inter"))
    report = run_pipeline(cfg)
    files = sorted(p.name for p in (tmp_path / "inter").iterdir())
    assert files == sorted(INTERMEDIATE_NAMES.values())
    assert report.status == "ok"
    assert read_mesh(tmp_path / "out" / "mesh.ply").is_closed()
    assert json.loads((tmp_path / "out" / "mesh.json").read_text())["status"] == "ok"


def test_pipeline_failure_still_writes_report(tmp_path):
    p, n = sphere_points(60)
    write_point_cloud(tmp_path / "tiny.ply", PointCloud(p, n))
    cfg = PipelineConfig(input=str(tmp_path / "tiny.ply"), output=str(tmp_path / "mesh.ply"), radius=200.0)
    with pytest.raises(StageError) as exc:
        run_pipeline(cfg)
    doc = json.loads((tmp_path / "mesh.json").read_text())
    assert doc["status"] == "failed"
    assert doc["failed_stage"] == exc.value.stage
    assert doc["error"]
    assert not (tmp_path / "mesh.ply").exists()


# ---------------------------------------------------------------- CLI
def test_cli_exit_codes(tmp_path, capsys, sphere_files):
    cloud_path, _ = sphere_files
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("voxell_size = 2\n")
    assert main(["pipeline", "--config", str(bad_cfg), str(cloud_path), str(tmp_path / "m.ply")]) == 2
    assert "voxell_size" in capsys.readouterr().err
    assert main(["filter", str(tmp_path / "missing.ply"), str(tmp_path / "o.ply")]) == 3
    broken = tmp_path / "broken.ply"
    broken.write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nend_header\n1\n")
    assert main(["filter", str(broken), str(tmp_path / "o.ply")]) == 3
    p, n = sphere_points(60)
    write_point_cloud(tmp_path / "tiny.ply", PointCloud(p, n))
    assert main(["poisson", str(tmp_path / "tiny.ply"), str(tmp_path / "o.ply")]) == 4


def test_cli_filter_mls_poisson_chain(tmp_path, capsys, sphere_files):
    cloud_path, _ = sphere_files
    code, rep = run_cli(capsys, "filter", cloud_path, tmp_path / "f.ply")
    assert code == 0 and rep["counts"]["after_voxel"] <= rep["counts"]["input_points"]
    code, rep = run_cli(capsys, "mls", "--bandwidth", "auto", tmp_path / "f.ply", tmp_path / "m.ply")
    assert code == 0 and rep["counts"]["failures"] == 0
    code, rep = run_cli(capsys, "poisson", "--resolution", 48, "--report", tmp_path / "p.json",
                        tmp_path / "m.ply", tmp_path / "mesh.ply")
    assert code == 0 and rep["metrics"]["residual"] < 1e-8
    assert json.loads((tmp_path / "p.json").read_text()) == rep
    assert rep["schema_version"] == 1


def test_cli_pipeline_eval_and_echoed_config(tmp_path, capsys, sphere_files):
    cloud_path, gt_path = sphere_files
    code, rep = run_cli(capsys, "pipeline", "--gt-mesh", gt_path, cloud_path, tmp_path / "a" / "mesh.ply")
    assert code == 0
    assert rep["metrics"]["surface_rmsd"] < 1.5
    # the echoed config reproduces the run
    cfg = PipelineConfig.from_dict(rep["config"] | {"output": str(tmp_path / "b" / "mesh.ply"), "report": None})
    (tmp_path / "echo.cfg").write_text(cfg.to_text())
    code, again = run_cli(capsys, "pipeline", "--config", tmp_path / "echo.cfg")
    assert code == 0
    assert again["metrics"] == rep["metrics"]
    assert again["counts"] == rep["counts"]


def test_cli_synth_eval_traj_and_depth(tmp_path, capsys):
    out = tmp_path / "scene"
    code, rep = run_cli(capsys, "synth", "--preset", "sphere", "--frames", 20, "--points-per-frame", 10,
                        "--scale", 0.5, "--out-dir", out)
    assert code == 0 and rep["counts"]["points"] == 200
    for name in ("gt_mesh.ply", "gt_traj.csv", "cloud.ply", "est_traj.csv", "intrinsics.json", "scene.json"):
        assert (out / name).exists()
    assert len(read_point_cloud(out / "cloud.ply")) == 200
    code, rep = run_cli(capsys, "eval-traj", out / "est_traj.csv", out / "gt_traj.csv")
    assert code == 0 and rep["metrics"]["rmse"] < 1e-6
    assert rep["metrics"]["scale"] == pytest.approx(2.0, rel=1e-9)
    code, rep = run_cli(capsys, "depth", "--intrinsics", out / "intrinsics.json", "--trajectory",
                        out / "gt_traj.csv", "--pose", 3, "--out", tmp_path / "d.pgm", out / "gt_mesh.ply")
    assert code == 0 and rep["counts"]["covered_pixels"] > 0
    assert 200 - 50 - 1 <= rep["metrics"]["min_depth"] <= rep["metrics"]["max_depth"] <= 200 + 1
    assert main(["depth", "--intrinsics", str(out / "intrinsics.json"), "--trajectory", str(out / "gt_traj.csv"),
                 "--pose", "999", str(out / "gt_mesh.ply")]) == 2
    assert len(read_trajectory(out / "gt_traj.csv")) == 20


def test_cli_eval_surf(tmp_path, capsys, sphere_files):
    _, gt_path = sphere_files
    gt = read_mesh(gt_path)
    write_mesh(tmp_path / "shifted.ply", TriangleMesh(gt.vertices + [1.0, 0.5, 0], gt.triangles))
    code, rep = run_cli(capsys, "eval-surf", "--grid", "60x60", "--distance-ply", tmp_path / "d.ply",
                        tmp_path / "shifted.ply", gt_path)
    assert code == 0
    assert rep["metrics"]["surface_rmsd"] < 0.05
    assert (tmp_path / "d.ply").exists()
    code, rep = run_cli(capsys, "eval-surf", "--no-icp", "--grid", "60x60", tmp_path / "shifted.ply", gt_path)
    assert rep["metrics"]["surface_rmsd"] > 0.1


def test_cli_threads_sets_environment(tmp_path, capsys, sphere_files, monkeypatch):
    monkeypatch.delenv("DEPTHFORGE_THREADS", raising=False)
    cloud_path, _ = sphere_files
    code, _ = run_cli(capsys, "--threads", 1, "filter", cloud_path, tmp_path / "f.ply")
    import os
    assert code == 0 and os.environ["DEPTHFORGE_THREADS"] == "1"
