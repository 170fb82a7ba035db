"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric or stage failure.
Every command prints its JSON report to stdout; ``--report`` also writes it to a file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DepthforgeError, FormatError, ParameterError, StageError
from .eval import align_trajectories_report, distance_report, icp_register, rasterize_depth
from .eval import surface_rmsd, write_distance_ply
from .filters import (
    RadiusFilterParams,
    VoxelFilterParams,
    default_filter_params,
    radius_outlier_removal,
    voxel_downsample,
)
from .geometry import apply_transform
from .io import (
    read_intrinsics,
    read_mesh,
    read_point_cloud,
    read_trajectory,
    write_intrinsics,
    write_mesh,
    write_point_cloud,
    write_trajectory,
)
from .mls import (
    DEFAULT_DEGREE,
    DEFAULT_K,
    KernelSpec,
    MlsParams,
    estimate_normals,
    mls_smooth,
    orient_normals,
    orient_normals_outward,
)
from .pipeline import SCHEMA_VERSION, PipelineConfig, parse_grid, run_pipeline
from .poisson import poisson_surface
from .study import reproduce_study
from .synth import PRESETS, CorruptionSpec, build_scene

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return exit_code_for(exc.cause) if isinstance(exc.cause, (OSError, FormatError)) else EXIT_NUMERIC
    if isinstance(exc, (ConfigError, ParameterError)):
        return EXIT_CONFIG
    if isinstance(exc, (OSError, FormatError)):
        return EXIT_IO
    return EXIT_NUMERIC


def _emit(report: dict, path=None) -> None:
    report = {"schema_version": SCHEMA_VERSION, "tool": "depthforge", "version": __version__} | report
    text = json.dumps(report, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    print(text)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> dict:
    spec = PRESETS[args.preset](seed=args.seed, points_per_frame=args.points_per_frame,
                                skip_frames=args.skip_frames)
    spec = replace(spec, orbit=replace(spec.orbit, n_frames=args.frames, fps=args.fps))
    if args.mesh:
        spec = replace(spec, primitive="mesh-file", mesh_path=args.mesh)
    corruption = CorruptionSpec(args.sigma_ray, args.sigma_lat, args.outliers, args.scale, args.seed)
    scene = build_scene(spec, corruption, args.pose_sigma)
    est = scene.estimated_trajectory
    if spec.skip_frames:
        est = est.subset(est.frame_ids >= spec.skip_frames)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_mesh(out / "gt_mesh.ply", scene.mesh)
    write_trajectory(out / "gt_traj.csv", scene.trajectory)
    write_point_cloud(out / "cloud.ply", scene.cloud)
    write_trajectory(out / "est_traj.csv", est)
    write_intrinsics(out / "intrinsics.json", spec.intrinsics)
    doc = {
        "scene": spec.to_dict(),
        "corruption": corruption.__dict__.copy(),
        "pose_sigma": args.pose_sigma,
        "applied_transform": scene.transform.to_dict(),
        "counts": {"points": len(scene.cloud), "frames": len(scene.trajectory), "mesh_triangles": len(scene.mesh)},
    }
    (out / "scene.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def cmd_filter(args) -> dict:
    cloud = read_point_cloud(args.input)
    if args.radius is None or args.voxel is None:
        rp, vp = default_filter_params(cloud)
    radius = args.radius if args.radius is not None else rp.radius
    voxel = args.voxel if args.voxel is not None else vp.voxel_size
    c1 = radius_outlier_removal(cloud, RadiusFilterParams(radius, args.min_neighbors))
    c2 = voxel_downsample(c1, VoxelFilterParams(voxel))
    write_point_cloud(args.output, c2)
    return {
        "parameters": {"radius": radius, "min_neighbors": args.min_neighbors, "voxel_size": voxel},
        "counts": {"input_points": len(cloud), "after_radius": len(c1), "after_voxel": len(c2)},
        "outputs": {"cloud": str(args.output)},
    }


def cmd_mls(args) -> dict:
    cloud = read_point_cloud(args.input)
    estimated = cloud.normals is None
    if estimated:
        cloud = estimate_normals(cloud, args.normal_k)
        if args.trajectory:
            cloud = orient_normals(cloud, read_trajectory(args.trajectory))
        else:
            cloud = orient_normals_outward(cloud)
    if args.bandwidth is None:
        params = MlsParams.auto(cloud, args.degree, args.k)
    else:
        params = MlsParams(KernelSpec(args.bandwidth), args.degree, args.k)
    out, rep = mls_smooth(cloud, params)
    write_point_cloud(args.output, out)
    return {
        "parameters": {"bandwidth": params.kernel.bandwidth, "degree": params.poly_degree, "k": params.k,
                       "normals_estimated": estimated},
        "counts": {"points": len(out), "failures": rep.failures},
        "metrics": {"mean_displacement": rep.mean_displacement, "max_displacement": rep.max_displacement},
        "outputs": {"cloud": str(args.output)},
    }


def cmd_poisson(args) -> dict:
    cloud = read_point_cloud(args.input)
    res = poisson_surface(cloud, args.resolution, args.padding, args.preconditioner)
    write_mesh(args.output, res.mesh)
    return {
        "parameters": {"resolution": args.resolution, "padding": args.padding,
                       "preconditioner": res.solve.preconditioner},
        "metrics": {"residual": res.solve.residual, "iterations": res.solve.iterations, "isovalue": res.isovalue},
        "counts": {"components": res.components, "vertices": len(res.mesh.vertices),
                   "triangles": len(res.mesh.triangles)},
        "outputs": {"mesh": str(args.output)},
    }


def cmd_pipeline(args) -> dict:
    cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    overrides = {
        "input": args.input,
        "output": args.output,
        "report": args.report,
        "trajectory": args.trajectory,
        "gt_mesh": args.gt_mesh,
        "gt_trajectory": args.gt_trajectory,
    }
    data = cfg.to_dict() | {k: v for k, v in overrides.items() if v is not None}
    if args.keep_intermediates:
        data["keep_intermediates"] = True
    cfg = PipelineConfig.from_dict(data)
    report = run_pipeline(cfg)
    args.report = None  # run_pipeline already wrote it
    return report.to_dict()


def cmd_eval_surf(args) -> dict:
    recon = read_mesh(args.recon)
    gt = read_mesh(args.gt)
    m, n = parse_grid(args.grid)
    out = {"parameters": {"grid": [m, n], "bins": args.bins, "icp": args.icp}, "metrics": {}, "counts": {}}
    if args.icp:
        icp = icp_register(recon.vertices, gt, args.icp_max_iters, args.icp_tol)
        recon = apply_transform(icp.transform, recon)
        out["metrics"]["icp_rms"] = icp.rms
        out["parameters"]["icp_transform"] = icp.transform.to_dict()
    rmsd, grid = surface_rmsd(recon, gt, m, n)
    dr = distance_report(recon, gt, args.bins)
    out["metrics"]["surface_rmsd"] = rmsd
    out["metrics"]["distance"] = dr.summary
    out["metrics"]["distance_histogram"] = {"edges": dr.bin_edges.tolist(), "counts": dr.counts.tolist()}
    out["counts"] = {"valid_samples": int(grid.valid.sum()), "invalid_samples": grid.invalid_count}
    if args.distance_ply:
        write_distance_ply(args.distance_ply, recon, dr)
        out["outputs"] = {"distance_map": str(args.distance_ply)}
    return out


def cmd_eval_traj(args) -> dict:
    est = read_trajectory(args.est)
    gt = read_trajectory(args.gt)
    ta = align_trajectories_report(est, gt)
    return {
        "metrics": {"rmse": ta.rmse, "scale": ta.transform.scale},
        "parameters": {"transform": ta.transform.to_dict()},
        "counts": {"matched": ta.matched, "unmatched_est": ta.unmatched_est, "unmatched_gt": ta.unmatched_gt},
    }


def cmd_depth(args) -> dict:
    mesh = read_mesh(args.mesh)
    intr = read_intrinsics(args.intrinsics)
    traj = read_trajectory(args.trajectory)
    try:
        pose = traj.pose(args.pose)
    except KeyError:
        raise ConfigError(f"frame id {args.pose} is not in {args.trajectory}") from None
    dm = rasterize_depth(mesh, intr, pose)
    out = Path(args.out) if args.out else Path(args.mesh).with_name(f"depth_{args.pose:06d}.pgm")
    pgm, raw = dm.save(out)
    covered = dm.covered
    return {
        "parameters": {"frame_id": pose.frame_id, "intrinsics": intr.to_dict()},
        "counts": {"covered_pixels": int(covered.sum()), "pixels": int(covered.size)},
        "metrics": {
            "min_depth": float(dm.depth[covered].min()) if covered.any() else 0.0,
            "max_depth": float(dm.depth[covered].max()) if covered.any() else 0.0,
        },
        "outputs": {"pgm": str(pgm), "raw": str(raw)},
    }


def cmd_reproduce(args) -> dict:
    return reproduce_study(args.out_dir, args.seed, args.frames, args.points_per_frame, args.pose_sigma)


# ---------------------------------------------------------------- parser


def _bandwidth(text: str):
    return None if text == "auto" else float(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="depthforge", description="Surface reconstruction from sparse SLAM clouds.")
    p.add_argument("--version", action="version", version=f"depthforge {__version__}")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads for neighbour searches (default: DEPTHFORGE_THREADS or all cores)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene, trajectory and corrupted cloud")
    s.add_argument("--preset", choices=sorted(PRESETS), default="liver")
    s.add_argument("--mesh", help="use this PLY mesh as the scene instead of the preset primitive")
    s.add_argument("--frames", type=int, default=900)
    s.add_argument("--fps", type=float, default=30.0)
    s.add_argument("--points-per-frame", type=int, default=40)
    s.add_argument("--skip-frames", type=int, default=0, help="frames withheld before SLAM initialises")
    s.add_argument("--sigma-ray", type=float, default=2.0)
    s.add_argument("--sigma-lat", type=float, default=0.0)
    s.add_argument("--outliers", type=float, default=0.05)
    s.add_argument("--scale", type=float, default=0.37)
    s.add_argument("--pose-sigma", type=float, default=0.0, help="3D std of camera-centre noise, mm")
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("filter", help="radius outlier removal followed by voxel downsampling")
    s.add_argument("--radius", type=float)
    s.add_argument("--min-neighbors", type=int, default=5)
    s.add_argument("--voxel", type=float)
    s.add_argument("--report")
    s.add_argument("input")
    s.add_argument("output")
    s.set_defaults(func=cmd_filter)

    s = sub.add_parser("mls", help="Moving Least Squares projection")
    s.add_argument("--bandwidth", type=_bandwidth, default=None, help="kernel bandwidth in mm, or 'auto'")
    s.add_argument("--degree", type=int, default=DEFAULT_DEGREE)
    s.add_argument("--k", type=int, default=DEFAULT_K)
    s.add_argument("--normal-k", type=int, default=12)
    s.add_argument("--trajectory", help="camera trajectory used to orient estimated normals")
    s.add_argument("--report")
    s.add_argument("input")
    s.add_argument("output")
    s.set_defaults(func=cmd_mls)

    s = sub.add_parser("poisson", help="Poisson reconstruction of an oriented cloud")
    s.add_argument("--resolution", type=int, default=64)
    s.add_argument("--padding", type=int, default=4)
    s.add_argument("--preconditioner", choices=("fst", "none"), default="fst")
    s.add_argument("--report")
    s.add_argument("input")
    s.add_argument("output")
    s.set_defaults(func=cmd_poisson)

    s = sub.add_parser("pipeline", help="run the full reconstruction (and optional evaluation)")
    s.add_argument("--config", help="flat 'key = value' config file")
    s.add_argument("--keep-intermediates", action="store_true")
    s.add_argument("--trajectory")
    s.add_argument("--gt-mesh")
    s.add_argument("--gt-trajectory")
    s.add_argument("--report")
    s.add_argument("input", nargs="?")
    s.add_argument("output", nargs="?")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("eval-surf", help="RMSD and signed distance map against a ground-truth mesh")
    s.add_argument("--grid", default="200x200")
    s.add_argument("--bins", type=int, default=50)
    s.add_argument("--no-icp", dest="icp", action="store_false")
    s.add_argument("--icp-max-iters", type=int, default=100)
    s.add_argument("--icp-tol", type=float, default=1e-4)
    s.add_argument("--distance-ply")
    s.add_argument("--report")
    s.add_argument("recon")
    s.add_argument("gt")
    s.set_defaults(func=cmd_eval_surf)

    s = sub.add_parser("eval-traj", help="similarity alignment and RMSE of camera centres")
    s.add_argument("--report")
    s.add_argument("est")
    s.add_argument("gt")
    s.set_defaults(func=cmd_eval_traj)

    s = sub.add_parser("depth", help="render a depth map of a mesh from one trajectory pose")
    s.add_argument("--intrinsics", required=True)
    s.add_argument("--trajectory", required=True)
    s.add_argument("--pose", type=int, required=True, help="frame id in the trajectory")
    s.add_argument("--out", help="PGM path (a float32 .f32 sidecar is written next to it)")
    s.add_argument("--report")
    s.add_argument("mesh")
    s.set_defaults(func=cmd_depth)

    s = sub.add_parser("reproduce-study", help="synthetic ground-truth study end to end")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--frames", type=int, default=900)
    s.add_argument("--points-per-frame", type=int, default=40)
    s.add_argument("--pose-sigma", type=float, default=0.0)
    s.add_argument("--report")
    s.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            parser.error("--threads must be >= 1")
        os.environ["DEPTHFORGE_THREADS"] = str(args.threads)
    try:
        doc = args.func(args)
    except (DepthforgeError, OSError, ValueError, np.linalg.LinAlgError) as exc:
        code = exit_code_for(exc)
        print(f"depthforge {args.command}: {exc}", file=sys.stderr)
        return code
    _emit(doc, getattr(args, "report", None))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
