"""End-to-end reconstruction runs, config files and JSON run reports."""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, StageError
from .eval import (
    align_trajectories_report,
    distance_report,
    icp_register,
    surface_rmsd,
    write_distance_ply,
)
from .filters import (
    RadiusFilterParams,
    VoxelFilterParams,
    default_filter_params,
    radius_outlier_removal,
    voxel_downsample,
)
from .geometry import PointCloud, TriangleMesh, Trajectory, apply_transform
from .io import read_mesh, read_point_cloud, read_trajectory, write_mesh, write_point_cloud
from .mls import DEFAULT_DEGREE, DEFAULT_K, KernelSpec, MlsParams, estimate_normals, mls_smooth
from .mls import orient_normals, orient_normals_outward
from .poisson import DEFAULT_PADDING, DEFAULT_RESOLUTION, MAX_RESOLUTION, poisson_surface

SCHEMA_VERSION = 1
STAGES = ("radius", "voxel", "normals", "orient", "mls", "poisson")
INTERMEDIATE_NAMES = {
    "radius": "01_radius.ply",
    "voxel": "02_voxel.ply",
    "normals": "03_normals.ply",
    "orient": "04_oriented.ply",
    "mls": "05_mls.ply",
    "poisson": "06_poisson_raw.ply",
}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_grid(text: str) -> tuple[int, int]:
    """``"200x200"`` -> (200, 200)."""
    try:
        m, n = (int(p) for p in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"grid must look like MxN, got {text!r}") from None
    if m < 1 or n < 1:
        raise ConfigError(f"grid sizes must be >= 1, got {text!r}")
    return m, n


@dataclass
class PipelineConfig:
    """Every stage parameter; ``None`` means "derive from the data"."""

    input: str | None = None
    output: str | None = None
    report: str | None = None
    trajectory: str | None = None
    gt_mesh: str | None = None
    gt_trajectory: str | None = None
    intermediates_dir: str | None = None
    keep_intermediates: bool = False
    radius: float | None = None
    min_neighbors: int = 5
    voxel_size: float | None = None
    normal_k: int = 12
    mls_bandwidth: float | None = None
    mls_degree: int = DEFAULT_DEGREE
    mls_k: int = DEFAULT_K
    resolution: int = DEFAULT_RESOLUTION
    padding: int = DEFAULT_PADDING
    preconditioner: str = "fst"
    icp: bool = True
    icp_max_iters: int = 100
    icp_tol: float = 1e-4
    eval_grid: str = "200x200"
    histogram_bins: int = 50

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.radius is not None and not self.radius > 0:
            raise ConfigError("radius must be > 0")
        if self.voxel_size is not None and not self.voxel_size > 0:
            raise ConfigError("voxel_size must be > 0")
        if self.mls_bandwidth is not None and not self.mls_bandwidth > 0:
            raise ConfigError("mls_bandwidth must be > 0")
        if self.min_neighbors < 1:
            raise ConfigError("min_neighbors must be >= 1")
        if self.normal_k < 3:
            raise ConfigError("normal_k must be >= 3")
        if not 8 <= self.resolution <= MAX_RESOLUTION:
            raise ConfigError(f"resolution must be in [8, {MAX_RESOLUTION}]")
        if self.padding < 4:
            raise ConfigError("padding must be >= 4 cells")
        if self.preconditioner not in ("fst", "none"):
            raise ConfigError("preconditioner must be 'fst' or 'none'")
        if self.histogram_bins < 1:
            raise ConfigError("histogram_bins must be >= 1")
        parse_grid(self.eval_grid)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            if key not in known:
                raise ConfigError(f"unknown config key '{key}'")
            kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "PipelineConfig":
        """Parse flat ``key = value`` lines; ``#`` starts a comment."""
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"{source}:{lineno}: unknown config key '{key}'")
            try:
                values[key] = _convert(types[key], value)
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: bad value for '{key}': {exc}") from None
        return cls.from_dict(values)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        path = Path(path)
        return cls.from_text(path.read_text(), str(path))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if value is None:
                continue
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def _convert(type_name, value: str):
    t = str(type_name)
    if value.lower() in ("none", "") and "None" in t:
        return None
    if t.startswith("bool"):
        return _parse_bool(value)
    if t.startswith("int"):
        return int(value)
    if t.startswith("float"):
        return float(value)
    return value


@dataclass
class RunReport:
    config: dict
    status: str = "ok"
    failed_stage: str | None = None
    error: str | None = None
    parameters: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    timings_ms: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"schema_version": SCHEMA_VERSION, "tool": "depthforge", "version": __version__}
        d.update(dataclasses.asdict(self))
        return d

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


class _Stages:
    """Times named stages and records which one failed."""

    def __init__(self, report: RunReport):
        self.report = report

    def run(self, name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        except Exception as exc:
            self.report.status = "failed"
            self.report.failed_stage = name
            self.report.error = f"{type(exc).__name__}: {exc}"
            raise StageError(name, exc) from exc
        finally:
            spent = 1000.0 * (time.perf_counter() - t0)
            self.report.timings_ms[name] = round(self.report.timings_ms.get(name, 0.0) + spent, 3)


def reconstruct(cloud: PointCloud, config: PipelineConfig, trajectory: Trajectory | None = None,
                report: RunReport | None = None, intermediates: Path | None = None):
    """Filters, normals, orientation, MLS and Poisson on an in-memory cloud.

    Returns ``(mesh, clouds, report)``; ``clouds`` maps stage name to its output cloud.
    """
    report = report if report is not None else RunReport(config=config.to_dict())
    st = _Stages(report)
    clouds = {}
    report.counts["input_points"] = len(cloud)

    def keep(name, obj):
        if intermediates is None:
            return
        path = intermediates / INTERMEDIATE_NAMES[name]
        if isinstance(obj, TriangleMesh):
            write_mesh(path, obj)
        else:
            write_point_cloud(path, obj)
        report.outputs[f"intermediate_{name}"] = str(path)

    def filter_params():
        if config.radius is not None and config.voxel_size is not None:
            return RadiusFilterParams(config.radius, config.min_neighbors), VoxelFilterParams(config.voxel_size)
        rp, vp = default_filter_params(cloud)
        return (
            RadiusFilterParams(config.radius if config.radius is not None else rp.radius, config.min_neighbors),
            VoxelFilterParams(config.voxel_size if config.voxel_size is not None else vp.voxel_size),
        )

    rp, vp = st.run("radius", filter_params)
    report.parameters["radius"] = {"radius": rp.radius, "min_neighbors": rp.min_neighbors}
    report.parameters["voxel"] = {"voxel_size": vp.voxel_size}

    c = st.run("radius", radius_outlier_removal, cloud, rp)
    clouds["radius"] = c
    report.counts["after_radius"] = len(c)
    keep("radius", c)

    c = st.run("voxel", voxel_downsample, c, vp)
    clouds["voxel"] = c
    report.counts["after_voxel"] = len(c)
    keep("voxel", c)

    c = st.run("normals", estimate_normals, c, config.normal_k)
    clouds["normals"] = c
    report.parameters["normals"] = {"k": config.normal_k}
    keep("normals", c)

    if trajectory is not None:
        c = st.run("orient", orient_normals, c, trajectory)
        report.parameters["orient"] = {"method": "camera", "poses": len(trajectory)}
    else:
        c = st.run("orient", orient_normals_outward, c)
        report.parameters["orient"] = {"method": "centroid"}
    clouds["orient"] = c
    keep("orient", c)

    def mls_params():
        if config.mls_bandwidth is None:
            return MlsParams.auto(c, config.mls_degree, config.mls_k)
        return MlsParams(KernelSpec(config.mls_bandwidth), config.mls_degree, config.mls_k)

    mp = st.run("mls", mls_params)
    c, mls_report = st.run("mls", mls_smooth, c, mp)
    clouds["mls"] = c
    report.parameters["mls"] = {"bandwidth": mp.kernel.bandwidth, "degree": mp.poly_degree, "k": mp.k}
    report.counts["mls_failures"] = mls_report.failures
    report.metrics["mls_mean_displacement"] = mls_report.mean_displacement
    keep("mls", c)

    res = st.run("poisson", poisson_surface, c, config.resolution, config.padding, config.preconditioner)
    report.parameters["poisson"] = {
        "resolution": config.resolution,
        "padding": config.padding,
        "preconditioner": res.solve.preconditioner,
    }
    report.metrics["poisson_residual"] = res.solve.residual
    report.metrics["poisson_iterations"] = res.solve.iterations
    report.metrics["isovalue"] = res.isovalue
    report.counts["components"] = res.components
    report.counts["mesh_vertices"] = len(res.mesh.vertices)
    report.counts["mesh_triangles"] = len(res.mesh.triangles)
    if intermediates is not None:
        from .poisson import extract_isosurface

        keep("poisson", extract_isosurface(res.chi, res.isovalue))
    return res.mesh, clouds, report


def evaluate(mesh: TriangleMesh, config: PipelineConfig, report: RunReport, gt_mesh: TriangleMesh | None,
             trajectory: Trajectory | None = None, gt_trajectory: Trajectory | None = None,
             distance_path=None) -> TriangleMesh:
    """Bring ``mesh`` into the ground-truth frame and score it; returns the aligned mesh."""
    st = _Stages(report)
    aligned = mesh
    if trajectory is not None and gt_trajectory is not None:
        ta = st.run("eval", align_trajectories_report, trajectory, gt_trajectory)
        report.metrics["trajectory_rmse"] = ta.rmse
        report.metrics["trajectory_scale"] = ta.transform.scale
        report.counts["trajectory_matched"] = ta.matched
        report.counts["trajectory_unmatched_est"] = ta.unmatched_est
        report.counts["trajectory_unmatched_gt"] = ta.unmatched_gt
        report.parameters["trajectory_alignment"] = ta.transform.to_dict()
        aligned = apply_transform(ta.transform, aligned)
    if gt_mesh is None:
        return aligned
    if config.icp:
        icp = st.run("eval", icp_register, aligned.vertices, gt_mesh, config.icp_max_iters, config.icp_tol)
        aligned = apply_transform(icp.transform, aligned)
        report.metrics["icp_rms"] = icp.rms
        report.metrics["icp_iterations"] = icp.iterations
        report.parameters["icp"] = icp.transform.to_dict()
    m, n = parse_grid(config.eval_grid)
    rmsd, grid = st.run("eval", surface_rmsd, aligned, gt_mesh, m, n)
    report.metrics["surface_rmsd"] = rmsd
    report.counts["rmsd_valid_samples"] = int(grid.valid.sum())
    report.counts["rmsd_invalid_samples"] = grid.invalid_count
    dr = st.run("eval", distance_report, aligned, gt_mesh, config.histogram_bins)
    report.metrics["distance"] = dr.summary
    report.metrics["distance_histogram"] = {"edges": dr.bin_edges.tolist(), "counts": dr.counts.tolist()}
    if distance_path is not None:
        write_distance_ply(distance_path, aligned, dr)
        report.outputs["distance_map"] = str(distance_path)
    return aligned


def run_pipeline(config: PipelineConfig) -> RunReport:
    """Run the configured pipeline from files; the report is written even when a stage fails."""
    if not config.input or not config.output:
        raise ConfigError("pipeline needs 'input' and 'output'")
    report = RunReport(config=config.to_dict())
    report_path = Path(config.report) if config.report else Path(config.output).with_suffix(".json")
    st = _Stages(report)
    try:
        cloud = st.run("load", read_point_cloud, config.input)
        traj = st.run("load", read_trajectory, config.trajectory) if config.trajectory else None
        gt_mesh = st.run("load", read_mesh, config.gt_mesh) if config.gt_mesh else None
        gt_traj = st.run("load", read_trajectory, config.gt_trajectory) if config.gt_trajectory else None
        inter = None
        if config.keep_intermediates:
            inter = Path(config.intermediates_dir or Path(config.output).parent / "intermediates")
            inter.mkdir(parents=True, exist_ok=True)
        mesh, _, _ = reconstruct(cloud, config, traj, report, inter)
        Path(config.output).parent.mkdir(parents=True, exist_ok=True)
        st.run("write", write_mesh, config.output, mesh)
        report.outputs["mesh"] = str(config.output)
        if gt_mesh is not None or gt_traj is not None:
            dist_path = Path(config.output).with_name(Path(config.output).stem + "_distance.ply")
            evaluate(mesh, config, report, gt_mesh, traj, gt_traj, dist_path if gt_mesh is not None else None)
    finally:
        report.timings_ms["total"] = round(sum(v for k, v in report.timings_ms.items() if k != "total"), 3)
        report.outputs["report"] = str(report_path)
        report_path.parent.mkdir(parents=True, exist_ok=True)
        report.write(report_path)
    return report


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x

