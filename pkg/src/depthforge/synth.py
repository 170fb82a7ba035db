"""Synthetic ground-truth scenes: primitive meshes, orbiting cameras, SLAM-like clouds.

Random numbers come from numpy's counter-based Philox generator. Observation
sampling keys one stream per (seed, frame_id), so the frames can be processed in
any order without changing the result.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ParameterError, PreconditionError
from .geometry import (
    CameraIntrinsics,
    PointCloud,
    SimilarityTransform,
    TriangleMesh,
    Trajectory,
    apply_transform,
    matrix_to_quat,
)
from .raycast import cast_pixels, ray_plane_hits

PRIMITIVES = ("sphere", "ellipsoid", "mesh-file")
_MASK64 = (1 << 64) - 1

# stream tags keep corruption draws independent of the per-frame sampling streams
_TAG_CORRUPT = 1 << 63
_TAG_POSE_NOISE = (1 << 63) + 1


def philox(seed: int, stream: int = 0) -> np.random.Generator:
    """Generator keyed by ``(seed, stream)``; both are reduced to 64 bits."""
    key = ((int(seed) & _MASK64) << 64) | (int(stream) & _MASK64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class OrbitSpec:
    """Camera centres on a sphere around ``center``.

    Azimuth sweeps a full turn over the sequence while the elevation oscillates
    sinusoidally between the two limits (degrees above the target's xy plane).
    """

    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 220.0
    elevation_min: float = 30.0
    elevation_max: float = 70.0
    elevation_cycles: float = 3.0
    n_frames: int = 900
    fps: float = 30.0

    def __post_init__(self):
        if int(self.n_frames) < 2:
            raise ParameterError("an orbit needs n_frames >= 2")
        if not self.radius > 0 or not self.fps > 0:
            raise ParameterError("orbit radius and fps must be > 0")
        if not -90 < self.elevation_min <= self.elevation_max < 90:
            raise ParameterError("elevations must satisfy -90 < min <= max < 90")


@dataclass(frozen=True)
class SceneSpec:
    primitive: str = "ellipsoid"
    axes: tuple[float, float, float] = (70.0, 50.0, 40.0)  # semi-axes, mm; sphere uses axes[0]
    mesh_path: str | None = None
    tessellation: tuple[int, int] = (64, 32)  # (azimuth segments, latitude bands)
    orbit: OrbitSpec = field(default_factory=OrbitSpec)
    intrinsics: CameraIntrinsics = field(
        default_factory=lambda: CameraIntrinsics(700.0, 700.0, 511.5, 383.5, 1024, 768)
    )
    points_per_frame: int = 40
    skip_frames: int = 0
    seed: int = 42

    def __post_init__(self):
        if self.primitive not in PRIMITIVES:
            raise ParameterError(f"primitive must be one of {PRIMITIVES}, got {self.primitive!r}")
        if self.primitive == "mesh-file" and not self.mesh_path:
            raise ParameterError("primitive 'mesh-file' needs mesh_path")
        if self.primitive != "mesh-file" and not all(a > 0 for a in self.axes):
            raise ParameterError("primitive sizes must be > 0")
        seg, bands = self.tessellation
        if seg < 3 or bands < 2:
            raise ParameterError("tessellation needs >= 3 segments and >= 2 bands")
        if self.points_per_frame < 1 or self.skip_frames < 0:
            raise ParameterError("points_per_frame must be >= 1 and skip_frames >= 0")

    def to_dict(self) -> dict:
        d = asdict(replace(self, intrinsics=None))
        d["intrinsics"] = self.intrinsics.to_dict()
        return d


@dataclass(frozen=True)
class CorruptionSpec:
    sigma_ray: float = 0.0
    sigma_lat: float = 0.0
    outlier_fraction: float = 0.0
    global_scale: float = 1.0
    seed: int = 42

    def __post_init__(self):
        if self.sigma_ray < 0 or self.sigma_lat < 0:
            raise ParameterError("noise levels must be >= 0")
        if not 0 <= self.outlier_fraction < 1:
            raise ParameterError("outlier_fraction must be in [0, 1)")
        if not self.global_scale > 0:
            raise ParameterError("global_scale must be > 0")


def liver_preset(**overrides) -> SceneSpec:
    """Liver-sized ellipsoid (longest extent 140 mm) seen from above for 900 frames at 30 fps."""
    return replace(SceneSpec(), **overrides)


def sphere_preset(**overrides) -> SceneSpec:
    """Sphere of radius 50 mm orbited at elevations between -60 and 60 degrees."""
    base = SceneSpec(
        primitive="sphere",
        axes=(50.0, 50.0, 50.0),
        orbit=OrbitSpec(radius=200.0, elevation_min=-60.0, elevation_max=60.0),
    )
    return replace(base, **overrides)


PRESETS = {"liver": liver_preset, "sphere": sphere_preset}


def uv_sphere(segments: int = 64, bands: int = 32) -> TriangleMesh:
    """Unit UV sphere with single-vertex poles and outward (counter-clockwise) winding."""
    theta = np.pi * np.arange(1, bands) / bands  # polar angle of the rings
    phi = 2 * np.pi * np.arange(segments) / segments
    st, ct = np.sin(theta), np.cos(theta)
    # exact values on the equator and the axis-aligned meridians keep extents exact
    ct[np.isclose(theta, np.pi / 2)] = 0.0
    st[np.isclose(theta, np.pi / 2)] = 1.0
    cp, sp = np.cos(phi), np.sin(phi)
    for j, target in ((segments // 4, np.pi / 2), (segments // 2, np.pi), (3 * segments // 4, 1.5 * np.pi)):
        if segments % 4 == 0 and np.isclose(phi[j], target):
            cp[j], sp[j] = np.round(np.cos(target)), np.round(np.sin(target))
    ring = np.stack(
        [st[:, None] * cp[None, :], st[:, None] * sp[None, :], np.broadcast_to(ct[:, None], (bands - 1, segments))],
        axis=-1,
    ).reshape(-1, 3)
    verts = np.vstack([[0.0, 0.0, 1.0], ring, [0.0, 0.0, -1.0]])
    top, bottom = 0, len(verts) - 1

    def vid(r, s):
        return 1 + r * segments + (s % segments)

    s = np.arange(segments)
    faces = [np.stack([np.full(segments, top), vid(0, s), vid(0, s + 1)], axis=1)]
    for r in range(bands - 2):
        a, b = vid(r, s), vid(r, s + 1)
        c, d = vid(r + 1, s), vid(r + 1, s + 1)
        faces.append(np.stack([a, c, d], axis=1))
        faces.append(np.stack([a, d, b], axis=1))
    faces.append(np.stack([np.full(segments, bottom), vid(bands - 2, s + 1), vid(bands - 2, s)], axis=1))
    return TriangleMesh(verts, np.vstack(faces))


def make_primitive(spec: SceneSpec) -> TriangleMesh:
    if spec.primitive == "mesh-file":
        from .io import read_mesh

        return read_mesh(spec.mesh_path)
    unit = uv_sphere(*spec.tessellation)
    axes = np.full(3, spec.axes[0]) if spec.primitive == "sphere" else np.asarray(spec.axes, dtype=float)
    center = np.asarray(spec.orbit.center, dtype=float)
    verts = unit.vertices * axes
    if np.any(center != 0):
        verts = verts + center
    return TriangleMesh(verts, unit.triangles)


def look_at(center, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world rotation whose columns are (right, down, forward)."""
    forward = np.asarray(target, float) - np.asarray(center, float)
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    norm = np.linalg.norm(right)
    if norm < 1e-9:
        raise ParameterError("viewing direction is parallel to the up vector")
    right /= norm
    down = np.cross(forward, right)
    return np.stack([right, down, forward], axis=1)


def orbit_trajectory(spec: SceneSpec) -> Trajectory:
    o = spec.orbit
    n = int(o.n_frames)
    t = np.arange(n) / n
    az = 2 * np.pi * t
    mid = 0.5 * (o.elevation_min + o.elevation_max)
    amp = 0.5 * (o.elevation_max - o.elevation_min)
    el = np.radians(mid + amp * np.sin(2 * np.pi * o.elevation_cycles * t))
    target = np.asarray(o.center, dtype=float)
    dirs = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=1)
    centers = target + o.radius * dirs
    rots = np.array([matrix_to_quat(look_at(c, target)) for c in centers])
    return Trajectory(np.arange(n), rots, centers)


def sample_visible_points(mesh: TriangleMesh, traj: Trajectory, intr: CameraIntrinsics,
                          points_per_frame: int, seed: int, skip_frames: int = 0,
                          max_rounds: int = 4) -> PointCloud:
    """Surface points seen from each pose, tagged with their frame id.

    Pixel positions are drawn uniformly over the image in batches of
    ``8 * points_per_frame`` until the frame has ``points_per_frame`` hits or
    ``max_rounds`` batches were drawn. Normals are the hit triangle's normal.
    Frames with id below ``skip_frames`` are not observed.
    """
    if len(mesh.triangles) == 0 or len(traj) == 0:
        raise PreconditionError("sampling needs a non-empty mesh and trajectory")
    face_n = mesh.face_normals()
    pts, nrm, frames = [], [], []
    batch = 8 * points_per_frame
    for pose in traj:
        if pose.frame_id < skip_frames:
            continue
        rng = philox(seed, pose.frame_id)
        R = pose.matrix
        hits_p, hits_t = [], []
        got = 0
        for _ in range(max_rounds):
            pix = rng.uniform((-0.5, -0.5), (intr.width - 0.5, intr.height - 0.5), size=(batch, 2))
            dist, tri = cast_pixels(mesh, intr, pose, pix)
            ok = np.nonzero(tri >= 0)[0][: points_per_frame - got]
            if len(ok):
                dirs = intr.pixel_rays(pix[ok, 0], pix[ok, 1]) @ R.T
                origin = np.broadcast_to(pose.translation, dirs.shape)
                hits_p.append(ray_plane_hits(mesh, origin, dirs, tri[ok]))
                hits_t.append(tri[ok])
                got += len(ok)
            if got >= points_per_frame:
                break
        if got:
            t = np.concatenate(hits_t)
            pts.append(np.concatenate(hits_p))
            nrm.append(face_n[t])
            frames.append(np.full(got, pose.frame_id, dtype=np.int64))
    if not pts:
        raise PreconditionError("no camera ray hit the mesh")
    return PointCloud(np.concatenate(pts), np.concatenate(nrm), np.concatenate(frames))


def corrupt_with_transform(cloud: PointCloud, traj: Trajectory,
                           spec: CorruptionSpec) -> tuple[PointCloud, SimilarityTransform]:
    """SLAM-like corruption; also returns the global similarity that was applied.

    The similarity is the scale about the clean cloud's centroid, so applying it to
    the ground-truth trajectory gives the matching noiseless estimated trajectory.
    """
    if cloud.source_frame is None:
        raise PreconditionError("corruption needs per-point source frames")
    n = len(cloud)
    pts = np.array(cloud.points, dtype=np.float64)
    rng = philox(spec.seed, _TAG_CORRUPT)
    if n and (spec.sigma_ray > 0 or spec.sigma_lat > 0):
        cam = traj.translations[traj.nearest_index(cloud.source_frame)]
        ray = pts - cam
        ray /= np.linalg.norm(ray, axis=1, keepdims=True)
        helper = np.where(np.abs(ray[:, [0]]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
        e1 = np.cross(ray, helper)
        e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
        e2 = np.cross(ray, e1)
        g = rng.standard_normal((n, 3))
        pts += spec.sigma_ray * g[:, :1] * ray + spec.sigma_lat * (g[:, 1:2] * e1 + g[:, 2:3] * e2)
    n_out = int(round(spec.outlier_fraction * n))
    if n_out:
        lo, hi = cloud.points.min(axis=0), cloud.points.max(axis=0)
        mid, half = 0.5 * (lo + hi), 0.75 * (hi - lo)
        which = np.sort(rng.permutation(n)[:n_out])
        pts[which] = rng.uniform(mid - half, mid + half, size=(n_out, 3))
    if spec.global_scale != 1.0 and n:
        c = cloud.points.mean(axis=0)
        t = SimilarityTransform(spec.global_scale, translation=(1.0 - spec.global_scale) * c)
        pts = t.apply_points(pts)
    else:
        t = SimilarityTransform.identity()
    return PointCloud(pts, cloud.normals, cloud.source_frame, cloud.confidence), t


def corrupt(cloud: PointCloud, traj: Trajectory, spec: CorruptionSpec) -> PointCloud:
    return corrupt_with_transform(cloud, traj, spec)[0]


def noisy_trajectory(traj: Trajectory, sigma: float, seed: int) -> Trajectory:
    """Add isotropic Gaussian noise of 3D standard deviation ``sigma`` to camera centres.

    Each axis gets ``sigma / sqrt(3)`` so the expected squared displacement is sigma².
    """
    if sigma < 0:
        raise ParameterError("sigma must be >= 0")
    if sigma == 0:
        return traj
    rng = philox(seed, _TAG_POSE_NOISE)
    noise = rng.standard_normal((len(traj), 3)) * (sigma / np.sqrt(3.0))
    return Trajectory(traj.frame_ids, traj.rotations, traj.translations + noise)


@dataclass(frozen=True)
class Scene:
    mesh: TriangleMesh
    trajectory: Trajectory
    clean: PointCloud
    cloud: PointCloud
    estimated_trajectory: Trajectory
    transform: SimilarityTransform


def build_scene(spec: SceneSpec, corruption: CorruptionSpec, pose_sigma: float = 0.0) -> Scene:
    """Mesh, ground-truth orbit, clean and corrupted clouds, and the SLAM-frame trajectory."""
    mesh = make_primitive(spec)
    traj = orbit_trajectory(spec)
    clean = sample_visible_points(mesh, traj, spec.intrinsics, spec.points_per_frame, spec.seed,
                                  spec.skip_frames)
    cloud, t = corrupt_with_transform(clean, traj, corruption)
    est = apply_transform(t, noisy_trajectory(traj, pose_sigma, corruption.seed))
    return Scene(mesh, traj, clean, cloud, est, t)
