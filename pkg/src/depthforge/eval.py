"""Scoring against ground truth: ICP, trajectory alignment, height-grid RMSD,
signed distance maps and depth rendering."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ParameterError, PreconditionError
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    PointCloud,
    SimilarityTransform,
    TriangleMesh,
    Trajectory,
)
from .io import write_depth_raw, write_mesh, write_pgm16
from .raycast import MeshDistance, cast_pixels, vertical_heights

ICP_TRIM_FACTOR = 3.0
PERCENTILES = (5, 25, 50, 75, 95)


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> SimilarityTransform:
    """Least-squares similarity (or rigid, when ``with_scale`` is False) mapping src onto dst."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ParameterError("umeyama needs two (N, 3) arrays of equal shape")
    n = len(src)
    if n < 3:
        raise PreconditionError(f"need at least 3 correspondences, got {n}")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    scale = 1.0
    if with_scale:
        var_s = np.sum(xs * xs) / n
        if var_s <= 0:
            raise PreconditionError("source points are all identical; scale is undefined")
        scale = float(np.sum(D * np.diag(S)) / var_s)
    t = mu_d - scale * R @ mu_s
    return SimilarityTransform.from_matrix(R, t, scale)


# ---------------------------------------------------------------- ICP


@dataclass(frozen=True)
class IcpResult:
    transform: SimilarityTransform
    rms: float
    iterations: int
    inliers: int
    converged: bool


def _params(T: SimilarityTransform, length: float) -> np.ndarray:
    return np.concatenate([Rotation.from_quat(T.rotation).as_rotvec() * length, T.translation])


def _from_params(q: np.ndarray, length: float) -> SimilarityTransform:
    return SimilarityTransform(1.0, Rotation.from_rotvec(q[:3] / length).as_quat(), q[3:])


def icp_register(source, target: TriangleMesh, max_iters: int = 100, tol: float = 1e-6,
                 init: SimilarityTransform | None = None) -> IcpResult:
    """Trimmed point-to-point ICP of ``source`` points onto the surface of ``target``.

    Each iteration pairs every transformed source point with its closest point on
    the target surface, drops pairs farther than 3x the median pair distance and
    re-solves the rigid transform from the original source points. Iteration stops
    once the inlier RMS changes by less than ``tol`` (mm) or after ``max_iters``.

    Point-to-point ICP creeps along smooth surfaces, so when two consecutive
    updates point the same way the step is extrapolated (Aitken style). The
    extrapolated transform is kept only if its RMS beats the plain update.
    """
    if isinstance(source, PointCloud):
        src = source.points
    elif isinstance(source, TriangleMesh):
        src = source.vertices
    else:
        src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    if len(src) == 0 or len(target.triangles) == 0:
        raise PreconditionError("ICP needs a non-empty source and target")
    if max_iters < 1:
        raise ParameterError("max_iters must be >= 1")
    dist = MeshDistance(target)
    length = max(float(np.sqrt(np.mean(np.sum((src - src.mean(axis=0)) ** 2, axis=1)))), 1e-12)

    def evaluate(T):
        d, cp, _ = dist.query(T.apply_points(src))
        keep = d <= ICP_TRIM_FACTOR * np.median(d)
        if keep.sum() < 3:
            raise PreconditionError("no correspondences left within the rejection threshold")
        return float(np.sqrt(np.mean(d[keep] ** 2))), keep, cp

    T = init if init is not None else SimilarityTransform.identity()
    rms, keep, cp = evaluate(T)
    prev = np.inf
    history = [_params(T, length)]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        if abs(prev - rms) < tol:
            converged = True
            break
        prev = rms
        T = umeyama(src[keep], cp[keep], with_scale=False)
        history.append(_params(T, length))
        state = evaluate(T)
        if len(history) >= 3:
            step, last = history[-1] - history[-2], history[-2] - history[-3]
            ns, nl = np.linalg.norm(step), np.linalg.norm(last)
            if ns > 0 and nl > 0 and step @ last > np.cos(np.radians(10)) * ns * nl and ns < nl:
                ratio = ns / nl
                guess = _from_params(history[-1] + min(ratio / (1 - ratio), 25.0) * step, length)
                trial = evaluate(guess)
                if trial[0] < state[0]:
                    T, state = guess, trial
                    history[-1] = _params(T, length)
        rms, keep, cp = state
    return IcpResult(T, rms, it, int(keep.sum()), converged)


def icp_align(source, target: TriangleMesh, max_iters: int = 100, tol: float = 1e-6) -> SimilarityTransform:
    return icp_register(source, target, max_iters, tol).transform


# ---------------------------------------------------------------- trajectories


@dataclass(frozen=True)
class Association:
    est_index: np.ndarray
    gt_index: np.ndarray
    unmatched_est: int
    unmatched_gt: int

    def __len__(self) -> int:
        return len(self.est_index)


def associate(est: Trajectory, gt: Trajectory) -> Association:
    """Pair poses with identical frame ids."""
    _, ie, ig = np.intersect1d(est.frame_ids, gt.frame_ids, assume_unique=True, return_indices=True)
    return Association(ie, ig, len(est) - len(ie), len(gt) - len(ig))


@dataclass(frozen=True)
class TrajectoryAlignment:
    transform: SimilarityTransform
    rmse: float
    matched: int
    unmatched_est: int
    unmatched_gt: int


def align_trajectories_report(est: Trajectory, gt: Trajectory) -> TrajectoryAlignment:
    a = associate(est, gt)
    if len(a) < 3:
        raise PreconditionError(f"trajectory alignment needs >= 3 common frame ids, got {len(a)}")
    t = umeyama(est.translations[a.est_index], gt.translations[a.gt_index], with_scale=True)
    return TrajectoryAlignment(t, trajectory_rmse(est, gt, t), len(a), a.unmatched_est, a.unmatched_gt)


def align_trajectories(est: Trajectory, gt: Trajectory) -> SimilarityTransform:
    """Similarity mapping estimated camera centres onto ground truth (scale included)."""
    return align_trajectories_report(est, gt).transform


def trajectory_rmse(est: Trajectory, gt: Trajectory, t: SimilarityTransform | None = None) -> float:
    a = associate(est, gt)
    if len(a) == 0:
        raise PreconditionError("trajectories share no frame ids")
    p = est.translations[a.est_index]
    if t is not None:
        p = t.apply_points(p)
    err = p - gt.translations[a.gt_index]
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


# ---------------------------------------------------------------- surface RMSD


@dataclass(frozen=True)
class HeightGrid:
    x: np.ndarray  # (m,) sample x coordinates
    y: np.ndarray  # (n,) sample y coordinates
    Z: np.ndarray  # (m, n) ground-truth heights, NaN where missed
    z: np.ndarray  # (m, n) reconstructed heights, NaN where missed
    valid: np.ndarray  # (m, n) both surfaces hit

    @property
    def m(self) -> int:
        return len(self.x)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def invalid_count(self) -> int:
        return int(self.valid.size - self.valid.sum())


def _footprint(mesh: TriangleMesh):
    v = mesh.vertices[np.unique(mesh.triangles)]
    return v[:, :2].min(axis=0), v[:, :2].max(axis=0)


def surface_rmsd(recon: TriangleMesh, gt: TriangleMesh, m: int = 200, n: int = 200) -> tuple[float, HeightGrid]:
    """Root mean squared height difference on an m x n grid over the shared xy footprint.

    Samples sit at cell centres of the intersection of the two xy bounding
    rectangles. Each surface's height is its largest z along the vertical line.
    Only samples hit by both surfaces count.
    """
    if m < 1 or n < 1:
        raise ParameterError("grid sizes must be >= 1")
    if len(recon.triangles) == 0 or len(gt.triangles) == 0:
        raise PreconditionError("surface RMSD needs two non-empty meshes")
    lo_a, hi_a = _footprint(recon)
    lo_b, hi_b = _footprint(gt)
    lo, hi = np.maximum(lo_a, lo_b), np.minimum(hi_a, hi_b)
    if np.any(hi <= lo):
        raise PreconditionError("the meshes' xy footprints do not overlap")
    x = lo[0] + (np.arange(m) + 0.5) * (hi[0] - lo[0]) / m
    y = lo[1] + (np.arange(n) + 0.5) * (hi[1] - lo[1]) / n
    X, Y = np.meshgrid(x, y, indexing="ij")
    xy = np.stack([X.ravel(), Y.ravel()], axis=1)
    Z = vertical_heights(gt, xy).reshape(m, n)
    z = vertical_heights(recon, xy).reshape(m, n)
    valid = np.isfinite(Z) & np.isfinite(z)
    if not valid.any():
        raise PreconditionError("no grid sample hits both surfaces")
    diff = Z[valid] - z[valid]
    rmsd = float(np.sqrt(np.mean(diff * diff)))
    return rmsd, HeightGrid(x, y, Z, z, valid)


# ---------------------------------------------------------------- distance map


@dataclass(frozen=True)
class DistanceReport:
    distances: np.ndarray  # signed, per recon vertex; positive on the gt normal side
    bin_edges: np.ndarray
    counts: np.ndarray

    @property
    def summary(self) -> dict:
        d = self.distances
        out = {
            "count": int(len(d)),
            "mean": float(d.mean()),
            "rms": float(np.sqrt(np.mean(d * d))),
            "min": float(d.min()),
            "max": float(d.max()),
        }
        for p, v in zip(PERCENTILES, np.percentile(d, PERCENTILES)):
            out[f"p{p}"] = float(v)
        k = int(np.argmax(self.counts))
        out["mode"] = float(0.5 * (self.bin_edges[k] + self.bin_edges[k + 1]))
        return out


def signed_distances(points: np.ndarray, gt: TriangleMesh) -> np.ndarray:
    """Distance to the closest point of ``gt``, signed by that triangle's normal."""
    d, cp, tri = MeshDistance(gt).query(points)
    side = np.einsum("ij,ij->i", points - cp, gt.face_normals(normalize=False)[tri])
    return np.where(side < 0, -d, d)


def distance_report(recon: TriangleMesh, gt: TriangleMesh, bins: int = 50) -> DistanceReport:
    if len(recon.vertices) == 0 or len(gt.triangles) == 0:
        raise PreconditionError("distance report needs non-empty meshes")
    if bins < 1:
        raise ParameterError("bins must be >= 1")
    d = signed_distances(recon.vertices, gt)
    counts, edges = np.histogram(d, bins=bins)
    return DistanceReport(d, edges, counts)


def write_distance_ply(path, recon: TriangleMesh, report: DistanceReport) -> None:
    write_mesh(path, recon, vertex_scalars={"distance": report.distances})


# ---------------------------------------------------------------- depth


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel distance (mm) from the camera centre to the surface; 0 means no hit."""

    depth: np.ndarray  # (height, width)
    intrinsics: CameraIntrinsics
    pose: CameraPose

    @property
    def covered(self) -> np.ndarray:
        return self.depth > 0

    def save(self, path) -> tuple[Path, Path]:
        """Write a 16-bit PGM (0.1 mm per unit) and a float32 sidecar ``<stem>.f32``."""
        path = Path(path)
        raw = path.with_suffix(".f32")
        write_pgm16(path, self.depth)
        write_depth_raw(raw, self.depth)
        return path, raw


def rasterize_depth(mesh: TriangleMesh, intr: CameraIntrinsics, pose: CameraPose) -> DepthMap:
    """Depth buffer at integer pixel centres: the nearest hit along each pixel's ray."""
    u, v = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    pix = np.stack([u.ravel(), v.ravel()], axis=1).astype(np.float64)
    dist, _ = cast_pixels(mesh, intr, pose, pix)
    depth = np.where(np.isfinite(dist), dist, 0.0).reshape(intr.height, intr.width)
    return DepthMap(depth, intr, pose)

