"""Normal estimation, camera-based orientation and Moving Least Squares projection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, PreconditionError
from .geometry import PointCloud, Trajectory
from .spatial import SpatialIndex, median_nn_spacing

BANDWIDTH_SPACING_FACTOR = 4.0
DEFAULT_DEGREE = 2
DEFAULT_K = 20
PLANE_MAX_ITERS = 20
PLANE_STEP_TOL = 1e-6  # mm
WEIGHT_FLOOR = 1e-12
RANK_RTOL = 1e-10


def min_neighbors_for_degree(degree: int) -> int:
    return (degree + 1) * (degree + 2) // 2


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian weight exp(-d^2 / h^2) with bandwidth ``h`` in mm."""

    bandwidth: float

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ParameterError("kernel bandwidth must be > 0")

    def __call__(self, d):
        return np.exp(-np.square(np.asarray(d) / self.bandwidth))


@dataclass(frozen=True)
class MlsParams:
    kernel: KernelSpec
    poly_degree: int = DEFAULT_DEGREE
    k: int = DEFAULT_K

    def __post_init__(self):
        if self.poly_degree not in (1, 2, 3):
            raise ParameterError(f"poly_degree must be 1, 2 or 3, got {self.poly_degree}")
        need = min_neighbors_for_degree(self.poly_degree)
        if self.k < need:
            raise ParameterError(f"k={self.k} is below the {need} samples a degree-{self.poly_degree} fit needs")

    @classmethod
    def auto(cls, cloud: PointCloud, poly_degree: int = DEFAULT_DEGREE, k: int = DEFAULT_K) -> "MlsParams":
        h = BANDWIDTH_SPACING_FACTOR * median_nn_spacing(cloud)
        return cls(KernelSpec(h), poly_degree, k)


@dataclass(frozen=True)
class MlsLocalFrame:
    """Local reference plane ``x . normal = offset`` with tangent axes and height polynomial."""

    origin: np.ndarray
    normal: np.ndarray
    offset: float
    u: np.ndarray
    v: np.ndarray
    poly_coeffs: np.ndarray
    degree: int
    scale: float = 1.0  # tangent coordinates are divided by this before evaluation

    def height(self, a, b):
        """Polynomial height at tangent coordinates (mm)."""
        return _monomials(np.atleast_1d(a), np.atleast_1d(b), self.degree, scale=self.scale) @ self.poly_coeffs


@dataclass(frozen=True)
class MlsReport:
    failures: int
    mean_displacement: float
    max_displacement: float
    plane_iterations: int


def _knn(cloud: PointCloud, k: int) -> np.ndarray:
    return SpatialIndex(cloud).knn_query_batch(cloud.points, k)


def estimate_normals(cloud: PointCloud, k: int) -> PointCloud:
    """PCA normals over each point's k-neighbourhood (the point itself included).

    Degenerate neighbourhoods, where the two smallest covariance eigenvalues agree
    to 1e-12 relative, get confidence 0. Normal signs are arbitrary.
    """
    if k < 3:
        raise ParameterError("k must be >= 3 for normal estimation")
    if len(cloud) < k:
        raise PreconditionError(f"cloud has {len(cloud)} points, fewer than k={k}")
    nbr = _knn(cloud, k)
    x = cloud.points[nbr]
    x = x - x.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", x, x) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    scale = np.maximum(evals[:, 2], np.finfo(float).tiny)
    degenerate = (evals[:, 1] - evals[:, 0]) <= 1e-12 * scale
    confidence = np.where(degenerate, 0.0, 1.0)
    return PointCloud(cloud.points, normals, cloud.source_frame, confidence)


def observing_centers(cloud: PointCloud, trajectory: Trajectory) -> np.ndarray:
    """Camera centre that observed each point.

    Uses the pose with the point's ``source_frame`` id, falling back to the nearest
    frame id, or to the nearest camera centre when the cloud has no provenance.
    """
    if len(trajectory) == 0:
        raise ParameterError("orientation needs a non-empty trajectory")
    if cloud.source_frame is not None:
        idx = trajectory.nearest_index(cloud.source_frame)
    else:
        idx = SpatialIndex(trajectory.translations).nearest_distance(cloud.points)[1]
    return trajectory.translations[idx]


def orient_normals(cloud: PointCloud, trajectory: Trajectory) -> PointCloud:
    """Flip normals so each faces the camera that observed its point."""
    if cloud.normals is None:
        raise PreconditionError("cloud has no normals to orient")
    if len(cloud) == 0:
        if len(trajectory) == 0:
            raise ParameterError("orientation needs a non-empty trajectory")
        return cloud
    view = observing_centers(cloud, trajectory) - cloud.points
    flip = np.einsum("ij,ij->i", cloud.normals, view) < 0
    normals = np.where(flip[:, None], -cloud.normals, cloud.normals)
    return cloud.replace(normals=normals)


def orient_normals_outward(cloud: PointCloud) -> PointCloud:
    """Fallback orientation away from the centroid, for clouds without a trajectory."""
    if cloud.normals is None:
        raise PreconditionError("cloud has no normals to orient")
    away = cloud.points - cloud.points.mean(axis=0)
    flip = np.einsum("ij,ij->i", cloud.normals, away) < 0
    return cloud.replace(normals=np.where(flip[:, None], -cloud.normals, cloud.normals))


def _monomials(a, b, degree, scale=1.0):
    """Columns a^i b^j for i + j <= degree, constant first then linear terms."""
    a = a / scale
    b = b / scale
    cols = []
    for total in range(degree + 1):
        for j in range(total + 1):
            cols.append(a ** (total - j) * b ** j)
    return np.stack(cols, axis=-1)


def _tangent_axes(n):
    # pick the world axis least aligned with n, then Gram-Schmidt
    helper = np.zeros_like(n)
    helper[np.arange(len(n)), np.argmin(np.abs(n), axis=1)] = 1.0
    u = helper - np.einsum("ij,ij->i", helper, n)[:, None] * n
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = np.cross(n, u)
    return u, v


def _weighted_planes(nbr_pts, q, h):
    """Weighted plane through each neighbourhood: (normal, offset, weights)."""
    d2 = np.sum(np.square(nbr_pts - q[:, None, :]), axis=2)
    w = np.exp(-d2 / (h * h))
    wsum = w.sum(axis=1)
    safe = np.where(wsum > 0, wsum, 1.0)
    c = np.einsum("nk,nki->ni", w, nbr_pts) / safe[:, None]
    x = nbr_pts - c[:, None, :]
    cov = np.einsum("nk,nki,nkj->nij", w, x, x)
    _, evecs = np.linalg.eigh(cov)
    n = evecs[:, :, 0]
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return n, np.einsum("ij,ij->i", n, c), w


def mls_smooth(cloud: PointCloud, params: MlsParams) -> tuple[PointCloud, MlsReport]:
    """Project every point onto its local MLS polynomial surface.

    Points whose neighbourhood cannot support the polynomial fit (too few
    samples with weight above 1e-12, or a rank-deficient design) pass through
    unchanged with confidence 0 and are counted in the report.
    """
    n_pts = len(cloud)
    if n_pts < params.k:
        raise PreconditionError(f"cloud has {n_pts} points, fewer than k={params.k}")
    h = params.kernel.bandwidth
    deg = params.poly_degree
    need = min_neighbors_for_degree(deg)
    nbr = _knn(cloud, params.k)
    P = cloud.points
    nbr_pts = P[nbr]

    # (i) reference plane, iterating q = projection of p onto the plane weighted around q
    q = P.copy()
    normal = np.zeros_like(P)
    offset = np.zeros(n_pts)
    active = np.ones(n_pts, dtype=bool)
    iters = 0
    for iters in range(1, PLANE_MAX_ITERS + 1):
        idx = np.nonzero(active)[0]
        nn, dd, _ = _weighted_planes(nbr_pts[idx], q[idx], h)
        normal[idx] = nn
        offset[idx] = dd
        q_new = P[idx] - (np.einsum("ij,ij->i", P[idx], nn) - dd)[:, None] * nn
        step = np.linalg.norm(q_new - q[idx], axis=1)
        q[idx] = q_new
        active[idx[step < PLANE_STEP_TOL]] = False
        if not active.any():
            break

    # (ii) height polynomial over the tangent frame at q
    u, v = _tangent_axes(normal)
    local = nbr_pts - q[:, None, :]
    a = np.einsum("nki,ni->nk", local, u)
    b = np.einsum("nki,ni->nk", local, v)
    f = np.einsum("nki,ni->nk", local, normal)
    w = params.kernel(np.linalg.norm(local, axis=2))
    V = _monomials(a, b, deg, scale=h)
    sw = np.sqrt(w)
    A = V * sw[:, :, None]
    rhs = f * sw
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    rank_ok = s[:, -1] > RANK_RTOL * np.maximum(s[:, 0], np.finfo(float).tiny)
    enough = np.sum(w > WEIGHT_FLOOR, axis=1) >= need
    ok = rank_ok & enough
    s_inv = np.where(s > 0, 1.0 / np.where(s > 0, s, 1.0), 0.0)
    coeffs = np.einsum("nji,nj,nkj,nk->ni", Vt, s_inv, U, rhs)

    projected = q + coeffs[:, 0:1] * normal
    out = np.where(ok[:, None], projected, P)

    # normal of the graph of g: n - g_u u - g_v v (derivatives in mm units)
    grad_u = coeffs[:, 1] / h
    grad_v = coeffs[:, 2] / h
    new_n = normal - grad_u[:, None] * u - grad_v[:, None] * v
    new_n /= np.linalg.norm(new_n, axis=1, keepdims=True)
    if cloud.normals is not None:
        flip = np.einsum("ij,ij->i", new_n, cloud.normals) < 0
        new_n = np.where(flip[:, None], -new_n, new_n)
        new_n = np.where(ok[:, None], new_n, cloud.normals)
    else:
        new_n = np.where(ok[:, None], new_n, normal)

    confidence = ok.astype(np.float64)
    if cloud.confidence is not None:
        confidence = np.minimum(confidence, cloud.confidence)
    disp = np.linalg.norm(out - P, axis=1)
    report = MlsReport(
        failures=int(np.sum(~ok)),
        mean_displacement=float(disp.mean()) if n_pts else 0.0,
        max_displacement=float(disp.max()) if n_pts else 0.0,
        plane_iterations=iters,
    )
    return PointCloud(out, new_n, cloud.source_frame, confidence), report


def mls_project(cloud: PointCloud, params: MlsParams) -> PointCloud:
    return mls_smooth(cloud, params)[0]


def local_frame(cloud: PointCloud, index: int, params: MlsParams) -> MlsLocalFrame:
    """The fitted reference frame and polynomial for one point, for inspection."""
    sub_idx = SpatialIndex(cloud).knn_query(cloud.points[index], params.k)
    p = cloud.points[index]
    nbr_pts = cloud.points[sub_idx][None]
    q = p[None].copy()
    h = params.kernel.bandwidth
    for _ in range(PLANE_MAX_ITERS):
        n, d, _ = _weighted_planes(nbr_pts, q, h)
        q_new = p - (p @ n[0] - d[0]) * n[0]
        moved = np.linalg.norm(q_new - q[0])
        q = q_new[None]
        if moved < PLANE_STEP_TOL:
            break
    u, v = _tangent_axes(n)
    local = nbr_pts[0] - q[0]
    w = params.kernel(np.linalg.norm(local, axis=1))
    V = _monomials(local @ u[0], local @ v[0], params.poly_degree, scale=h)
    sw = np.sqrt(w)
    coeffs, *_ = np.linalg.lstsq(V * sw[:, None], (local @ n[0]) * sw, rcond=None)
    return MlsLocalFrame(q[0], n[0], float(n[0] @ q[0]), u[0], v[0], coeffs, params.poly_degree, h)
