"""Indicator-function surface reconstruction on a regular grid.

Oriented samples are splatted into a vector field with cubic B-spline weights,
``laplacian(chi) = div(V)`` is solved with zero Dirichlet values on the grid
shell, and the surface is the marching-cubes isosurface of ``chi`` at the mean
value sampled at the input points.

Grid samples live on nodes: node ``(i, j, k)`` sits at ``origin + cell_size * (i, j, k)``
and ``dims`` counts nodes per axis.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.fft
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from ._mc_tables import CORNERS, EDGES, TRIANGLES
from .errors import ConvergenceError, ParameterError, PreconditionError
from .geometry import PointCloud, TriangleMesh

log = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 64
MAX_RESOLUTION = 192
DEFAULT_PADDING = 4
MIN_DIM = 8
CG_RTOL = 1e-8
MIN_POINTS = 100


@dataclass(frozen=True)
class GridSpec:
    origin: np.ndarray
    cell_size: float
    dims: tuple[int, int, int]

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(o)):
            raise ParameterError("grid origin must be finite")
        if not self.cell_size > 0:
            raise ParameterError("cell_size must be > 0")
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < MIN_DIM:
            raise ParameterError(f"grid dims must be three values >= {MIN_DIM}, got {self.dims}")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "dims", dims)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dims

    def to_grid(self, points) -> np.ndarray:
        """Continuous node coordinates of world points."""
        return (np.asarray(points, dtype=np.float64) - self.origin) / self.cell_size

    def node_positions(self) -> np.ndarray:
        axes = [self.origin[a] + self.cell_size * np.arange(self.dims[a]) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def translated(self, offset) -> "GridSpec":
        return GridSpec(self.origin + np.asarray(offset, dtype=np.float64), self.cell_size, self.dims)


@dataclass(frozen=True)
class VectorField:
    grid: GridSpec
    values: np.ndarray  # (nx, ny, nz, 3)
    density: np.ndarray | None = None  # (nx, ny, nz) summed splat weights


@dataclass(frozen=True)
class ScalarField:
    grid: GridSpec
    values: np.ndarray  # (nx, ny, nz)


@dataclass(frozen=True)
class SolveInfo:
    iterations: int
    residual: float  # ||L chi - div V|| / ||div V||
    preconditioner: str


@dataclass(frozen=True)
class PoissonResult:
    mesh: TriangleMesh
    chi: ScalarField
    isovalue: float
    solve: SolveInfo
    components: int
    raw_triangles: int


def grid_for_cloud(cloud: PointCloud, resolution: int = DEFAULT_RESOLUTION,
                   padding: int = DEFAULT_PADDING) -> GridSpec:
    """Cubic-cell grid with ``resolution`` nodes along the cloud's longest axis.

    The bounding box is centred and surrounded by at least ``padding`` cells on
    every side.
    """
    if len(cloud) == 0:
        raise PreconditionError("cannot size a grid for an empty cloud")
    if not MIN_DIM <= resolution <= MAX_RESOLUTION:
        raise ParameterError(f"resolution must be in [{MIN_DIM}, {MAX_RESOLUTION}]")
    if padding < 4:
        raise ParameterError("padding must be at least 4 cells")
    span_cells = resolution - 1 - 2 * padding
    if span_cells < 1:
        raise ParameterError("resolution too small for the requested padding")
    lo, hi = cloud.bounds()
    extent = hi - lo
    cell = float(extent.max()) / span_cells
    if cell <= 0:
        raise PreconditionError("cloud has zero extent")
    dims = np.maximum(np.ceil(extent / cell - 1e-9).astype(int) + 1 + 2 * padding, MIN_DIM)
    center = 0.5 * (lo + hi)
    origin = center - 0.5 * (dims - 1) * cell
    return GridSpec(origin, cell, tuple(int(d) for d in dims))


def bspline_weights(t: np.ndarray) -> np.ndarray:
    """Uniform cubic B-spline weights for the 4 nodes floor(x)-1 .. floor(x)+2."""
    t = np.asarray(t, dtype=np.float64)
    s = 1.0 - t
    return np.stack([s ** 3, 3 * t ** 3 - 6 * t ** 2 + 4, -3 * t ** 3 + 3 * t ** 2 + 3 * t + 1, t ** 3], axis=-1) / 6.0


def _stencil(grid: GridSpec, points: np.ndarray):
    g = grid.to_grid(points)
    base = np.floor(g).astype(np.int64)
    w = bspline_weights(g - base)  # (N, 3, 4)
    return base - 1, w


def _check_support(grid: GridSpec, start: np.ndarray) -> None:
    dims = np.array(grid.dims)
    # support must stay off the Dirichlet shell
    bad = np.any(start < 1, axis=1) | np.any(start + 3 > dims - 2, axis=1)
    if np.any(bad):
        i = int(np.nonzero(bad)[0][0])
        raise PreconditionError(f"point {i} lies outside the padded grid")


def splat_vector_field(cloud: PointCloud, grid: GridSpec) -> VectorField:
    """Distribute each oriented normal over its 4x4x4 node neighbourhood."""
    nx, ny, nz = grid.dims
    values = np.zeros((nx, ny, nz, 3))
    density = np.zeros((nx, ny, nz))
    if len(cloud) == 0:
        return VectorField(grid, values, density)
    if cloud.normals is None:
        raise PreconditionError("splatting needs oriented normals")
    start, w = _stencil(grid, cloud.points)
    _check_support(grid, start)
    off = np.arange(4)
    ix = (start[:, 0, None] + off)[:, :, None, None]
    iy = (start[:, 1, None] + off)[:, None, :, None]
    iz = (start[:, 2, None] + off)[:, None, None, :]
    flat = ((ix * ny + iy) * nz + iz).reshape(len(cloud), 64)
    weight = (w[:, 0, :, None, None] * w[:, 1, None, :, None] * w[:, 2, None, None, :]).reshape(len(cloud), 64)
    size = nx * ny * nz
    fi = flat.ravel()
    wi = weight.ravel()
    density = np.bincount(fi, weights=wi, minlength=size).reshape(nx, ny, nz)
    for a in range(3):
        comp = (weight * cloud.normals[:, a, None]).ravel()
        values[..., a] = np.bincount(fi, weights=comp, minlength=size).reshape(nx, ny, nz)
    return VectorField(grid, values, density)


def divergence(field: VectorField) -> np.ndarray:
    """Central-difference divergence at interior nodes (zero on the shell)."""
    v = field.values
    h = field.grid.cell_size
    div = np.zeros(v.shape[:3])
    div[1:-1, 1:-1, 1:-1] = (
        (v[2:, 1:-1, 1:-1, 0] - v[:-2, 1:-1, 1:-1, 0])
        + (v[1:-1, 2:, 1:-1, 1] - v[1:-1, :-2, 1:-1, 1])
        + (v[1:-1, 1:-1, 2:, 2] - v[1:-1, 1:-1, :-2, 2])
    ) / (2.0 * h)
    return div


def laplacian(u: np.ndarray, h: float) -> np.ndarray:
    """7-point Laplacian at interior nodes of a field that is zero on the shell."""
    out = np.zeros_like(u)
    c = u[1:-1, 1:-1, 1:-1]
    out[1:-1, 1:-1, 1:-1] = (
        u[2:, 1:-1, 1:-1] + u[:-2, 1:-1, 1:-1]
        + u[1:-1, 2:, 1:-1] + u[1:-1, :-2, 1:-1]
        + u[1:-1, 1:-1, 2:] + u[1:-1, 1:-1, :-2]
        - 6.0 * c
    ) / (h * h)
    return out


class _NegLaplacian:
    """SPD operator -L on interior nodes, with a fast-sine-transform preconditioner."""

    def __init__(self, interior_shape, h):
        self.shape = interior_shape
        self.h = h
        eig = 0
        for axis, n in enumerate(interior_shape):
            lam = (2.0 - 2.0 * np.cos(np.pi * np.arange(1, n + 1) / (n + 1))) / (h * h)
            shape = [1, 1, 1]
            shape[axis] = n
            eig = eig + lam.reshape(shape)
        self.eig = eig

    def matvec(self, x):
        p = np.pad(x, 1)
        return -laplacian(p, self.h)[1:-1, 1:-1, 1:-1]

    def precondition(self, r):
        # DST-I diagonalises the Dirichlet 7-point Laplacian exactly
        return scipy.fft.idstn(scipy.fft.dstn(r, type=1) / self.eig, type=1)


def conjugate_gradient(op, b, rtol=CG_RTOL, max_iter=1000, precondition=None):
    """Preconditioned CG for the SPD ``op.matvec``; returns (x, iterations, relative residual)."""
    x = np.zeros_like(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return x, 0, 0.0
    r = b.copy()
    z = precondition(r) if precondition else r
    p = z.copy()
    rz = np.vdot(r, z)
    rel = 1.0
    for it in range(1, max_iter + 1):
        Ap = op.matvec(p)
        alpha = rz / np.vdot(p, Ap)
        x += alpha * p
        r -= alpha * Ap
        rel = np.linalg.norm(r) / bnorm
        if rel < rtol:
            return x, it, rel
        z = precondition(r) if precondition else r
        rz_new = np.vdot(r, z)
        p *= rz_new / rz
        p += z
        rz = rz_new
    raise ConvergenceError(f"CG stopped at the {max_iter}-iteration cap with residual {rel:.3e}",
                           residual=rel, iterations=max_iter)


def solve_indicator(v: VectorField, preconditioner: str = "fst",
                    max_iter: int | None = None) -> tuple[ScalarField, SolveInfo]:
    """Solve ``laplacian(chi) = div(V)`` with chi = 0 on the grid shell.

    ``preconditioner`` is ``"fst"`` (fast sine transform) or ``"none"`` for plain CG.
    The reported residual is recomputed from the returned field.
    """
    if preconditioner not in ("fst", "none"):
        raise ParameterError(f"unknown preconditioner {preconditioner!r}")
    grid = v.grid
    if not np.all(np.isfinite(v.values)):
        raise ParameterError("vector field has non-finite values")
    h = grid.cell_size
    div = divergence(v)
    chi = np.zeros(grid.dims)
    inner = div[1:-1, 1:-1, 1:-1]
    cap = 10 * max(grid.dims) if max_iter is None else max_iter
    op = _NegLaplacian(inner.shape, h)
    pre = op.precondition if preconditioner == "fst" else None
    x, iters, _ = conjugate_gradient(op, -inner, CG_RTOL, cap, pre)
    chi[1:-1, 1:-1, 1:-1] = x
    info = SolveInfo(iters, poisson_residual(chi, div, h), preconditioner)
    log.debug("poisson solve: %d iterations, residual %.3e", iters, info.residual)
    return ScalarField(grid, chi), info


def poisson_residual(chi: np.ndarray, div: np.ndarray, h: float) -> float:
    """||L chi - div||_2 / ||div||_2 over interior nodes (0 when div vanishes)."""
    dn = np.linalg.norm(div[1:-1, 1:-1, 1:-1])
    if dn == 0:
        return 0.0
    r = laplacian(chi, h)[1:-1, 1:-1, 1:-1] - div[1:-1, 1:-1, 1:-1]
    return float(np.linalg.norm(r) / dn)


def trilinear(field: ScalarField, points) -> np.ndarray:
    g = field.grid.to_grid(points)
    dims = np.array(field.grid.dims)
    if np.any(g < 0) or np.any(g > dims - 1):
        raise PreconditionError("sample point outside the grid")
    i0 = np.minimum(np.floor(g).astype(np.int64), dims - 2)
    t = g - i0
    v = field.values
    out = np.zeros(len(g))
    for dx in (0, 1):
        wx = t[:, 0] if dx else 1 - t[:, 0]
        for dy in (0, 1):
            wy = t[:, 1] if dy else 1 - t[:, 1]
            for dz in (0, 1):
                wz = t[:, 2] if dz else 1 - t[:, 2]
                out += wx * wy * wz * v[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
    return out


def select_isovalue(chi: ScalarField, cloud: PointCloud) -> float:
    """Mean of chi trilinearly interpolated at the sample positions."""
    if len(cloud) == 0:
        raise PreconditionError("isovalue selection needs at least one point")
    return float(np.mean(trilinear(chi, cloud.points)))


_TRI_TABLE = np.full((256, 15), -1, dtype=np.int64)
for _case, _row in enumerate(TRIANGLES):
    _TRI_TABLE[_case, : len(_row)] = _row
_TRI_COUNT = np.array([len(r) // 3 for r in TRIANGLES], dtype=np.int64)
_CORNERS = np.array(CORNERS, dtype=np.int64)
# each cell edge as (offset of its lower corner, axis)
_EDGE_OFFSET = np.array([CORNERS[a] for a, _ in EDGES], dtype=np.int64)
_EDGE_AXIS = np.array([int(np.argmax(np.subtract(CORNERS[b], CORNERS[a]))) for a, b in EDGES], dtype=np.int64)


def extract_isosurface(chi: ScalarField, isovalue: float) -> TriangleMesh:
    """Marching cubes with welded edge vertices.

    Triangles are wound so their normals point toward decreasing ``chi``.
    """
    v = np.asarray(chi.values, dtype=np.float64)
    grid = chi.grid
    nx, ny, nz = v.shape
    empty = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    if not (v.min() <= isovalue <= v.max()):
        return empty
    below = v < isovalue
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for bit, (dx, dy, dz) in enumerate(CORNERS):
        case |= below[dx:nx - 1 + dx, dy:ny - 1 + dy, dz:nz - 1 + dz].astype(np.int64) << bit
    cells = np.nonzero((case > 0) & (case < 255))
    if len(cells[0]) == 0:
        return empty
    cell_idx = np.stack(cells, axis=1)
    cell_case = case[cells]
    ntri = _TRI_COUNT[cell_case]
    has = ntri > 0
    cell_idx, cell_case, ntri = cell_idx[has], cell_case[has], ntri[has]
    rep = np.repeat(np.arange(len(cell_case)), ntri)
    slot = np.arange(len(rep)) - np.repeat(np.cumsum(ntri) - ntri, ntri)
    local_edges = _TRI_TABLE[cell_case[rep][:, None], 3 * slot[:, None] + np.arange(3)]  # (T, 3)

    node = cell_idx[rep][:, None, :] + _EDGE_OFFSET[local_edges]
    axis = _EDGE_AXIS[local_edges]
    key = ((node[..., 0] * ny + node[..., 1]) * nz + node[..., 2]) * 3 + axis
    uniq, inverse = np.unique(key.ravel(), return_inverse=True)
    tris = inverse.reshape(-1, 3)

    flat_node, ax = np.divmod(uniq, 3)
    a_idx = np.stack(np.unravel_index(flat_node, (nx, ny, nz)), axis=1)
    b_idx = a_idx + np.eye(3, dtype=np.int64)[ax]
    va = v[a_idx[:, 0], a_idx[:, 1], a_idx[:, 2]]
    vb = v[b_idx[:, 0], b_idx[:, 1], b_idx[:, 2]]
    denom = vb - va
    t = np.where(denom != 0, (isovalue - va) / np.where(denom != 0, denom, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    pos = a_idx.astype(np.float64)
    pos[np.arange(len(ax)), ax] += t
    verts = grid.origin + grid.cell_size * pos
    return TriangleMesh(verts, tris)


def largest_component(mesh: TriangleMesh) -> tuple[TriangleMesh, int]:
    """Keep the connected component with the most triangles (ties: lowest label)."""
    if len(mesh.triangles) == 0:
        return mesh, 0
    t = mesh.triangles
    nv = len(mesh.vertices)
    rows = np.concatenate([t[:, 0], t[:, 1], t[:, 2]])
    cols = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(nv, nv))
    n_comp, labels = connected_components(graph, directed=False)
    tri_label = labels[t[:, 0]]
    counts = np.bincount(tri_label, minlength=n_comp)
    used = np.unique(tri_label)
    best = int(np.argmax(counts))
    kept = TriangleMesh(mesh.vertices, t[tri_label == best]).compact()
    return kept, int(len(used))


def poisson_surface(cloud: PointCloud, resolution: int = DEFAULT_RESOLUTION,
                    padding: int = DEFAULT_PADDING, preconditioner: str = "fst") -> PoissonResult:
    """Full reconstruction with diagnostics: splat, solve, isovalue, extract, largest component."""
    if len(cloud) < MIN_POINTS:
        raise PreconditionError(f"Poisson reconstruction needs >= {MIN_POINTS} points, got {len(cloud)}")
    if cloud.normals is None:
        raise PreconditionError("Poisson reconstruction needs oriented normals")
    grid = grid_for_cloud(cloud, resolution, padding)
    field = splat_vector_field(cloud, grid)
    # chi is 1 inside: its gradient follows the inward normal, so splat -n
    inward = VectorField(grid, -field.values, field.density)
    chi, info = solve_indicator(inward, preconditioner)
    iso = select_isovalue(chi, cloud)
    raw = extract_isosurface(chi, iso)
    mesh, n_comp = largest_component(raw)
    return PoissonResult(mesh, chi, iso, info, n_comp, len(raw.triangles))


def poisson_reconstruct(cloud: PointCloud, resolution: int = DEFAULT_RESOLUTION,
                        padding: int = DEFAULT_PADDING) -> TriangleMesh:
    return poisson_surface(cloud, resolution, padding).mesh
